"""Deterministic synthetic scenes: boxes, surface point clouds, silhouette images."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (MIN_DEPTH, BevGrid, Box3D, CameraCalib, box_corners, look_at_calib,
                       project_points, rotated_bev_iou)
from .tensor import load_tft1, save_tft1

SCENE_VERSION = 1
BEV_CHANNELS = 3  # log1p count, mean height, max height

# classes 0 and 1 share a size range and differ only in colour
DEFAULT_SIZES = (
    ((3.8, 4.6), (1.6, 2.0), (1.4, 1.7)),
    ((3.8, 4.6), (1.6, 2.0), (1.4, 1.7)),
    ((0.6, 0.9), (0.6, 0.9), (1.6, 1.9)),
)
DEFAULT_COLORS = ((0.9, 0.2, 0.2), (0.2, 0.3, 0.9), (0.2, 0.8, 0.3))
BACKGROUND = 0.1


class SceneGenerationError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    pass


def default_cameras(num: int = 4, image_size: tuple[int, int] = (48, 128), fov_deg: float = 100.0,
                    height: float = 1.5, feature_stride: int = 8) -> list[CameraCalib]:
    """``num`` cameras evenly spread in azimuth; adjacent views overlap when fov > 360/num."""
    H, W = image_size
    focal = (W / 2.0) / math.tan(math.radians(fov_deg) / 2)
    return [look_at_calib(2 * math.pi * i / num, height, focal, image_size, feature_stride)
            for i in range(num)]


@dataclass
class SceneSpec:
    seed: int = 0
    num_objects: int = 3
    class_probs: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    size_ranges: tuple = DEFAULT_SIZES
    grid: BevGrid = field(default_factory=lambda: BevGrid.square(16.0, 1.0))
    cameras: list[CameraCalib] = field(default_factory=default_cameras)
    points_per_object: int = 300
    noise_std: float = 0.03
    raster_stride: int = 8
    min_range: float = 4.0
    margin: float = 2.0
    max_speed: float = 0.0
    colors: tuple = DEFAULT_COLORS

    def __post_init__(self):
        if self.num_objects < 0:
            raise ValueError("num_objects must be non-negative")
        for rng_ in self.size_ranges:
            for lo, hi in rng_:
                if lo <= 0 or hi < lo:
                    raise ValueError("size ranges must be positive intervals")
        if len(self.class_probs) != len(self.size_ranges):
            raise ValueError("class distribution and size table disagree on K")

    @property
    def num_classes(self) -> int:
        return len(self.size_ranges)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "num_objects": self.num_objects,
                "class_probs": list(self.class_probs),
                "size_ranges": [[list(r) for r in c] for c in self.size_ranges],
                "grid": self.grid.to_dict(), "cameras": [c.to_dict() for c in self.cameras],
                "points_per_object": self.points_per_object, "noise_std": self.noise_std,
                "raster_stride": self.raster_stride, "min_range": self.min_range,
                "margin": self.margin, "max_speed": self.max_speed,
                "colors": [list(c) for c in self.colors]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["class_probs"] = tuple(d["class_probs"])
        d["size_ranges"] = tuple(tuple(tuple(r) for r in c) for c in d["size_ranges"])
        d["grid"] = BevGrid.from_dict(d["grid"])
        d["cameras"] = [CameraCalib.from_dict(c) for c in d["cameras"]]
        d["colors"] = tuple(tuple(c) for c in d["colors"])
        return cls(**d)


@dataclass
class Scene:
    points: np.ndarray  # (P, 3)
    images: list[np.ndarray]  # per camera (H, W, 3)
    calibs: list[CameraCalib]
    gt_boxes: list[Box3D]
    spec: SceneSpec
    source_index: np.ndarray | None = None  # box index of each point

    @property
    def grid(self) -> BevGrid:
        return self.spec.grid

    def voxel_grid(self) -> BevGrid:
        return self.spec.grid.scaled(self.spec.raster_stride)


def probe_spec(seed: int, num_objects: int = 3, **kw) -> SceneSpec:
    """Scenes holding only the two geometry-identical classes (0 and 1)."""
    return SceneSpec(seed=seed, num_objects=num_objects, class_probs=(0.5, 0.5, 0.0), **kw)


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _sample_surface(box: Box3D, n: int, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the cuboid faces, plus noise capped at 3 sigma."""
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    local = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    dims = np.array([l, w, h])
    for a in range(3):
        sel = axis == a
        others = [o for o in range(3) if o != a]
        local[sel, a] = sign[sel] * dims[a]
        local[sel, others[0]] = uv[sel, 0] * dims[others[0]]
        local[sel, others[1]] = uv[sel, 1] * dims[others[1]]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.stack([box.center[0] + c * local[:, 0] - s * local[:, 1],
                      box.center[1] + s * local[:, 0] + c * local[:, 1],
                      box.center[2] + local[:, 2]], axis=1)
    noise = rng.normal(0.0, noise_std, size=(n, 3))
    norm = np.linalg.norm(noise, axis=1, keepdims=True)
    cap = 3.0 * noise_std
    noise = np.where(norm > cap, noise * (cap / np.maximum(norm, 1e-300)), noise)
    return world + noise


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; CCW hull without repeated endpoint."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float))))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def inside_convex(hull: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    inside = np.ones(px.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        inside &= (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) >= 0
    return inside


def silhouette_mask(calib: CameraCalib, box: Box3D) -> np.ndarray | None:
    """Pixels whose centres fall inside the hull of the box's in-front projected corners."""
    uv, depth = project_points(calib, box_corners(box))
    front = uv[depth > MIN_DEPTH]
    if len(front) < 3:
        return None
    hull = convex_hull(front)
    if len(hull) < 3:
        return None
    H, W = calib.image_size
    rows, cols = np.mgrid[0:H, 0:W]
    return inside_convex(hull, cols + 0.5, rows + 0.5)


def render_image(calib: CameraCalib, boxes: Sequence[Box3D], colors) -> np.ndarray:
    """Class-coloured silhouettes on a flat background, painted far to near."""
    H, W = calib.image_size
    img = np.full((H, W, 3), BACKGROUND)
    depths = [(calib.extrinsic[:3, :3] @ np.asarray(b.center) + calib.extrinsic[:3, 3])[2] for b in boxes]
    for i in sorted(range(len(boxes)), key=lambda j: -depths[j]):
        if depths[i] <= MIN_DEPTH:
            continue
        mask = silhouette_mask(calib, boxes[i])
        if mask is not None:
            img[mask] = colors[boxes[i].class_id]
    return img


def _sample_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[Box3D]:
    grid = spec.grid
    probs = np.asarray(spec.class_probs, dtype=float)
    probs = probs / probs.sum()
    boxes: list[Box3D] = []
    attempts = 0
    while len(boxes) < spec.num_objects:
        attempts += 1
        if attempts > 1000:
            raise SceneGenerationError(f"could not place {spec.num_objects} boxes without overlap")
        k = int(rng.choice(len(probs), p=probs))
        (l0, l1), (w0, w1), (h0, h1) = spec.size_ranges[k]
        l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
        x = rng.uniform(grid.x_range[0] + spec.margin, grid.x_range[1] - spec.margin)
        y = rng.uniform(grid.y_range[0] + spec.margin, grid.y_range[1] - spec.margin)
        yaw = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(0.0, spec.max_speed)
        vel = (speed * math.cos(yaw), speed * math.sin(yaw))
        if math.hypot(x, y) < spec.min_range:
            continue
        cand = Box3D((x, y, h / 2), (l, w, h), yaw, vel, k)
        if any(rotated_bev_iou(cand, b) >= 0.05 for b in boxes):
            continue
        boxes.append(cand)
    return boxes


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    boxes = _sample_boxes(spec, rng)
    chunks, owners = [], []
    for i, b in enumerate(boxes):
        chunks.append(_sample_surface(b, spec.points_per_object, spec.noise_std, rng))
        owners.append(np.full(spec.points_per_object, i))
    points = _f32(np.concatenate(chunks)) if chunks else np.zeros((0, 3))
    source = np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64)
    images = [_f32(render_image(c, boxes, spec.colors)) for c in spec.cameras]
    return Scene(points, images, list(spec.cameras), boxes, spec, source)


def rasterize_bev(points: np.ndarray, voxel_grid: BevGrid) -> np.ndarray:
    """Per-cell log1p(count), mean z and max z over the fine voxel grid, (X, Y, 3)."""
    X, Y = voxel_grid.extents
    out = np.zeros((X, Y, BEV_CHANNELS))
    if len(points) == 0:
        return out
    pts = np.asarray(points, dtype=float)
    ix = np.floor((pts[:, 0] - voxel_grid.x_range[0]) / voxel_grid.cell[0]).astype(np.int64)
    iy = np.floor((pts[:, 1] - voxel_grid.y_range[0]) / voxel_grid.cell[1]).astype(np.int64)
    ok = (ix >= 0) & (ix < X) & (iy >= 0) & (iy < Y)
    ix, iy, z = ix[ok], iy[ok], pts[ok, 2]
    count = np.zeros((X, Y))
    zsum = np.zeros((X, Y))
    zmax = np.full((X, Y), -np.inf)
    np.add.at(count, (ix, iy), 1.0)
    np.add.at(zsum, (ix, iy), z)
    np.maximum.at(zmax, (ix, iy), z)
    occupied = count > 0
    out[..., 0] = np.log1p(count)
    out[..., 1] = np.where(occupied, zsum / np.maximum(count, 1.0), 0.0)
    out[..., 2] = np.where(occupied, zmax, 0.0)
    return out


# persistence ----------------------------------------------------------------
def save_scene(scene: Scene, path) -> list[Path]:
    """Write ``path`` (JSON) plus sibling TFT1 dumps; returns every file written."""
    path = Path(path)
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    points_name = f"{stem}.points.tft"
    image_names = [f"{stem}.cam{i}.tft" for i in range(len(scene.images))]
    save_tft1(path.parent / points_name, scene.points.reshape(-1, 3))
    for name, img in zip(image_names, scene.images):
        save_tft1(path.parent / name, img)
    doc = {"version": SCENE_VERSION, "spec": scene.spec.to_dict(),
           "gt_boxes": [b.to_dict() for b in scene.gt_boxes],
           "calibs": [c.to_dict() for c in scene.calibs],
           "points": points_name, "images": image_names}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    return [path, path.parent / points_name] + [path.parent / n for n in image_names]


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"{path}: malformed scene file ({exc})") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise SceneFormatError(f"{path}: not a scene document")
    if doc["version"] != SCENE_VERSION:
        raise SceneFormatError(f"{path}: scene version {doc['version']} != {SCENE_VERSION}")
    try:
        spec = SceneSpec.from_dict(doc["spec"])
        boxes = [Box3D.from_dict(b) for b in doc["gt_boxes"]]
        calibs = [CameraCalib.from_dict(c) for c in doc["calibs"]]
        points = load_tft1(path.parent / doc["points"]).reshape(-1, 3)
        images = [load_tft1(path.parent / n) for n in doc["images"]]
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise SceneFormatError(f"{path}: malformed scene file ({exc})") from exc
    return Scene(points, images, calibs, boxes, spec)


def scene_checksum(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()
