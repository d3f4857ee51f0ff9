"""Calibration, projection, box parametrisation and rotated BEV IoU."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
ATTR_DIM = 10  # dx, dy, z, log l, log w, log h, sin, cos, vx, vy


class BehindCameraError(ValueError):
    pass


class OutOfViewError(ValueError):
    pass


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    y = math.remainder(yaw, 2 * math.pi)
    return math.pi if y <= -math.pi else y


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        if len(self.center) != 3 or len(self.size) != 3 or len(self.velocity) != 2:
            raise ValueError("Box3D needs a 3-vector center/size and a 2-vector velocity")
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))

    def with_score(self, score: float, class_id: int | None = None) -> "Box3D":
        return replace(self, score=score, class_id=self.class_id if class_id is None else class_id)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw,
                "velocity": list(self.velocity), "class_id": self.class_id, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(tuple(d["center"]), tuple(d["size"]), d["yaw"], tuple(d["velocity"]),
                   d["class_id"], d.get("score", 1.0))


@dataclass(frozen=True)
class BevGrid:
    x_range: tuple[float, float] = (-51.2, 51.2)
    y_range: tuple[float, float] = (-51.2, 51.2)
    cell: tuple[float, float] = (0.8, 0.8)
    extents: tuple[int, int] = field(init=False)

    def __post_init__(self):
        ext = []
        for (lo, hi), c in zip((self.x_range, self.y_range), self.cell):
            n = (hi - lo) / c
            if c <= 0 or hi <= lo or abs(n - round(n)) > 1e-9:
                raise ValueError(f"grid range {lo}..{hi} is not an integral number of {c} m cells")
            ext.append(int(round(n)))
        object.__setattr__(self, "extents", tuple(ext))

    @classmethod
    def square(cls, half_extent: float, cell: float) -> "BevGrid":
        return cls((-half_extent, half_extent), (-half_extent, half_extent), (cell, cell))

    def scaled(self, factor: int) -> "BevGrid":
        """Same range, cells ``factor`` times finer (the voxel grid under a stride)."""
        return BevGrid(self.x_range, self.y_range, (self.cell[0] / factor, self.cell[1] / factor))

    def to_cells(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.x_range[0]) / self.cell[0], (y - self.y_range[0]) / self.cell[1]

    def to_world(self, px: float, py: float) -> tuple[float, float]:
        return self.x_range[0] + px * self.cell[0], self.y_range[0] + py * self.cell[1]

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        """Continuous cell coordinates of the centre of cell (ix, iy)."""
        return ix + 0.5, iy + 0.5

    def contains(self, x: float, y: float) -> bool:
        return self.x_range[0] <= x < self.x_range[1] and self.y_range[0] <= y < self.y_range[1]

    def normalize(self, x, y):
        """World metres to [0, 1] per axis."""
        return ((np.asarray(x) - self.x_range[0]) / (self.x_range[1] - self.x_range[0]),
                (np.asarray(y) - self.y_range[0]) / (self.y_range[1] - self.y_range[0]))

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range), "cell": list(self.cell)}

    @classmethod
    def from_dict(cls, d: dict) -> "BevGrid":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), tuple(d["cell"]))


@dataclass(frozen=True, eq=False)
class CameraCalib:
    intrinsics: np.ndarray
    extrinsic: np.ndarray  # LiDAR -> camera, 4x4
    image_size: tuple[int, int]  # (H, W) pixels
    feature_stride: int = 8

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=float)
        E = np.array(self.extrinsic, dtype=float)
        if K.shape != (3, 3) or E.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and extrinsic 4x4")
        if K[2, 2] != 1.0:
            raise ValueError("intrinsics[2][2] must be 1")
        R = E[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("extrinsic rotation is not a proper orthonormal matrix")
        K.flags.writeable = False
        E.flags.writeable = False
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsic", E)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def feature_size(self) -> tuple[int, int]:
        H, W = self.image_size
        return H // self.feature_stride, W // self.feature_stride

    @property
    def camera_center(self) -> np.ndarray:
        """Camera position in the LiDAR frame."""
        R, t = self.extrinsic[:3, :3], self.extrinsic[:3, 3]
        return -R.T @ t

    def with_translation_offset(self, offset: Sequence[float]) -> "CameraCalib":
        E = self.extrinsic.copy()
        E[:3, 3] = E[:3, 3] + np.asarray(offset, dtype=float)
        return replace(self, extrinsic=E)

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.tolist(), "extrinsic": self.extrinsic.tolist(),
                "image_size": list(self.image_size), "feature_stride": self.feature_stride}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraCalib":
        return cls(np.array(d["intrinsics"]), np.array(d["extrinsic"]), tuple(d["image_size"]),
                   int(d["feature_stride"]))


def look_at_calib(yaw: float, height: float, focal: float, image_size: tuple[int, int],
                  feature_stride: int = 8, position_xy: tuple[float, float] = (0.0, 0.0)) -> CameraCalib:
    """Pinhole camera at ``height`` looking horizontally along LiDAR azimuth ``yaw``."""
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    R = np.stack([right, down, fwd])
    c = np.array([position_xy[0], position_xy[1], height])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ c
    H, W = image_size
    K = np.array([[focal, 0.0, W / 2.0], [0.0, focal, H / 2.0], [0.0, 0.0, 1.0]])
    return CameraCalib(K, E, image_size, feature_stride)


# projection -----------------------------------------------------------------
def to_camera(calib: CameraCalib, points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return pts @ calib.extrinsic[:3, :3].T + calib.extrinsic[:3, 3]


def project_point(calib: CameraCalib, p) -> tuple[float, float, float]:
    pc = to_camera(calib, p)[0]
    depth = pc[2]
    if depth <= MIN_DEPTH:
        raise BehindCameraError(f"point at camera depth {depth:.3g} is behind the camera")
    uvw = calib.intrinsics @ pc
    return float(uvw[0] / depth), float(uvw[1] / depth), float(depth)


def project_points(calib: CameraCalib, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; returns (uv pixels, depth). Rows with depth <= 0 hold garbage uv."""
    pc = to_camera(calib, points)
    depth = pc[:, 2]
    safe = np.where(depth > MIN_DEPTH, depth, 1.0)
    uvw = pc @ calib.intrinsics.T
    return uvw[:, :2] / safe[:, None], depth


def box_corners(b: Box3D) -> np.ndarray:
    """Eight corners, shape (8, 3).

    Order: bottom face (z - h/2) then top face, each counter-clockwise seen
    from above starting at the (+l/2, +w/2) corner in the box frame.
    """
    l, w, h = b.size
    sx = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * (l / 2)
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (w / 2)
    sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * (h / 2)
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    x = b.center[0] + c * sx - s * sy
    y = b.center[1] + s * sx + c * sy
    z = b.center[2] + sz
    return np.stack([x, y, z], axis=1)


def bev_corners(b: Box3D) -> np.ndarray:
    """Footprint rectangle, counter-clockwise, shape (4, 2)."""
    return box_corners(b)[:4, :2]


# minimum enclosing circle ---------------------------------------------------
def _circle_two(a, b):
    cx, cy = (a[0] + b[0]) / 2, (a[1] + b[1]) / 2
    return cx, cy, math.hypot(a[0] - cx, a[1] - cy)


def _circle_three(a, b, c):
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-15:
        # collinear: the widest pair spans the circle
        pairs = [_circle_two(a, b), _circle_two(a, c), _circle_two(b, c)]
        return max(pairs, key=lambda t: t[2])
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    return ux, uy, math.hypot(ax - ux, ay - uy)


def _inside(circle, p, slack: float = 1e-12) -> bool:
    cx, cy, r = circle
    return math.hypot(p[0] - cx, p[1] - cy) <= r + slack * max(1.0, r)


def min_enclosing_circle(points) -> tuple[float, float, float]:
    """Welzl's algorithm (iterative move-to-front form, fixed point order)."""
    pts = [tuple(map(float, p)) for p in np.asarray(points, dtype=float)]
    if not pts:
        raise ValueError("no points")
    circle = (pts[0][0], pts[0][1], 0.0)
    for i, p in enumerate(pts):
        if _inside(circle, p):
            continue
        circle = (p[0], p[1], 0.0)
        for j in range(i):
            q = pts[j]
            if _inside(circle, q):
                continue
            circle = _circle_two(p, q)
            for k in range(j):
                s = pts[k]
                if not _inside(circle, s):
                    circle = _circle_three(p, q, s)
    return circle


@dataclass(frozen=True)
class ProjectedBox:
    """Projected centre (cx, cy) and enclosing-circle radius r, in feature cells."""

    cx: float
    cy: float
    r: float
    circle_cx: float
    circle_cy: float
    depth: float


def project_box(calib: CameraCalib, b: Box3D) -> ProjectedBox:
    u, v, depth = project_point(calib, b.center)
    uv, depths = project_points(calib, box_corners(b))
    front = uv[depths > MIN_DEPTH]
    if len(front) < 3:
        raise OutOfViewError("fewer than three box corners in front of the camera")
    s = float(calib.feature_stride)
    ccx, ccy, r = min_enclosing_circle(front / s)
    return ProjectedBox(u / s, v / s, r, ccx, ccy, depth)


def locate_fov(calibs: Sequence[CameraCalib], b: Box3D) -> int | None:
    """Index of the camera whose image contains the projected box centre.

    With several candidates the one whose image centre is nearest the
    projected centre wins; earlier cameras win exact ties.
    """
    best, best_dist = None, math.inf
    for idx, calib in enumerate(calibs):
        try:
            u, v, _ = project_point(calib, b.center)
        except BehindCameraError:
            continue
        H, W = calib.image_size
        if not (0 <= u < W and 0 <= v < H):
            continue
        _, depths = project_points(calib, box_corners(b))
        if (depths > MIN_DEPTH).sum() < 3:
            continue
        dist = math.hypot(u - W / 2.0, v - H / 2.0)
        if dist < best_dist:
            best, best_dist = idx, dist
    return best


# rotated BEV IoU --------------------------------------------------------------
def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clipper``."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, output = output, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=float).reshape(-1, 2)


def _bev_key(b: Box3D) -> tuple:
    return (b.center[0], b.center[1], b.size[0], b.size[1], b.yaw)


def rotated_bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated footprints; argument order never matters."""
    if _bev_key(b) < _bev_key(a):
        a, b = b, a
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    if area_a < 1e-12 or area_b < 1e-12:
        return 0.0
    reach = math.hypot(*a.size[:2]) / 2 + math.hypot(*b.size[:2]) / 2
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= reach:
        return 0.0
    inter = polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))
    inter = min(max(inter, 0.0), area_a, area_b)
    union = area_a + area_b - inter
    return float(min(1.0, max(0.0, inter / union)))


def aligned_iou_3d(a_size, b_size) -> float:
    """IoU of two boxes sharing centre and orientation (the scale-error measure)."""
    inter = float(np.prod(np.minimum(a_size, b_size)))
    return inter / (float(np.prod(a_size)) + float(np.prod(b_size)) - inter)


# box coding -----------------------------------------------------------------
def encode_box(b: Box3D, query_pos: tuple[float, float], grid: BevGrid) -> np.ndarray:
    """Regression target of ``b`` relative to a query at continuous cell ``query_pos``."""
    if not grid.contains(b.center[0], b.center[1]):
        raise ValueError(f"box centre {b.center[:2]} lies outside the BEV grid")
    if min(b.size) <= 0:
        raise ValueError("box size must be positive")
    px, py = grid.to_cells(b.center[0], b.center[1])
    return np.array([px - query_pos[0], py - query_pos[1], b.center[2],
                     math.log(b.size[0]), math.log(b.size[1]), math.log(b.size[2]),
                     math.sin(b.yaw), math.cos(b.yaw), b.velocity[0], b.velocity[1]])


def decode_box(query_pos: tuple[float, float], attrs, grid: BevGrid, class_id: int = 0,
               score: float = 1.0) -> Box3D:
    a = np.asarray(attrs, dtype=float)
    x, y = grid.to_world(query_pos[0] + a[0], query_pos[1] + a[1])
    s, c = a[6], a[7]
    norm = math.hypot(s, c)
    if norm < 1e-12:
        log.warning("zero (sin, cos) yaw vector decoded as yaw 0")
        yaw = 0.0
    else:
        yaw = math.atan2(s / norm, c / norm)
    sizes = np.exp(np.clip(a[3:6], -20.0, 20.0))
    return Box3D((x, y, a[2]), tuple(sizes), yaw, (a[8], a[9]), class_id, score)
