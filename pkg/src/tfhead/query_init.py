"""Heatmap-driven, category-aware query initialisation (LiDAR and image-guided)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .geometry import BevGrid, Box3D, CameraCalib
from .nn import MLP, Linear, Module, MultiheadAttention
from .tensor import Tensor


@dataclass
class Heatmap:
    values: Tensor  # (X, Y, K), entries in [0, 1]
    grid: BevGrid

    @property
    def K(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class QueryCandidate:
    cell: tuple[int, int]
    class_id: int
    heat: float


@dataclass
class ObjectQuery:
    position: tuple[float, float]  # continuous BEV cells
    feature: np.ndarray
    class_id: int
    heat: float


@dataclass
class QueryBatch:
    """N queries stacked: features stay on the tape, the rest is plain numpy."""

    features: Tensor  # (N, d)
    positions: np.ndarray  # (N, 2) continuous cells
    class_ids: np.ndarray  # (N,)
    heat: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.class_ids)

    def __getitem__(self, i: int) -> ObjectQuery:
        return ObjectQuery(tuple(self.positions[i]), self.features.data[i], int(self.class_ids[i]),
                           float(self.heat[i]))


class HeatmapHead(Module):
    """Per-cell two-layer MLP (a pair of 1x1 convolutions) followed by a sigmoid."""

    def __init__(self, d: int, num_classes: int, rng: np.random.Generator, prior: float = 0.1):
        self.mlp = MLP(d, d, num_classes, rng)
        self.mlp.fc2.bias.data[:] = -math.log((1 - prior) / prior)

    def logits(self, features: Tensor) -> Tensor:
        return self.mlp(features)

    def __call__(self, features: Tensor, grid: BevGrid) -> Heatmap:
        return Heatmap(T.sigmoid(self.logits(features)), grid)


def heatmap_head(F_L: Tensor, head: HeatmapHead, grid: BevGrid) -> Heatmap:
    if F_L.ndim != 3 or F_L.shape[:2] != grid.extents:
        raise T.ShapeError(f"BEV features {F_L.shape} do not match grid {grid.extents}")
    return head(F_L, grid)


# ground-truth heatmap -------------------------------------------------------
def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """CenterNet radius that keeps a corner-shifted box above ``min_overlap`` IoU."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(canvas: np.ndarray, center: tuple[int, int], radius: int) -> None:
    """Max-splat a Gaussian with sigma = diameter / 6 onto a 2D canvas, in place."""
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    offs = np.arange(-radius, radius + 1)
    g = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2 * sigma * sigma))
    g[g < np.finfo(float).eps * g.max()] = 0.0
    x, y = center
    X, Y = canvas.shape
    x0, x1 = max(0, x - radius), min(X, x + radius + 1)
    y0, y1 = max(0, y - radius), min(Y, y + radius + 1)
    patch = g[x0 - x + radius:x1 - x + radius, y0 - y + radius:y1 - y + radius]
    np.maximum(canvas[x0:x1, y0:y1], patch, out=canvas[x0:x1, y0:y1])


def gt_center_cell(box: Box3D, grid: BevGrid) -> tuple[int, int]:
    px, py = grid.to_cells(box.center[0], box.center[1])
    return int(math.floor(px)), int(math.floor(py))


def render_gt_heatmap(boxes: Iterable[Box3D], grid: BevGrid, K: int, min_radius: int = 2,
                      min_overlap: float = 0.7) -> np.ndarray:
    X, Y = grid.extents
    heat = np.zeros((X, Y, K))
    for b in boxes:
        if not grid.contains(b.center[0], b.center[1]):
            raise ValueError(f"ground-truth box at {b.center[:2]} is outside the grid")
        length = b.size[0] / grid.cell[0]
        width = b.size[1] / grid.cell[1]
        radius = max(min_radius, int(gaussian_radius(length, width, min_overlap)))
        canvas = heat[:, :, b.class_id]
        draw_gaussian(canvas, gt_center_cell(b, grid), radius)
    return heat


# peak selection -------------------------------------------------------------
def local_max_mask(values: np.ndarray) -> np.ndarray:
    """True where a cell is >= all of its (existing) 8-connected neighbours, per class."""
    X, Y, _ = values.shape
    padded = np.pad(values, ((1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    keep = np.ones(values.shape, dtype=bool)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            keep &= values >= padded[1 + dx:1 + dx + X, 1 + dy:1 + dy + Y]
    return keep


def select_peaks(heatmap, N: int, local_max_exempt: Iterable[int] = ()) -> list[QueryCandidate]:
    """Top-N (cell, class) candidates; ties go to the smaller flat index (ix*Y+iy)*K+k."""
    if N < 1:
        raise ValueError("N must be at least 1")
    values = heatmap.values.data if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    X, Y, K = values.shape
    eligible = local_max_mask(values)
    for k in local_max_exempt:
        eligible[:, :, k] = True
    flat = np.flatnonzero(eligible.reshape(-1))
    scores = values.reshape(-1)[flat]
    order = np.lexsort((flat, -scores))[:N]
    out = []
    for f in flat[order]:
        cell, k = divmod(int(f), K)
        ix, iy = divmod(cell, Y)
        out.append(QueryCandidate((ix, iy), k, float(values[ix, iy, k])))
    return out


def init_queries(cands: Sequence[QueryCandidate], F_L: Tensor, class_embed: Linear) -> QueryBatch:
    """Query feature = BEV feature at the candidate cell + projected one-hot category."""
    X, Y, d = F_L.shape
    K = class_embed.weight.shape[0]
    cells = np.array([c.cell[0] * Y + c.cell[1] for c in cands], dtype=np.int64)
    class_ids = np.array([c.class_id for c in cands], dtype=np.int64)
    one_hot = np.zeros((len(cands), K))
    one_hot[np.arange(len(cands)), class_ids] = 1.0
    feats = T.index_select(F_L.reshape(X * Y, d), cells) + class_embed(Tensor(one_hot))
    positions = np.array([[c.cell[0] + 0.5, c.cell[1] + 0.5] for c in cands]).reshape(-1, 2)
    heat = np.array([c.heat for c in cands])
    return QueryBatch(feats, positions, class_ids, heat)


# image-guided initialisation ----------------------------------------------------
def collapse_image_features(F_C_v: Tensor, mode: str = "mean") -> Tensor:
    """(H, W, d) -> (W, d) by pooling over image rows."""
    if mode == "mean":
        return T.mean(F_C_v, axis=0)
    if mode == "max":
        return T.tmax(F_C_v, axis=0)
    raise ValueError(f"unknown collapse mode {mode!r}")


def column_directions(calib: CameraCalib) -> np.ndarray:
    """Unit BEV direction (LiDAR frame) of the viewing ray through each feature column."""
    Hf, Wf = calib.feature_size
    s = calib.feature_stride
    u = (np.arange(Wf) + 0.5) * s
    Kinv = np.linalg.inv(calib.intrinsics)
    rays = np.stack([u, np.full(Wf, calib.intrinsics[1, 2]), np.ones(Wf)], axis=1) @ Kinv.T
    world = rays @ calib.extrinsic[:3, :3]  # R^T applied to each row
    xy = world[:, :2]
    return xy / np.linalg.norm(xy, axis=1, keepdims=True)


def cell_directions(calib: CameraCalib, grid: BevGrid) -> np.ndarray:
    """Unit BEV direction from the camera to every grid-cell centre, (X*Y, 2)."""
    X, Y = grid.extents
    ix, iy = np.meshgrid(np.arange(X) + 0.5, np.arange(Y) + 0.5, indexing="ij")
    wx = grid.x_range[0] + ix.reshape(-1) * grid.cell[0]
    wy = grid.y_range[0] + iy.reshape(-1) * grid.cell[1]
    c = calib.camera_center
    v = np.stack([wx - c[0], wy - c[1]], axis=1)
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.maximum(n, 1e-9)


class ImageGuidedHeatmap(Module):
    """Attend BEV cells to height-collapsed image columns, one attention layer per camera.

    Position encodings come from the same learned MLP applied to BEV ray
    directions: the camera-to-cell direction for queries and the column's
    viewing ray for keys, so geometrically aligned pairs encode alike.
    """

    def __init__(self, d: int, heads: int, num_cameras: int, num_classes: int,
                 rng: np.random.Generator, collapse: str = "mean"):
        self.attn = [MultiheadAttention(d, heads, rng) for _ in range(num_cameras)]
        self.pos = MLP(2, d, d, rng)
        self.head = HeatmapHead(d, num_classes, rng)
        self.collapse = collapse

    def fuse(self, F_L: Tensor, F_C: Sequence[Tensor], calibs: Sequence[CameraCalib],
             grid: BevGrid) -> Tensor:
        """The LiDAR-camera BEV map F_LC, (X, Y, d): per-camera outputs summed in camera order."""
        X, Y, d = F_L.shape
        bev = F_L.reshape(X * Y, d)
        total = None
        for v, (feat, calib) in enumerate(zip(F_C, calibs)):
            cols = collapse_image_features(feat, self.collapse)
            q = bev + self.pos(Tensor(cell_directions(calib, grid)))
            k = cols + self.pos(Tensor(column_directions(calib)))
            out = self.attn[v](q, k, cols)
            total = out if total is None else total + out
        return total.reshape(X, Y, d)

    def __call__(self, F_L: Tensor, F_C: Sequence[Tensor], calibs: Sequence[CameraCalib],
                 lidar_heatmap: Heatmap) -> Heatmap:
        if not F_C:
            return lidar_heatmap
        if len(F_C) != len(self.attn):
            raise T.ShapeError(f"model built for {len(self.attn)} cameras, got {len(F_C)}")
        fused = self.fuse(F_L, F_C, calibs, lidar_heatmap.grid)
        image_heat = self.head(fused, lidar_heatmap.grid)
        return Heatmap((lidar_heatmap.values + image_heat.values) * 0.5, lidar_heatmap.grid)


def image_guided_heatmap(F_L: Tensor, F_C: Sequence[Tensor], calibs: Sequence[CameraCalib],
                         module: ImageGuidedHeatmap, lidar_heatmap: Heatmap) -> Heatmap:
    return module(F_L, F_C, calibs, lidar_heatmap)
