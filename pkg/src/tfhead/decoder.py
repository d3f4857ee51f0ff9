"""Two-layer transformer detection head: LiDAR decoding, then SMCA image fusion."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import (ATTR_DIM, BevGrid, Box3D, CameraCalib, decode_box, locate_fov,
                       project_box)
from .nn import MLP, LayerNorm, Linear, Module, MultiheadAttention
from .query_init import (Heatmap, HeatmapHead, ImageGuidedHeatmap, QueryBatch, QueryCandidate,
                         init_queries, select_peaks)
from .tensor import Tensor

# (name, width) of the regression heads, in attribute-vector order
REG_HEADS = (("center", 2), ("height", 1), ("dim", 3), ("rot", 2), ("vel", 2))


@dataclass
class HeadConfig:
    num_classes: int = 3
    hidden: int = 256
    heads: int = 8
    ffn_hidden: int = 256
    num_queries: int = 200
    sigma: float = 1.0
    num_cameras: int = 4
    dropout: float = 0.0
    mask_mode: str = "mul"  # "mul": post-softmax product, "add": log-mask on the logits
    collapse: str = "mean"
    fusion_self_attn: bool = True
    guided: bool = False
    local_max_exempt: tuple[int, ...] = ()
    grid: BevGrid = field(default_factory=BevGrid)
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        self.local_max_exempt = tuple(self.local_max_exempt)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["local_max_exempt"] = list(self.local_max_exempt)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        d = dict(d)
        d["grid"] = BevGrid.from_dict(d["grid"])
        return cls(**d)


@dataclass
class Prediction:
    box: Box3D
    class_probs: np.ndarray
    heat: float
    query_index: int = -1


@dataclass
class PredictionSet:
    """Raw FFN outputs for N queries; attrs/logits stay differentiable."""

    attrs: Tensor  # (N, 10)
    cls_logits: Tensor  # (N, K)
    positions: np.ndarray  # (N, 2) query cells
    heat: np.ndarray  # (N,)
    grid: BevGrid

    def __len__(self) -> int:
        return len(self.heat)

    def class_probs(self) -> np.ndarray:
        return T._sigmoid(self.cls_logits.data)

    def boxes(self) -> list[Box3D]:
        probs = self.class_probs()
        out = []
        for i in range(len(self)):
            k = int(np.argmax(probs[i]))
            out.append(decode_box(self.positions[i], self.attrs.data[i], self.grid, k, float(probs[i, k])))
        return out

    def predictions(self) -> list[Prediction]:
        probs = self.class_probs()
        return [Prediction(b, probs[i], float(self.heat[i]), i) for i, b in enumerate(self.boxes())]


class PositionEncoder(MLP):
    """Learned 2 -> d position embedding (Linear, ReLU, Linear)."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__(2, d, d, rng)


def pos_encode(positions, encoder: PositionEncoder) -> Tensor:
    return encoder(Tensor(np.asarray(positions, dtype=float).reshape(-1, 2)))


class DecoderLayer(Module):
    """Post-norm decoder layer: self-attention, cross-attention, feed-forward."""

    def __init__(self, d: int, heads: int, ffn_hidden: int, rng: np.random.Generator,
                 self_attn: bool = True, dropout: float = 0.0):
        self.self_attn = MultiheadAttention(d, heads, rng) if self_attn else None
        self.cross_attn = MultiheadAttention(d, heads, rng)
        self.ffn = MLP(d, ffn_hidden, d, rng)
        self.norm1 = LayerNorm(d) if self_attn else None
        self.norm2 = LayerNorm(d)
        self.norm3 = LayerNorm(d)
        self.dropout = dropout

    def __call__(self, query: Tensor, memory: Tensor, query_pos: Tensor, memory_pos: Tensor,
                 cross_query_pos: Tensor | None = None, spatial_weight: np.ndarray | None = None,
                 mask_mode: str = "mul", rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
        if query.shape[-1] != memory.shape[-1]:
            raise T.ShapeError(f"query width {query.shape[-1]} != memory width {memory.shape[-1]}")
        drop = lambda x: T.dropout(x, self.dropout, rng, training)  # noqa: E731
        if self.self_attn is not None:
            q = query + query_pos
            query = self.norm1(query + drop(self.self_attn(q, q, q)))
        q = query + (query_pos if cross_query_pos is None else cross_query_pos)
        kv = memory + memory_pos
        query = self.norm2(query + drop(self.cross_attn(q, kv, kv, spatial_weight, mask_mode)))
        return self.norm3(query + drop(self.ffn(query)))


def decoder_layer(queries: Tensor, memory: Tensor, query_pos: Tensor, memory_pos: Tensor,
                  layer: DecoderLayer, spatial_weight: np.ndarray | None = None) -> Tensor:
    return layer(queries, memory, query_pos, memory_pos, spatial_weight=spatial_weight)


class PredictionFFN(Module):
    """One two-layer head per attribute group plus the class logits."""

    def __init__(self, d: int, hidden: int, num_classes: int, rng: np.random.Generator,
                 prior: float = 0.1):
        self.center = MLP(d, hidden, 2, rng)
        self.height = MLP(d, hidden, 1, rng)
        self.dim = MLP(d, hidden, 3, rng)
        self.rot = MLP(d, hidden, 2, rng)
        self.vel = MLP(d, hidden, 2, rng)
        self.cls = MLP(d, hidden, num_classes, rng)
        self.cls.fc2.bias.data[:] = -math.log((1 - prior) / prior)

    def __call__(self, queries: Tensor) -> tuple[Tensor, Tensor]:
        attrs = T.concat([getattr(self, name)(queries) for name, _ in REG_HEADS], axis=1)
        return attrs, self.cls(queries)


def prediction_ffn(queries: QueryBatch | Tensor, ffn: PredictionFFN, positions, heat,
                   grid: BevGrid) -> list[Prediction]:
    feats = queries.features if isinstance(queries, QueryBatch) else queries
    attrs, logits = ffn(feats)
    return PredictionSet(attrs, logits, np.asarray(positions), np.asarray(heat), grid).predictions()


# spatially modulated cross attention -------------------------------------------
def gaussian_mask(cx: float, cy: float, r: float, feature_extent: tuple[int, int],
                  sigma: float) -> np.ndarray:
    """exp(-((i - cx)^2 + (j - cy)^2) / (sigma r^2)); i indexes columns, j rows."""
    Hf, Wf = feature_extent
    cols = np.arange(Wf, dtype=float)[None, :]
    rows = np.arange(Hf, dtype=float)[:, None]
    r2 = max(r, 1e-6) ** 2
    m = np.exp(-((cols - cx) ** 2 + (rows - cy) ** 2) / (sigma * r2))
    # far cells underflow; keep the mask strictly positive
    return np.maximum(m, np.finfo(float).tiny)


def smca_mask(calib: CameraCalib, predicted: Box3D, feature_extent: tuple[int, int],
              sigma: float) -> np.ndarray:
    proj = project_box(calib, predicted)
    return gaussian_mask(proj.cx, proj.cy, proj.r, feature_extent, sigma)


def image_grid_positions(feature_extent: tuple[int, int]) -> np.ndarray:
    """Normalised (column, row) of every feature cell, row-major, matching mask indices."""
    Hf, Wf = feature_extent
    rows, cols = np.meshgrid(np.arange(Hf), np.arange(Wf), indexing="ij")
    return np.stack([cols.reshape(-1) / Wf, rows.reshape(-1) / Hf], axis=1)


@dataclass
class FusionResult:
    queries: Tensor  # (N, d) after fusion; bypassed rows are the input rows
    camera: np.ndarray  # (N,) camera index or -1
    masks: dict[int, np.ndarray]  # query index -> (Hf, Wf) mask
    attention: dict[int, np.ndarray] = field(default_factory=dict)


class FusionLayer(Module):
    def __init__(self, d: int, heads: int, ffn_hidden: int, rng: np.random.Generator,
                 self_attn: bool = True, dropout: float = 0.0):
        self.layer = DecoderLayer(d, heads, ffn_hidden, rng, self_attn, dropout)
        self.query_pos = PositionEncoder(d, rng)
        self.image_pos = PositionEncoder(d, rng)

    def __call__(self, queries: Tensor, positions: np.ndarray, initial_boxes: Sequence[Box3D],
                 F_C: Sequence[Tensor], calibs: Sequence[CameraCalib], grid: BevGrid,
                 sigma: float, mask_mode: str = "mul", rng=None, training: bool = False,
                 keep_attention: bool = False) -> FusionResult:
        n = queries.shape[0]
        cameras = np.full(n, -1, dtype=np.int64)
        projections = {}
        for i, box in enumerate(initial_boxes):
            cam = locate_fov(calibs, box) if calibs else None
            if cam is not None:
                cameras[i] = cam
                projections[i] = project_box(calibs[cam], box)
        pieces, order, masks, attention = [], [], {}, {}
        X, Y = grid.extents
        norm_pos = positions / np.array([X, Y], dtype=float)
        for cam in range(len(calibs)):
            idx = np.flatnonzero(cameras == cam)
            if len(idx) == 0:
                continue
            Hf, Wf = F_C[cam].shape[:2]
            group_masks = []
            cross_pos = []
            for i in idx:
                p = projections[i]
                m = gaussian_mask(p.cx, p.cy, p.r, (Hf, Wf), sigma)
                masks[int(i)] = m
                group_masks.append(m.reshape(-1))
                cross_pos.append((p.cx / Wf, p.cy / Hf))
            memory = F_C[cam].reshape(Hf * Wf, F_C[cam].shape[-1])
            q = T.index_select(queries, idx)
            qpos = self.query_pos(Tensor(norm_pos[idx]))
            cpos = self.image_pos(Tensor(np.array(cross_pos)))
            mpos = self.image_pos(Tensor(image_grid_positions((Hf, Wf))))
            out = self.layer(q, memory, qpos, mpos, cpos, np.stack(group_masks), mask_mode, rng, training)
            if keep_attention:
                kv = memory + mpos
                _, attn = self.layer.cross_attn(q + cpos, kv, kv, np.stack(group_masks), mask_mode,
                                                return_attention=True)
                for row, i in enumerate(idx):
                    attention[int(i)] = attn.data[:, row, :].mean(axis=0).reshape(Hf, Wf)
            pieces.append(out)
            order.extend(idx.tolist())
        if not pieces:
            return FusionResult(queries, cameras, masks, attention)
        bypass = np.flatnonzero(cameras < 0)
        if len(bypass):
            pieces.append(T.index_select(queries, bypass))
            order.extend(bypass.tolist())
        inverse = np.argsort(np.array(order))
        fused = T.index_select(T.concat(pieces, axis=0), inverse)
        return FusionResult(fused, cameras, masks, attention)


@dataclass
class HeadResult:
    heatmap: Heatmap  # the map queries were selected from
    lidar_heatmap: Heatmap
    candidates: list[QueryCandidate]
    queries: QueryBatch
    initial: PredictionSet
    final: PredictionSet | None
    fusion: FusionResult | None

    def __iter__(self):
        return iter((self.initial, self.final))


class DetectionHead(Module):
    def __init__(self, cfg: HeadConfig):
        rng = np.random.default_rng(cfg.seed)
        d, K = cfg.hidden, cfg.num_classes
        self.cfg = cfg
        self.heatmap = HeatmapHead(d, K, rng)
        self.class_embed = Linear(K, d, rng, bias=False)
        self.query_pos = PositionEncoder(d, rng)
        self.bev_pos = PositionEncoder(d, rng)
        self.decoder = DecoderLayer(d, cfg.heads, cfg.ffn_hidden, rng, True, cfg.dropout)
        self.pred0 = PredictionFFN(d, cfg.ffn_hidden, K, rng)
        self.fusion = FusionLayer(d, cfg.heads, cfg.ffn_hidden, rng, cfg.fusion_self_attn, cfg.dropout)
        self.pred1 = PredictionFFN(d, cfg.ffn_hidden, K, rng)
        self.img_guided = ImageGuidedHeatmap(d, cfg.heads, cfg.num_cameras, K, rng, cfg.collapse)

    def __call__(self, F_L: Tensor, F_C: Sequence[Tensor], calibs: Sequence[CameraCalib],
                 num_queries: int | None = None, fuse: bool = True, guided: bool | None = None,
                 rng: np.random.Generator | None = None, training: bool = False,
                 keep_attention: bool = False) -> HeadResult:
        cfg = self.cfg
        grid = cfg.grid
        guided = cfg.guided if guided is None else guided
        X, Y, d = F_L.shape
        if (X, Y) != grid.extents:
            raise T.ShapeError(f"BEV features {F_L.shape} do not match grid {grid.extents}")
        lidar_heat = self.heatmap(F_L, grid)
        heat = lidar_heat
        if guided and F_C:
            heat = self.img_guided(F_L, F_C, calibs, lidar_heat)
        n = num_queries or cfg.num_queries
        cands = select_peaks(heat, n, cfg.local_max_exempt)
        queries = init_queries(cands, F_L, self.class_embed)

        qpos = self.query_pos(Tensor(queries.positions / np.array([X, Y], dtype=float)))
        ix, iy = np.meshgrid(np.arange(X) + 0.5, np.arange(Y) + 0.5, indexing="ij")
        cell_pos = np.stack([ix.reshape(-1) / X, iy.reshape(-1) / Y], axis=1)
        memory = F_L.reshape(X * Y, d)
        q1 = self.decoder(queries.features, memory, qpos, self.bev_pos(Tensor(cell_pos)),
                          rng=rng, training=training)
        attrs0, logits0 = self.pred0(q1)
        initial = PredictionSet(attrs0, logits0, queries.positions, queries.heat, grid)
        if not fuse:
            return HeadResult(heat, lidar_heat, cands, queries, initial, None, None)

        fusion = self.fusion(q1, queries.positions, initial.boxes(), F_C, calibs, grid, cfg.sigma,
                             cfg.mask_mode, rng, training, keep_attention)
        in_fov = (fusion.camera >= 0)[:, None]
        attrs1, logits1 = self.pred1(fusion.queries)
        final = PredictionSet(T.where(in_fov, attrs1, attrs0), T.where(in_fov, logits1, logits0),
                              queries.positions, queries.heat, grid)
        return HeadResult(heat, lidar_heat, cands, queries, initial, final, fusion)


def head_forward(F_L: Tensor, F_C: Sequence[Tensor], calibs: Sequence[CameraCalib],
                 head: DetectionHead, N: int | None = None):
    result = head(F_L, F_C, calibs, num_queries=N)
    return result.initial.predictions(), result.final.predictions()


assert sum(w for _, w in REG_HEADS) == ATTR_DIM
