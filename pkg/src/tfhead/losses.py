"""Classification focal loss, box L1, penalty-reduced heatmap focal loss, and their combination."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .assignment import Assignment, MatchWeights, heuristic_assign, hungarian, matching_cost
from .geometry import Box3D, encode_box
from .tensor import Tensor

CLAMP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    alpha: float = 0.25
    heatmap_alpha: float = 2.0
    heatmap_beta: float = 4.0
    w_heatmap: float = 1.0
    w_cls: float = 1.0
    w_reg: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("focal gamma must be non-negative")


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25,
                       gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss over every logit."""
    t = np.asarray(targets, dtype=float)
    p = T.sigmoid(logits)
    log_p = T.log_sigmoid(logits)
    log_not_p = T.log_sigmoid(-logits)
    pos = (1.0 - p) ** gamma * log_p * Tensor(alpha * t)
    neg = p ** gamma * log_not_p * Tensor((1.0 - alpha) * (1.0 - t))
    return -T.tsum(pos + neg)


def heatmap_loss(pred: Tensor, target: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Penalty-reduced pixel focal loss, normalised by the number of peaks (at least 1)."""
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise T.ShapeError(f"heatmap {pred.shape} vs target {target.shape}")
    if (pred.data < 0).any() or (pred.data > 1).any() or (target < 0).any() or (target > 1).any():
        raise ValueError("heatmap values must lie in [0, 1]")
    p = T.clip(pred, CLAMP, 1.0 - CLAMP)
    peaks = target == 1.0
    a, b = cfg.heatmap_alpha, cfg.heatmap_beta
    pos = (1.0 - p) ** a * T.log(p) * Tensor(peaks.astype(float))
    neg = p ** a * T.log(1.0 - p) * Tensor(np.where(peaks, 0.0, (1.0 - target) ** b))
    return -T.tsum(pos + neg) / float(max(1, int(peaks.sum())))


def regression_targets(preds, gts: Sequence[Box3D], assignment: Assignment) -> np.ndarray:
    return np.array([encode_box(gts[g], preds.positions[t], preds.grid) for t, g in assignment.pairs])


def detection_loss(preds, gts: Sequence[Box3D], assignment: Assignment,
                   cfg: LossConfig = LossConfig()) -> tuple[Tensor, dict[str, float]]:
    """Focal classification over all preds x K plus L1 box regression on matched pairs."""
    n, K = preds.cls_logits.shape
    targets = np.zeros((n, K))
    for t, g in assignment.pairs:
        targets[t, gts[g].class_id] = 1.0
    norm = float(max(1, len(assignment.pairs)))
    cls = sigmoid_focal_loss(preds.cls_logits, targets, cfg.alpha, cfg.gamma) / norm
    if assignment.pairs:
        idx = [t for t, _ in assignment.pairs]
        diff = T.index_select(preds.attrs, idx) - Tensor(regression_targets(preds, gts, assignment))
        reg = T.tsum(T.tabs(diff)) / norm
    else:
        reg = Tensor(0.0)
    total = cls * cfg.w_cls + reg * cfg.w_reg
    return total, {"cls": cls.item(), "reg": reg.item()}


def assign(preds, gts: Sequence[Box3D], weights: MatchWeights, strategy: str = "hungarian") -> Assignment:
    if not gts:
        return Assignment([], list(range(len(preds))))
    if strategy == "heuristic":
        return heuristic_assign(preds.boxes(), gts)
    if strategy != "hungarian":
        raise ValueError(f"unknown assignment strategy {strategy!r}")
    return hungarian(matching_cost(preds, gts, weights, preds.grid))


def total_loss(initial, final, gts: Sequence[Box3D], heatmap: Tensor | None, gt_heatmap: np.ndarray | None,
               weights: MatchWeights = MatchWeights(), cfg: LossConfig = LossConfig(),
               strategy: str = "hungarian") -> tuple[Tensor, dict[str, float]]:
    """Heatmap loss plus an independently assigned detection loss per decoder layer."""
    parts: dict[str, float] = {}
    total = Tensor(0.0)
    if heatmap is not None and cfg.w_heatmap:
        hm = heatmap_loss(heatmap, gt_heatmap, cfg)
        parts["heatmap"] = hm.item()
        total = total + hm * cfg.w_heatmap
    for name, preds in (("initial", initial), ("final", final)):
        if preds is None:
            continue
        det, comp = detection_loss(preds, gts, assign(preds, gts, weights, strategy), cfg)
        parts[f"{name}_cls"] = comp["cls"]
        parts[f"{name}_reg"] = comp["reg"]
        total = total + det
    parts["total"] = total.item()
    return total, parts
