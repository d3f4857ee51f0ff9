"""NMS-free scoring, centre-distance mAP, TP error metrics, and the degradation protocols."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box3D, CameraCalib, aligned_iou_3d, normalize_yaw

TP_METRICS = ("trans", "scale", "orient", "vel")


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    num_classes: int = 3
    score_floor: float = 0.0
    tp_threshold: float = 2.0

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if not th or th[0] <= 0 or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be positive and strictly increasing")
        object.__setattr__(self, "thresholds", th)


@dataclass
class EvalReport:
    ap: dict[int, dict[float, float]]  # class -> threshold -> AP
    mAP: float
    errors: dict[str, float]
    nds: float
    num_preds: int = 0
    num_gts: int = 0

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "nds": self.nds,
            "errors": dict(self.errors),
            "ap": {str(k): {f"{t:g}": v for t, v in row.items()} for k, row in sorted(self.ap.items())},
            "num_preds": self.num_preds,
            "num_gts": self.num_gts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def ap_at(self, threshold: float) -> float:
        """Class-mean AP at a single distance threshold."""
        vals = [row[threshold] for row in self.ap.values()]
        return float(np.mean(vals)) if vals else 0.0


# scoring --------------------------------------------------------------------
def final_scores(preds) -> list[Box3D]:
    """score = sqrt(heat * max class prob), class = argmax; nothing is suppressed."""
    out = []
    for p in preds:
        probs = np.asarray(p.class_probs)
        k = int(np.argmax(probs))
        out.append(p.box.with_score(math.sqrt(float(p.heat) * float(probs[k])), k))
    return out


def circular_nms(boxes: Sequence[Box3D], radius) -> list[Box3D]:
    """Greedy score-descending suppression of same-class boxes within a BEV centre radius.

    ``radius`` is a float or a {class: radius} mapping. Equal scores keep the earlier box.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[int] = []
    for i in order:
        b = boxes[i]
        r = radius.get(b.class_id, 0.0) if isinstance(radius, dict) else float(radius)
        if any(boxes[j].class_id == b.class_id and _bev_dist(boxes[j], b) <= r for j in kept):
            continue
        kept.append(i)
    return [boxes[i] for i in sorted(kept)]


def _bev_dist(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


# matching + AP ----------------------------------------------------------------
def _match_class(scenes, cls: int, threshold: float):
    """Pool score-sorted same-class predictions over scenes and greedily match them.

    Returns (tp flags in score order, matched (pred, gt) boxes, number of gts).
    """
    entries = []
    n_gt = 0
    for s, (preds, gts) in enumerate(scenes):
        n_gt += sum(g.class_id == cls for g in gts)
        entries.extend((-p.score, s, i) for i, p in enumerate(preds) if p.class_id == cls)
    entries.sort()
    taken = [set() for _ in scenes]
    tps, pairs = [], []
    for _, s, i in entries:
        p = scenes[s][0][i]
        best, best_d = None, math.inf
        for g, gt in enumerate(scenes[s][1]):
            if gt.class_id != cls or g in taken[s]:
                continue
            d = _bev_dist(p, gt)
            if d <= threshold and d < best_d:
                best, best_d = g, d
        if best is None:
            tps.append(False)
        else:
            taken[s].add(best)
            tps.append(True)
            pairs.append((p, scenes[s][1][best]))
    return np.array(tps, dtype=bool), pairs, n_gt


def interpolated_ap(tps: np.ndarray, n_gt: int, points: int = 101) -> float:
    """Mean over recall levels r in linspace(0, 1, points) of max precision at recall >= r."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truths")
    if len(tps) == 0:
        return 0.0
    tp = np.cumsum(tps)
    precision = tp / np.arange(1, len(tps) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.arange(points) / (points - 1)
    # tolerance so recall 7/10 reaches level 0.70 despite rounding
    idx = np.searchsorted(recall, levels - 1e-12, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def average_precision(preds: Sequence[Box3D], gts: Sequence[Box3D], cls: int, threshold: float) -> float:
    tps, _, n_gt = _match_class([(list(preds), list(gts))], cls, threshold)
    return interpolated_ap(tps, n_gt)


def _tp_errors(pairs) -> dict[str, float]:
    if not pairs:
        return {m: 1.0 for m in TP_METRICS}
    trans = [_bev_dist(p, g) for p, g in pairs]
    scale = [1.0 - aligned_iou_3d(p.size, g.size) for p, g in pairs]
    orient = [abs(normalize_yaw(p.yaw - g.yaw)) for p, g in pairs]
    vel = [float(np.linalg.norm(np.subtract(p.velocity, g.velocity))) for p, g in pairs]
    return {"trans": float(np.mean(trans)), "scale": float(np.mean(scale)),
            "orient": float(np.mean(orient)), "vel": float(np.mean(vel))}


def evaluate_scenes(scenes: Sequence[tuple[Sequence[Box3D], Sequence[Box3D]]],
                    cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """``scenes`` holds (scored predictions, ground truths) pairs; matching never crosses scenes."""
    scenes = [([p for p in preds if p.score >= cfg.score_floor], list(gts)) for preds, gts in scenes]
    ap: dict[int, dict[float, float]] = {}
    per_class_err: list[dict[str, float]] = []
    for k in range(cfg.num_classes):
        row = {}
        for t in cfg.thresholds:
            tps, pairs, n_gt = _match_class(scenes, k, t)
            if n_gt == 0:
                break
            row[t] = interpolated_ap(tps, n_gt)
        if not row:
            continue
        ap[k] = row
        _, pairs, _ = _match_class(scenes, k, cfg.tp_threshold)
        per_class_err.append(_tp_errors(pairs))
    mAP = float(np.mean([v for row in ap.values() for v in row.values()])) if ap else 0.0
    if per_class_err:
        errors = {m: float(np.mean([e[m] for e in per_class_err])) for m in TP_METRICS}
    else:
        errors = {m: 1.0 for m in TP_METRICS}
    nds = (5.0 * mAP + sum(1.0 - min(1.0, errors[m]) for m in TP_METRICS)) / (5.0 + len(TP_METRICS))
    return EvalReport(ap, mAP, errors, nds, sum(len(p) for p, _ in scenes), sum(len(g) for _, g in scenes))


def evaluate(preds: Sequence[Box3D], gts: Sequence[Box3D], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    return evaluate_scenes([(preds, gts)], cfg)


def classification_accuracy(boxes: Sequence[Box3D], gts: Sequence[Box3D], max_dist: float = 2.0) -> float:
    """Fraction of gts whose highest-scoring prediction within ``max_dist`` carries the gt class.

    ``boxes`` are scored predictions (see final_scores); a gt with no prediction in
    range counts as misclassified.
    """
    if not gts:
        return float("nan")
    correct = 0
    for g in gts:
        near = [b for b in boxes if _bev_dist(b, g) <= max_dist]
        if near and max(near, key=lambda b: b.score).class_id == g.class_id:
            correct += 1
    return correct / len(gts)


# inference + degradation protocols ------------------------------------------
@dataclass
class SceneRun:
    initial: list[Box3D]
    final: list[Box3D]
    gts: list[Box3D]
    candidates: list = field(default_factory=list)


def infer(model, inputs, num_queries: int | None = None, drop_cameras=(), calibs=None,
          guided: bool | None = None) -> SceneRun:
    res = model(inputs, calibs=calibs, drop_cameras=drop_cameras, num_queries=num_queries,
                guided=guided)
    return SceneRun(final_scores(res.initial.predictions()), final_scores(res.final.predictions()),
                    list(inputs.gt_boxes), res.candidates)


def report_pair(runs: Sequence[SceneRun], cfg: EvalConfig = EvalConfig(), nms_radius=None):
    post = (lambda b: circular_nms(b, nms_radius)) if nms_radius is not None else (lambda b: b)
    initial = evaluate_scenes([(post(r.initial), r.gts) for r in runs], cfg)
    final = evaluate_scenes([(post(r.final), r.gts) for r in runs], cfg)
    return initial, final


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def robustness_drop_images(model, scenes, k: int, seed: int, cfg: EvalConfig = EvalConfig(),
                           num_queries: int | None = None):
    """Zero the features of k randomly chosen cameras per scene, then evaluate both sets."""
    runs = []
    for i, inputs in enumerate(scenes):
        V = len(inputs.calibs)
        if not 0 <= k <= V:
            raise ValueError(f"cannot drop {k} of {V} cameras")
        drop = sorted(int(v) for v in _scene_rng(seed, i).choice(V, size=k, replace=False))
        runs.append(infer(model, inputs, num_queries, drop_cameras=drop))
    return report_pair(runs, cfg)


def offset_calibs(calibs: Sequence[CameraCalib], offset_m: float, rng: np.random.Generator) -> list[CameraCalib]:
    """Shift each camera's position (camera-to-LiDAR translation) by a random direction of norm offset_m."""
    if offset_m < 0:
        raise ValueError("offset must be non-negative")
    out = []
    for c in calibs:
        d = rng.normal(size=3)
        d = d / np.linalg.norm(d) * offset_m
        # moving the camera centre by d changes the LiDAR->camera translation by -R d
        out.append(c.with_translation_offset(-c.extrinsic[:3, :3] @ d) if offset_m else c)
    return out


def robustness_calib_offset(model, scenes, offset_m: float, seed: int, cfg: EvalConfig = EvalConfig(),
                            num_queries: int | None = None):
    runs = []
    for i, inputs in enumerate(scenes):
        calibs = offset_calibs(inputs.calibs, offset_m, _scene_rng(seed, i))
        runs.append(infer(model, inputs, num_queries, calibs=calibs))
    return report_pair(runs, cfg)
