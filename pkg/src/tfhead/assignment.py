"""Set-based label assignment: Hungarian matching on the weighted cost, and the greedy heuristic."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BevGrid, Box3D, rotated_bev_iou


class InfeasibleAssignment(ValueError):
    pass


@dataclass(frozen=True)
class MatchWeights:
    cls: float = 0.15
    reg: float = 0.25
    iou: float = 0.25

    def __post_init__(self):
        if min(self.cls, self.reg, self.iou) < 0:
            raise ValueError("matching weights must be non-negative")
        if self.cls == self.reg == self.iou == 0:
            raise ValueError("at least one matching weight must be positive")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (pred index, gt index), sorted by pred
    unmatched_preds: list[int] = field(default_factory=list)

    def total(self, cost: np.ndarray) -> float:
        return float(sum(cost[p, g] for p, g in sorted(self.pairs, key=lambda t: t[1])))


# cost -----------------------------------------------------------------------
def bev_iou_matrix(a: Sequence[Box3D], b: Sequence[Box3D]) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    if not len(a) or not len(b):
        return out
    ca = np.array([x.center[:2] for x in a])
    cb = np.array([x.center[:2] for x in b])
    ra = np.array([math.hypot(*x.size[:2]) / 2 for x in a])
    rb = np.array([math.hypot(*x.size[:2]) / 2 for x in b])
    dist = np.linalg.norm(ca[:, None] - cb[None], axis=-1)
    for i, j in zip(*np.nonzero(dist < ra[:, None] + rb[None])):
        out[i, j] = rotated_bev_iou(a[i], b[j])
    return out


def matching_cost(preds, gts: Sequence[Box3D], w: MatchWeights, grid: BevGrid) -> np.ndarray:
    """C[t, g] = w.cls*BCE(p_t[class g]) + w.reg*L1(normalised BEV centres) + w.iou*(1 - IoU)."""
    if len(preds) == 0 or len(gts) == 0:
        raise ValueError("matching cost needs at least one prediction and one ground truth")
    boxes = preds.boxes()
    probs = preds.class_probs()
    gcls = np.array([g.class_id for g in gts])
    bce = -np.log(np.clip(probs[:, gcls], 1e-12, 1.0))
    px, py = grid.normalize([b.center[0] for b in boxes], [b.center[1] for b in boxes])
    gx, gy = grid.normalize([g.center[0] for g in gts], [g.center[1] for g in gts])
    l1 = np.abs(px[:, None] - gx[None]) + np.abs(py[:, None] - gy[None])
    iou = bev_iou_matrix(boxes, gts)
    return w.cls * bce + w.reg * l1 + w.iou * (1.0 - iou)


# Hungarian ------------------------------------------------------------------
def _solve_rows(cost: np.ndarray):
    """Shortest augmenting paths for an n x m cost with n <= m (inf marks forbidden edges).

    Returns (row -> column, row potentials, column potentials).
    """
    n, m = cost.shape
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    padded = np.concatenate([np.full((n, 1), inf), cost], axis=1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = padded[i0 - 1] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            if not math.isfinite(delta):
                raise InfeasibleAssignment("no finite assignment covers every row")
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _optimum(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    if cost.shape[0] > cost.shape[1]:
        return math.inf
    try:
        rows, _, _ = _solve_rows(cost)
    except InfeasibleAssignment:
        return math.inf
    return float(cost[np.arange(len(rows)), rows].sum())


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of every ground truth (column) to a distinct prediction (row).

    Among equal-cost optima the lexicographically smallest (pred, gt) pair
    list is returned.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n_pred, n_gt = cost.shape
    if not np.isfinite(cost).all():
        raise ValueError("cost entries must be finite")
    if n_pred < n_gt:
        raise InfeasibleAssignment(f"{n_pred} predictions cannot cover {n_gt} ground truths")
    if n_gt == 0:
        return Assignment([], list(range(n_pred)))
    ct = cost.T  # rows: gts, columns: preds
    rows, u, v = _solve_rows(ct)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    reduced = ct - u[:, None] - v[None, :]
    if int((reduced <= tol).sum()) == n_gt:
        # only matched edges are tight, so this optimum is the unique one
        pairs = sorted((int(rows[g]), g) for g in range(n_gt))
    else:
        pairs = _lex_smallest(ct, float(ct[np.arange(n_gt), rows].sum()), tol)
    matched = {p for p, _ in pairs}
    return Assignment(pairs, [i for i in range(n_pred) if i not in matched])


def _lex_smallest(ct: np.ndarray, best: float, tol: float) -> list[tuple[int, int]]:
    n_gt, n_pred = ct.shape
    fixed: list[tuple[int, int]] = []
    fixed_cost = 0.0
    open_gts = list(range(n_gt))
    for p in range(n_pred):
        if not open_gts:
            break
        later = list(range(p + 1, n_pred))
        for g in open_gts:
            rest = [x for x in open_gts if x != g]
            sub = ct[np.ix_(rest, later)] if rest else np.zeros((0, len(later)))
            if abs(fixed_cost + ct[g, p] + _optimum(sub) - best) <= tol:
                fixed.append((p, g))
                fixed_cost += ct[g, p]
                open_gts = rest
                break
    return fixed


# heuristic --------------------------------------------------------------------
def heuristic_assign(preds: Sequence[Box3D], gts: Sequence[Box3D]) -> Assignment:
    """Each gt takes its nearest same-class prediction; a contested prediction keeps the closer gt."""
    claims: dict[int, tuple[float, int]] = {}
    for g, gt in enumerate(gts):
        best, best_d = None, math.inf
        for t, pr in enumerate(preds):
            if pr.class_id != gt.class_id:
                continue
            d = math.hypot(pr.center[0] - gt.center[0], pr.center[1] - gt.center[1])
            if d < best_d:
                best, best_d = t, d
        if best is None:
            continue
        if best not in claims or best_d < claims[best][0]:
            claims[best] = (best_d, g)
    pairs = sorted((t, g) for t, (_, g) in claims.items())
    matched = {t for t, _ in pairs}
    return Assignment(pairs, [t for t in range(len(preds)) if t not in matched])
