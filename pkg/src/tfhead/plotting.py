"""Report figures: training loss curves, robustness sweeps, per-class AP bars."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "svg.hashsalt": "tfh",
}


def _save(fig, path) -> Path:
    path = Path(path)
    # no Software/date chunks, so identical data gives identical bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(rows: Sequence[dict], path, components: Sequence[str] | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        its = [r["iter"] for r in rows]
        keys = components or [k for k in rows[0] if k not in ("stage", "iter", "scene", "grad_norm")] if rows else []
        for k in keys:
            vals = [r.get(k, float("nan")) for r in rows]
            ax.plot(its, vals, label=k, lw=1.6 if k == "total" else 0.9)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        if keys:
            ax.legend(loc="upper right", fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def plot_robust_sweep(levels: Sequence[float], initial: Sequence[float], final: Sequence[float],
                      mode: str, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(levels, initial, "o--", label="initial (LiDAR only)")
        ax.plot(levels, final, "s-", label="final (fused)")
        ax.set_xlabel("dropped cameras" if mode == "drop" else "calibration offset (m)")
        ax.set_ylabel("mAP")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="lower left")
        fig.tight_layout()
        return _save(fig, path)


def plot_ap(per_set: dict[str, dict[int, dict[float, float]]], path) -> Path:
    """Grouped bars of per-class AP (averaged over thresholds) for each prediction set."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(per_set)
        classes = sorted({k for ap in per_set.values() for k in ap})
        width = 0.8 / max(1, len(names))
        for j, name in enumerate(names):
            ap = per_set[name]
            vals = [sum(ap[k].values()) / len(ap[k]) if k in ap else 0.0 for k in classes]
            ax.bar([c + j * width for c in range(len(classes))], vals, width, label=name)
        ax.set_xticks([c + 0.4 - width / 2 for c in range(len(classes))])
        ax.set_xticklabels([f"class {k}" for k in classes])
        ax.set_ylabel("AP (mean over thresholds)")
        ax.set_ylim(0, 1.05)
        if names:
            ax.legend(loc="lower right", fontsize=7)
        fig.tight_layout()
        return _save(fig, path)
