"""Two-stage training loop: SGD (or Adam) with global-norm clipping and float32-snapped weights."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .assignment import MatchWeights
from .losses import LossConfig, total_loss
from .model import Detector, SceneInputs, round_to_f32

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    iters: int = 500
    lr: float = 0.01
    seed: int = 0
    clip: float | None = 0.1
    optimizer: str = "sgd"  # "sgd" or "adam"
    camera_drop: float = 0.0  # per-camera drop probability during stage-2 training
    strategy: str = "hungarian"
    match: MatchWeights = field(default_factory=MatchWeights)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.lr < 0 or self.iters < 0:
            raise ValueError("lr and iters must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.camera_drop <= 1.0:
            raise ValueError("camera_drop must be a probability")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


class Optimizer:
    """SGD or Adam over a fixed named parameter set; state is kept float32-representable."""

    def __init__(self, params: dict[str, T.Tensor], kind: str, lr: float, clip: float | None,
                 state: dict[str, np.ndarray] | None = None, step: int = 0):
        self.params = params
        self.kind = kind
        self.lr = lr
        self.clip = clip
        self.step_count = step
        self.state = {k: v.copy() for k, v in (state or {}).items()}
        if kind == "adam":
            for n, p in params.items():
                self.state.setdefault(f"m.{n}", np.zeros_like(p.data))
                self.state.setdefault(f"v.{n}", np.zeros_like(p.data))

    def step(self) -> float:
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}
        with np.errstate(over="ignore", invalid="ignore"):
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not math.isfinite(norm):
            raise DivergenceError("non-finite gradient norm")
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.step_count += 1
        for n, p in self.params.items():
            g = grads[n] * scale
            if self.kind == "sgd":
                update = g
            else:
                b1, b2 = 0.9, 0.999
                m = _f32(b1 * self.state[f"m.{n}"] + (1 - b1) * g)
                v = _f32(b2 * self.state[f"v.{n}"] + (1 - b2) * g * g)
                self.state[f"m.{n}"], self.state[f"v.{n}"] = m, v
                mh = m / (1 - b1 ** self.step_count)
                vh = v / (1 - b2 ** self.step_count)
                update = mh / (np.sqrt(vh) + 1e-8)
            p.data = _f32(p.data - self.lr * update)
            p.grad = None
        return norm


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def iteration_rng(seed: int, it: int) -> np.random.Generator:
    return np.random.default_rng([seed, it])


def loss_on(model: Detector, inputs: SceneInputs, cfg: TrainConfig, rng: np.random.Generator | None = None,
            training: bool = True):
    """Forward + total loss for one scene under the stage's settings."""
    drop = ()
    if cfg.stage == 2 and cfg.camera_drop > 0 and rng is not None:
        mask = rng.random(len(inputs.calibs)) < cfg.camera_drop
        drop = tuple(int(v) for v in np.nonzero(mask)[0])
    res = model(inputs, drop_cameras=drop, fuse=cfg.stage == 2, rng=rng, training=training)
    if cfg.stage == 1:
        return total_loss(res.initial, None, inputs.gt_boxes, res.heatmap.values, inputs.gt_heatmap,
                          cfg.match, cfg.loss, cfg.strategy)
    # stage 2: the LiDAR-only parts are frozen; supervise the fused output (and the guided heatmap)
    hm = res.heatmap.values if model.cfg.guided else None
    return total_loss(None, res.final, inputs.gt_boxes, hm, inputs.gt_heatmap, cfg.match, cfg.loss,
                      cfg.strategy)


def prepare_stage(model: Detector, stage: int) -> dict[str, T.Tensor]:
    """Freeze everything but the stage's parameters and return those."""
    model.set_requires_grad(False)
    params = model.stage_parameters(stage)
    for p in params.values():
        p.requires_grad = True
    return params


def warm_start_fusion_ffn(model: Detector) -> None:
    """Initialise the fused-layer prediction FFN from the trained LiDAR-layer one."""
    model.head.pred1.load_state_dict(model.head.pred0.state_dict())


def train(model: Detector, scenes: Sequence[SceneInputs], cfg: TrainConfig, start_iter: int = 0,
          opt_state: dict | None = None, on_iter: Callable[[dict], None] | None = None):
    """Runs iterations [start_iter, cfg.iters); returns (loss rows, optimizer)."""
    if not scenes:
        raise ValueError("training needs at least one scene")
    params = prepare_stage(model, cfg.stage)
    opt = Optimizer(params, cfg.optimizer, cfg.lr, cfg.clip, opt_state, start_iter)
    rows = []
    for it in range(start_iter, cfg.iters):
        rng = iteration_rng(cfg.seed, it)
        inputs = scenes[it % len(scenes)]
        try:
            loss, parts = loss_on(model, inputs, cfg, rng)
            T.backward(loss)
        except T.NonFiniteError as e:
            raise DivergenceError(f"iteration {it}: {e}") from None
        if not math.isfinite(parts["total"]):
            raise DivergenceError(f"iteration {it}: non-finite loss {parts['total']}")
        parts["grad_norm"] = opt.step()
        row = {"stage": cfg.stage, "iter": it, "scene": it % len(scenes), **parts}
        rows.append(row)
        if on_iter:
            on_iter(row)
        if it % 100 == 0:
            log.debug("stage %d iter %d loss %.6f", cfg.stage, it, parts["total"])
    model.set_requires_grad(True)
    round_to_f32(model)
    return rows, opt
