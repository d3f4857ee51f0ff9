"""Backbones + head as one trainable detector, and per-scene input preparation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbones import ToyBackbones, patchify
from .decoder import HeadConfig, HeadResult, DetectionHead
from .geometry import Box3D, CameraCalib
from .nn import Module
from .query_init import render_gt_heatmap
from .scenes import BEV_CHANNELS, Scene, rasterize_bev
from .tensor import Tensor

# parameter-name prefixes trained in each stage of the two-stage schedule
STAGE1_PREFIXES = ("backbones.lidar_", "head.heatmap.", "head.class_embed.", "head.query_pos.",
                   "head.bev_pos.", "head.decoder.", "head.pred0.")
STAGE2_PREFIXES = ("head.fusion.", "head.pred1.", "head.img_guided.")


@dataclass
class SceneInputs:
    """Everything the network reads from a scene, precomputed once."""

    lidar_patches: np.ndarray
    image_patches: list[np.ndarray]
    calibs: list[CameraCalib]
    gt_boxes: list[Box3D]
    gt_heatmap: np.ndarray


class Detector(Module):
    def __init__(self, cfg: HeadConfig, raster_stride: int = 8, image_stride: int = 8,
                 image_channels: int = 3):
        rng = np.random.default_rng(cfg.seed + 7919)
        self.cfg = cfg
        self.raster_stride = raster_stride
        self.image_stride = image_stride
        self.image_channels = image_channels
        self.backbones = ToyBackbones(cfg.hidden, BEV_CHANNELS, image_channels, raster_stride, rng,
                                      image_stride)
        self.head = DetectionHead(cfg)
        round_to_f32(self)

    def prepare(self, scene: Scene) -> SceneInputs:
        raster = rasterize_bev(scene.points, scene.spec.grid.scaled(self.raster_stride))
        return SceneInputs(
            patchify(raster, self.raster_stride),
            [patchify(img, self.image_stride) for img in scene.images],
            list(scene.calibs),
            list(scene.gt_boxes),
            render_gt_heatmap(scene.gt_boxes, self.cfg.grid, self.cfg.num_classes),
        )

    def features(self, inputs: SceneInputs, drop_cameras: Sequence[int] = ()) -> tuple[Tensor, list[Tensor]]:
        F_L = self.backbones.lidar(inputs.lidar_patches)
        F_C = []
        for v, patches in enumerate(inputs.image_patches):
            if v in drop_cameras:
                Hf, Wf = patches.shape[:2]
                F_C.append(Tensor(np.zeros((Hf, Wf, self.cfg.hidden))))
            else:
                F_C.append(self.backbones.image(patches))
        return F_L, F_C

    def __call__(self, inputs: SceneInputs, calibs: Sequence[CameraCalib] | None = None,
                 drop_cameras: Sequence[int] = (), num_queries: int | None = None, fuse: bool = True,
                 guided: bool | None = None, rng=None, training: bool = False,
                 keep_attention: bool = False) -> HeadResult:
        F_L, F_C = self.features(inputs, drop_cameras)
        calibs = inputs.calibs if calibs is None else list(calibs)
        return self.head(F_L, F_C, calibs, num_queries=num_queries, fuse=fuse, guided=guided,
                         rng=rng, training=training, keep_attention=keep_attention)

    def stage_parameters(self, stage: int) -> dict[str, Tensor]:
        prefixes = STAGE1_PREFIXES if stage == 1 else STAGE2_PREFIXES
        return {n: p for n, p in self.named_parameters() if n.startswith(prefixes)}

    def to_config(self) -> dict:
        return {"head": self.cfg.to_dict(), "raster_stride": self.raster_stride,
                "image_stride": self.image_stride, "image_channels": self.image_channels}

    @classmethod
    def from_config(cls, d: dict) -> "Detector":
        return cls(HeadConfig.from_dict(d["head"]), d["raster_stride"], d["image_stride"],
                   d["image_channels"])


def round_to_f32(module: Module) -> None:
    """Snap parameters to float32-representable values so checkpoints reload bit-exactly."""
    for p in module.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)


def toy_config(**overrides) -> HeadConfig:
    """Desk-scale head: small hidden size, 32x32 BEV grid, 4 cameras."""
    from .geometry import BevGrid

    base = dict(num_classes=3, hidden=32, heads=4, ffn_hidden=64, num_queries=20, sigma=1.0,
                num_cameras=4, grid=BevGrid.square(16.0, 1.0))
    base.update(overrides)
    return HeadConfig(**base)
