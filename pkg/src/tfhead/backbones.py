"""Toy stand-ins for the 3D and 2D backbones: strided patch-linear stacks."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor


def patchify(raster: np.ndarray, stride: int) -> np.ndarray:
    """(H*s, W*s, C) -> (H, W, s*s*C): each output cell holds its s x s input patch."""
    Hs, Ws, C = raster.shape
    if Hs % stride or Ws % stride:
        raise ValueError(f"raster {raster.shape[:2]} not divisible by stride {stride}")
    H, W = Hs // stride, Ws // stride
    return (raster.reshape(H, stride, W, stride, C).transpose(0, 2, 1, 3, 4)
            .reshape(H, W, stride * stride * C))


class ToyBackbones(Module):
    """LiDAR: patch-linear, then two 3x3 neighbourhood layers. Camera: patch-linear, 1x1."""

    def __init__(self, d: int, bev_channels: int, image_channels: int, stride: int,
                 rng: np.random.Generator, image_stride: int = 8):
        self.stride = stride
        self.image_stride = image_stride
        self.lidar_patch = Linear(stride * stride * bev_channels, d, rng)
        self.lidar_ctx1 = Linear(9 * d, d, rng)
        self.lidar_ctx2 = Linear(9 * d, d, rng)
        self.image_patch = Linear(image_stride * image_stride * image_channels, d, rng)
        self.image_proj = Linear(d, d, rng)

    def lidar(self, patches: np.ndarray) -> Tensor:
        x = T.relu(self.lidar_patch(Tensor(patches)))
        x = T.relu(self.lidar_ctx1(T.neighborhood(x, 3)))
        return self.lidar_ctx2(T.neighborhood(x, 3))

    def image(self, patches: np.ndarray) -> Tensor:
        return self.image_proj(T.relu(self.image_patch(Tensor(patches))))

    def __call__(self, bev_raster: np.ndarray, images: Sequence[np.ndarray]) -> tuple[Tensor, list[Tensor]]:
        F_L = self.lidar(patchify(bev_raster, self.stride))
        F_C = [self.image(patchify(img, self.image_stride)) for img in images]
        return F_L, F_C


def toy_backbones(bev_raster: np.ndarray, images: Sequence[np.ndarray], params: ToyBackbones):
    return params(bev_raster, images)
