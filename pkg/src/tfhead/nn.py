"""Parameter containers and the layers the detection head is built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container (Tensors, Modules, lists of Modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def zero_(self) -> "Module":
        for p in self.parameters():
            p.data[...] = 0.0
        return self


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        limit = math.sqrt(6.0 / (n_in + n_out))
        self.weight = _param(rng.uniform(-limit, limit, size=(n_in, n_out)))
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Two linear layers with a ReLU in between; the 1x1-conv heads and position encoders."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        self.gain = _param(np.ones(n))
        self.bias = _param(np.zeros(n))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, weights: "MultiheadAttention",
                         spatial_weight: np.ndarray | None = None, mask_mode: str = "mul",
                         return_attention: bool = False):
    """Scaled dot-product attention over ``heads`` heads.

    ``spatial_weight`` (Lq x Lk, entries in [0, 1]) multiplies every head's
    post-softmax attention map before values are aggregated; it is not
    renormalised. ``mask_mode="add"`` instead adds ``log(spatial_weight)`` to
    the logits.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"hidden size {d} not divisible by {heads} heads")
    dh = d // heads
    lq, lk = q.shape[0], k.shape[0]

    def split(x: Tensor, n: int) -> Tensor:
        return T.transpose(x.reshape(n, heads, dh), (1, 0, 2))

    qh = split(weights.q_proj(q), lq)
    kh = split(weights.k_proj(k), lk)
    vh = split(weights.v_proj(v), lk)
    logits = T.matmul(qh, T.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    if spatial_weight is not None:
        spatial_weight = np.asarray(spatial_weight, dtype=T.DTYPE)
        if spatial_weight.shape != (lq, lk):
            raise T.ShapeError(f"spatial weight {spatial_weight.shape} != {(lq, lk)}")
    if spatial_weight is not None and mask_mode == "add":
        logits = logits + Tensor(np.log(np.maximum(spatial_weight, 1e-12)))
    attn = T.softmax(logits, axis=-1)
    if spatial_weight is not None and mask_mode == "mul":
        attn = attn * Tensor(spatial_weight)
    mixed = T.matmul(attn, vh)
    out = weights.out_proj(T.transpose(mixed, (1, 0, 2)).reshape(lq, d))
    if return_attention:
        return out, attn
    return out


class MultiheadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 spatial_weight: np.ndarray | None = None, mask_mode: str = "mul",
                 return_attention: bool = False):
        return multi_head_attention(query, key, value, self.heads, self, spatial_weight,
                                    mask_mode, return_attention)
