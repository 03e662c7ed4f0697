"""Bottleneck residual adapter: down-project to hidden/4, GELU, up-project, add.

The up projection and both biases start at zero, so a freshly initialized
adapter is the exact identity and an adapter-equipped block is bitwise
indistinguishable from the plain one until training moves the up path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, gelu


def bottleneck_dim(hidden: int) -> int:
    if hidden <= 0 or hidden % 4 != 0:
        raise ValueError(f"hidden size must be a positive multiple of 4, got {hidden}")
    return hidden // 4


@dataclass
class AdapterWeights:
    w_down: Tensor  # [hidden, hidden/4]
    b_down: Tensor  # [hidden/4]
    w_up: Tensor    # [hidden/4, hidden]
    b_up: Tensor    # [hidden]

    def __post_init__(self):
        hidden, k = self.w_down.shape
        if k != bottleneck_dim(hidden):
            raise ShapeError(f"bottleneck {k} is not hidden/4 for hidden {hidden}")
        if self.b_down.shape != (k,) or self.w_up.shape != (k, hidden) or self.b_up.shape != (hidden,):
            raise ShapeError("inconsistent adapter weight shapes")

    @property
    def hidden(self) -> int:
        return self.w_down.shape[0]


def init_adapter(hidden: int, rng: np.random.Generator) -> AdapterWeights:
    k = bottleneck_dim(hidden)
    bound = 1.0 / np.sqrt(hidden)
    return AdapterWeights(
        w_down=Tensor(rng.uniform(-bound, bound, size=(hidden, k))),
        b_down=Tensor(np.zeros(k)),
        w_up=Tensor(np.zeros((k, hidden))),
        b_up=Tensor(np.zeros(hidden)),
    )


def adapter_forward(x: Tensor, w: AdapterWeights) -> Tensor:
    """up(GELU(down(x))) + x, preserving the input shape."""
    if x.ndim != 2 or x.shape[1] != w.hidden:
        raise ShapeError(f"adapter expects [seq, {w.hidden}] input, got {x.shape}")
    inner = gelu(x @ w.w_down + w.b_down)
    return inner @ w.w_up + w.b_up + x


def adapter_param_count(hidden: int) -> int:
    """Number of scalars in an AdapterWeights for this hidden size."""
    k = bottleneck_dim(hidden)
    return hidden * k + k + k * hidden + hidden
