"""Task-specific blocks: the trainable top-down chain that turns generic
features into one feedback sequence per depth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .layers import dropout
from .tensor import Rng, Tensor, matmul, parameter


@dataclass
class TSBWeights:
    h1: Tensor
    h2: Tensor
    p: float = 0.5

    @classmethod
    def init(cls, dim, p, rng: Rng, mode="identity", noise=0.02, prefix="tsb"):
        if mode == "identity":
            h1 = np.eye(dim) + rng.normal((dim, dim), 0.0, noise)
            h2 = np.eye(dim) + rng.normal((dim, dim), 0.0, noise)
        elif mode == "random":
            bound = 1.0 / np.sqrt(dim)
            h1 = rng.uniform((dim, dim), -bound, bound)
            h2 = rng.uniform((dim, dim), -bound, bound)
        else:
            raise ValueError(f"unknown TSB init {mode!r}")
        return cls(parameter(h1, name=f"{prefix}.h1"), parameter(h2, name=f"{prefix}.h2"), p)

    @property
    def dim(self):
        return self.h1.shape[0]

    def parameters(self):
        return [self.h1, self.h2]


def tsb_forward(w: TSBWeights, l: Tensor, rng: Rng | None, training: bool):
    """Returns (g_j, l_{j-1}) = (Dropout(l H1ᵀ), Dropout(l H2ᵀ)), token-wise."""
    if l.shape[-1] != w.dim:
        raise DimensionError(f"TSB of width {w.dim} got input {l.shape}")
    g = dropout(matmul(l, w.h1.T), w.p, training, rng)
    l_next = dropout(matmul(l, w.h2.T), w.p, training, rng)
    return g, l_next


def tsb_chain(weights, r: Tensor, rng: Rng | None, training: bool, pooled=False, trace=None):
    """Run the chain from the deepest block down: l_d = r, then block j emits
    g_j and hands l_{j-1} to block j-1. Returns [g_1, ..., g_d].

    With ``pooled`` the chain sees the token mean of ``r``, so every g_j is a
    single token.
    """
    l = r.mean(axis=-2, keepdims=True) if pooled else r
    d = len(weights)
    bundle = [None] * d
    for j in range(d - 1, -1, -1):
        bundle[j], l = tsb_forward(weights[j], l, rng, training)
        if trace is not None:
            trace["tsb"] += 1
    return bundle
