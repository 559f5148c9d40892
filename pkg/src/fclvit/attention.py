"""Tunable self-attention block (TAB).

One weight set serves two modes. In the generic pass the block is plain
multi-head self-attention; in the task-specific pass queries still come from
the running features while keys and values come from a feedback sequence.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .layers import gelu, layernorm
from .tensor import Rng, Tensor, matmul, parameter, softmax_rows


class AttentionMode(enum.Enum):
    SELF = "phase1-self"
    CROSS = "phase2-cross"


@dataclass
class TABWeights:
    dim: int
    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    vit_subblocks: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError(f"embed dim {self.dim} not divisible by {self.heads} heads")

    @classmethod
    def init(cls, dim, heads, rng: Rng, vit_subblocks=True, prefix="tab"):
        def lin(out, inp):
            b = 1.0 / math.sqrt(inp)
            return rng.uniform((out, inp), -b, b)

        hidden = 4 * dim
        names = cls.param_names()
        arrays = [lin(dim, dim), lin(dim, dim), lin(dim, dim), lin(dim, dim), np.zeros(dim),
                  np.ones(dim), np.zeros(dim), np.ones(dim), np.zeros(dim),
                  lin(hidden, dim), np.zeros(hidden), lin(dim, hidden), np.zeros(dim)]
        params = {n: parameter(a, name=f"{prefix}.{n}") for n, a in zip(names, arrays)}
        return cls(dim=dim, heads=heads, vit_subblocks=vit_subblocks, **params)

    @staticmethod
    def param_names():
        return ("w_q", "w_k", "w_v", "w_o", "b_o", "ln1_g", "ln1_b", "ln2_g", "ln2_b",
                "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")

    def parameters(self):
        return [getattr(self, n) for n in self.param_names()]


def _heads(x: Tensor, h: int) -> Tensor:
    # (B, N, D) -> (B, h, N, D/h); head k owns columns [k*D/h, (k+1)*D/h)
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def attention_core(w: TABWeights, x_q: Tensor, x_kv: Tensor) -> Tensor:
    """W_o · concat_heads(softmax(Q Kᵀ / sqrt(D/h)) V) + b_o on (B, N, D) inputs."""
    b, n, d = x_q.shape
    h = w.heads
    q = _heads(matmul(x_q, w.w_q.T), h)
    k = _heads(matmul(x_kv, w.w_k.T), h)
    v = _heads(matmul(x_kv, w.w_v.T), h)
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d / h))
    a = softmax_rows(scores)
    mixed = matmul(a, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return matmul(mixed, w.w_o.T) + w.b_o


def _tab(w: TABWeights, f: Tensor, kv_src: Tensor) -> Tensor:
    squeeze = f.ndim == 2
    if squeeze:
        f = f.reshape(1, *f.shape)
        kv_src = kv_src.reshape(1, *kv_src.shape)
    if f.shape[-1] != w.dim or kv_src.shape[-1] != w.dim:
        raise DimensionError(
            f"TAB of width {w.dim} got features {f.shape} and key/value source {kv_src.shape}")
    if f.shape[0] != kv_src.shape[0]:
        raise DimensionError(f"batch mismatch: {f.shape} vs {kv_src.shape}")
    if not w.vit_subblocks:
        out = attention_core(w, f, kv_src)
    else:
        xq = layernorm(f, w.ln1_g, w.ln1_b)
        xkv = xq if kv_src is f else layernorm(kv_src, w.ln1_g, w.ln1_b)
        x = f + attention_core(w, xq, xkv)
        hidden = gelu(matmul(layernorm(x, w.ln2_g, w.ln2_b), w.mlp_w1.T) + w.mlp_b1)
        out = x + matmul(hidden, w.mlp_w2.T) + w.mlp_b2
    if squeeze:
        out = out.reshape(*out.shape[1:])
    return out


def tab_forward_self(w: TABWeights, f_prev: Tensor) -> Tensor:
    """Generic-feature pass: Q, K and V all come from ``f_prev``."""
    return _tab(w, f_prev, f_prev)


def tab_forward_cross(w: TABWeights, f_prev: Tensor, g: Tensor) -> Tensor:
    """Task-specific pass: Q from ``f_prev``; K and V from the feedback tokens ``g``."""
    return _tab(w, f_prev, g)


def tab_forward(w: TABWeights, f_prev: Tensor, mode: AttentionMode, g: Tensor | None = None):
    if mode is AttentionMode.SELF:
        return tab_forward_self(w, f_prev)
    if g is None:
        raise ContractError("cross mode needs a feedback tensor")
    return tab_forward_cross(w, f_prev, g)
