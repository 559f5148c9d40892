"""Linear layers, dropout, layer norm, GELU, cross-entropy and Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import Rng, Tensor, make_op, matmul, mul, parameter

LN_EPS = 1e-5


class Linear:
    """y = x Wᵀ (+ b), weight stored as (out, in)."""

    def __init__(self, in_features, out_features, bias=True, rng=None, init="uniform", name="linear"):
        self.in_features = in_features
        self.out_features = out_features
        if init == "zeros":
            w = np.zeros((out_features, in_features))
        elif init == "uniform":
            if rng is None:
                raise ValueError("uniform init needs an rng")
            bound = 1.0 / math.sqrt(in_features)
            w = rng.uniform((out_features, in_features), -bound, bound)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = parameter(w, name=f"{name}.weight")
        self.bias = parameter(np.zeros(out_features), name=f"{name}.bias") if bias else None

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x):
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_features:
        raise DimensionError(
            f"linear: input has {x.shape[-1]} features, layer expects {layer.in_features}")
    y = matmul(x, layer.weight.T)
    if layer.bias is not None:
        y = y + layer.bias
    return y


@dataclass
class DropoutSpec:
    p: float = 0.5
    training: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.p}")


def dropout(x: Tensor, p: float, training: bool, rng: Rng | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p), so eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.uniform(x.shape) >= p
    return mul(x, keep / (1.0 - p))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps=LN_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    d = xd.shape[-1]

    def grad_fn(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    if gd.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: affine params must have shape ({d},)")
    return make_op(xhat * gd + beta.data, (x, gamma, beta), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    u = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return make_op(y, (x,), grad_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, C) logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_op(np.asarray(loss), (logits,), grad_fn)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps, 0,
                               [np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.state, self.params,
                  [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params])


def adam_step(state: AdamState, params, grads) -> None:
    if len(params) != len(grads):
        raise DimensionError(f"{len(grads)} gradients for {len(params)} parameters")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
