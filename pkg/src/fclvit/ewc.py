"""Elastic weight consolidation on the feedback parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .layers import cross_entropy
from .tensor import Tensor, mul, square, sub, tsum


@dataclass
class EwcConfig:
    lam: float = 100.0
    fisher_samples: int | None = None  # None: the whole task training set
    fisher_mode: str = "accumulate"  # or "replace"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.fisher_mode not in ("accumulate", "replace"):
            raise ValueError(f"unknown fisher mode {self.fisher_mode!r}")


@dataclass
class ConsolidationState:
    names: list = field(default_factory=list)
    anchor: list = field(default_factory=list)
    fisher: list = field(default_factory=list)
    tasks_consolidated: int = 0

    @property
    def initialized(self):
        return self.tasks_consolidated > 0

    def check_layout(self, params):
        if len(params) != len(self.anchor) or any(
                p.shape != a.shape for p, a in zip(params, self.anchor)):
            raise ContractError("live parameters do not match the consolidation anchor layout")


def compute_fisher(model, images, labels, task_index, n_samples=None, rng=None):
    """Diagonal empirical Fisher of the consolidated parameters.

    Each sample gets its own forward/backward at eval-mode dropout with the
    cross-entropy of its true (task-local) label; squared gradients are
    averaged. ``n_samples`` draws a subset (without replacement) using ``rng``.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("cannot estimate the Fisher information from an empty dataset")
    idx = np.arange(n)
    if n_samples is not None and n_samples < n:
        if rng is None:
            raise ValueError("subsampling the Fisher estimate needs an rng")
        idx = np.sort(rng.permutation(n)[:n_samples])
    params = model.consolidated_params()
    fisher = [np.zeros_like(p.data) for p in params]
    saved = [p.grad for p in params]
    try:
        for i in idx:
            for p in params:
                p.grad = None
            logits = model.full_forward(images[i:i + 1], task_index, training=False)
            cross_entropy(logits, labels[i:i + 1]).backward()
            for f, p in zip(fisher, params):
                if p.grad is not None:
                    f += p.grad * p.grad
    finally:
        for p, g in zip(params, saved):
            p.grad = g
        for p in model.head_params(task_index):
            p.grad = None
    return [f / len(idx) for f in fisher]


def ewc_penalty(params, state: ConsolidationState, lam: float) -> Tensor:
    """sum_l lam/2 * F_l * (theta_l - anchor_l)^2 as a differentiable scalar.

    Exactly zero before the first consolidation.
    """
    if not state.initialized:
        return Tensor(0.0)
    state.check_layout(params)
    total = None
    for p, a, f in zip(params, state.anchor, state.fisher):
        term = tsum(mul(square(sub(p, a)), (0.5 * lam) * f))
        total = term if total is None else total + term
    return total


def consolidate(model, state: ConsolidationState, images, labels, task_index,
                config: EwcConfig, rng=None) -> ConsolidationState:
    """Re-anchor at the current parameters and fold in this task's Fisher."""
    est = compute_fisher(model, images, labels, task_index, config.fisher_samples, rng)
    params = model.consolidated_params()
    if state.initialized and config.fisher_mode == "accumulate":
        state.check_layout(params)
        fisher = [old + new for old, new in zip(state.fisher, est)]
    else:
        fisher = est
    return ConsolidationState(
        names=model.consolidated_names(),
        anchor=[p.data.copy() for p in params],
        fisher=fisher,
        tasks_consolidated=state.tasks_consolidated + 1,
    )
