"""Adam and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .exceptions import NumericError, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, Tensor], AdamState]:
    """Bias-corrected Adam update applied in place to ``params[name].data``.

    Only names present in ``grads`` are touched, which is how a training stage
    restricts itself to a subset of the model.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError("adam_step", f"{name}: grad {g.shape} vs param {params[name].shape}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class EarlyStopping:
    """Track the best validation loss and signal when patience runs out."""

    def __init__(self, patience: int = 10, delta: float = 0.0):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.delta = delta
        self.best_score = np.inf
        self.best_round = -1
        self.counter = 0

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience

    def update(self, score: float, round_: int) -> bool:
        """Record a validation score; returns True when it is a new best."""
        if score < self.best_score - self.delta:
            self.best_score = score
            self.best_round = round_
            self.counter = 0
            return True
        self.counter += 1
        return False
