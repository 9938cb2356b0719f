"""Dense layers, stochastic masks and the LSTM cell, built on :mod:`diffpf.autodiff`."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ShapeError

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "linear": ad.identity,
}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def dense(x, W, b, activation: str = "linear") -> Tensor:
    """``activation(x @ W + b)``."""
    x, W, b = ad.as_tensor(x), ad.as_tensor(W), ad.as_tensor(b)
    if x.shape[-1] != W.shape[0] or b.shape[-1] != W.shape[-1]:
        raise ShapeError("dense", f"x {x.shape}, W {W.shape}, b {b.shape} do not agree")
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    return act(x @ W + b)


def dropout_mask(shape, keep_prob: float, rng: np.random.Generator) -> Tensor:
    """Inverted-dropout mask: ``1/keep_prob`` with probability ``keep_prob``, else 0.

    The mask is a constant, so backward treats it like any other input data.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return Tensor(np.ones(shape))
    keep = rng.random(shape) < keep_prob
    return Tensor(keep / keep_prob)


class MLP:
    """Stack of dense layers whose weights live in a shared parameter dict.

    ``params`` is mutated in place: the layers register ``{prefix}W{i}`` and
    ``{prefix}b{i}`` entries so that optimizers and checkpoints see a flat
    namespace over the whole model.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        prefix: str,
        sizes: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
    ):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        self.prefix = prefix
        self.activations = list(activations)
        self.names = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w, b = f"{prefix}W{i}", f"{prefix}b{i}"
            params[w] = ad.parameter(glorot_uniform(rng, n_in, n_out), name=w)
            params[b] = ad.parameter(np.zeros(n_out), name=b)
            self.names.append((w, b))
        self.params = params

    def __len__(self):
        return len(self.names)

    def layer(self, i: int, x) -> Tensor:
        w, b = self.names[i]
        return dense(x, self.params[w], self.params[b], self.activations[i])

    def __call__(self, x, start: int = 0) -> Tensor:
        for i in range(start, len(self.names)):
            x = self.layer(i, x)
        return x


def lstm_cell(x, h, c, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output).

    ``params`` holds ``Wx`` (n_in, 4H), ``Wh`` (H, 4H) and ``b`` (4H,).
    """
    x, h, c = ad.as_tensor(x), ad.as_tensor(h), ad.as_tensor(c)
    Wx, Wh, b = params["Wx"], params["Wh"], params["b"]
    hidden = Wh.shape[0]
    if Wx.shape[1] != 4 * hidden or h.shape[-1] != hidden or c.shape[-1] != hidden:
        raise ShapeError("lstm_cell", f"x {x.shape}, h {h.shape}, c {c.shape}, Wx {Wx.shape}")
    z = x @ Wx + h @ Wh + b
    i = ad.sigmoid(z[..., :hidden])
    f = ad.sigmoid(z[..., hidden : 2 * hidden])
    g = ad.tanh(z[..., 2 * hidden : 3 * hidden])
    o = ad.sigmoid(z[..., 3 * hidden :])
    c_next = f * c + i * g
    h_next = o * ad.tanh(c_next)
    return h_next, c_next


def lstm_params(
    params: dict[str, Tensor], prefix: str, n_in: int, hidden: int, rng: np.random.Generator
) -> dict[str, Tensor]:
    out = {}
    for key, fan_in in (("Wx", n_in), ("Wh", hidden)):
        name = f"{prefix}{key}"
        # each gate block gets its own Glorot range
        w = np.concatenate([glorot_uniform(rng, fan_in, hidden) for _ in range(4)], axis=1)
        params[name] = out[key] = ad.parameter(w, name=name)
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0  # forget-gate bias
    params[f"{prefix}b"] = ad.parameter(bias, name=f"{prefix}b")
    out["b"] = params[f"{prefix}b"]
    return out


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm
