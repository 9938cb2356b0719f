"""The particle filtering loop.

One step is resample -> predict -> propose -> weight.  Resampled particles
are detached from the graph, so gradients only ever reach the models through
the current step (the action sampler for moved particles, the proposer and
encoder for proposed ones, and the likelihood/encoder through the weights).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DataError
from .models import DPFModels

WEIGHT_TOLERANCE = 1e-6


@dataclass
class FilterConfig:
    n_particles: int = 100
    gamma: float = 0.7

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class ParticleBelief:
    particles: Tensor  # (B, n, 3)
    weights: Tensor  # (B, n), rows sum to one
    t: int = 1

    @property
    def n(self) -> int:
        return self.particles.shape[1]


def proposal_count(t: int, n: int, gamma: float) -> int:
    """Number of proposed particles at step ``t``: ``n * gamma**(t-1)`` rounded half up."""
    if t < 1:
        raise ValueError("steps are numbered from 1")
    return int(min(max(np.floor(n * gamma ** (t - 1) + 0.5), 0), n))


def resample_sus(
    weights, count: int, rng: np.random.Generator | None = None, offset=None
) -> np.ndarray:
    """Stochastic universal sampling; returns particle indices.

    ``weights`` is (n,) or (B, n).  One offset ``u ~ U[0, 1/count)`` per row
    (or the given ``offset``) places ``count`` equally spaced pointers over the
    cumulative weights, so every copy count is ``floor(count*w)`` or
    ``ceil(count*w)``.
    """
    w = np.asarray(ad.as_tensor(weights).data, dtype=np.float64)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    if count < 1:
        raise ValueError("count must be >= 1")
    total = w.sum(axis=1)
    if np.any(np.abs(total - 1.0) > WEIGHT_TOLERANCE) or np.any(w < 0):
        raise DataError(f"weights must be non-negative and sum to 1 (sums: {total})")
    B, n = w.shape
    if offset is None:
        offset = rng.uniform(0.0, 1.0 / count, size=B)
    offset = np.broadcast_to(np.asarray(offset, dtype=np.float64), (B,))
    pointers = offset[:, None] + np.arange(count) / count
    cum = np.cumsum(w, axis=1)
    # shift each row by its index so that a single searchsorted handles the batch
    rows = np.arange(B)[:, None]
    idx = np.searchsorted((cum + rows).ravel(), (pointers + rows).ravel(), side="right")
    idx = idx.reshape(B, count) - rows * n
    idx = np.clip(idx, 0, n - 1)
    return idx[0] if single else idx


def _gather(particles: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(particles, idx[..., None], axis=1)


def init(
    models: DPFModels, observation, cfg: FilterConfig, rng: np.random.Generator, encoding=None
) -> ParticleBelief:
    """Propose all particles from the first observation, with uniform weights."""
    if encoding is None:
        encoding = models.encoder(observation)
    particles = models.proposer(encoding, cfg.n_particles, rng)
    B = particles.shape[0]
    weights = Tensor(np.full((B, cfg.n_particles), 1.0 / cfg.n_particles))
    return ParticleBelief(particles, weights, t=1)


def predict(models: DPFModels, particles, actions, rng: np.random.Generator) -> Tensor:
    """Move each particle by its own sampled action."""
    particles = ad.as_tensor(particles)
    noisy = models.action_sampler(actions, particles.shape[1], rng)
    return models.dynamics(particles, noisy)


def measurement_update(models: DPFModels, particles, observation=None, encoding=None) -> Tensor:
    """Set every weight to the observation likelihood, then normalize rows."""
    if encoding is None:
        encoding = models.encoder(observation)
    w = models.likelihood(encoding, particles)
    return w / ad.tsum(w, axis=-1, keepdims=True)


def step(
    models: DPFModels,
    belief: ParticleBelief,
    action,
    observation,
    cfg: FilterConfig,
    rng: np.random.Generator,
) -> ParticleBelief:
    t = belief.t + 1
    n = belief.n
    m = proposal_count(t, n, cfg.gamma)
    encoding = models.encoder(observation)
    parts = []
    if m < n:
        idx = resample_sus(belief.weights.data, n - m, rng)
        survivors = Tensor(_gather(belief.particles.data, idx))  # gradient stops here
        parts.append(predict(models, survivors, action, rng))
    if m > 0:
        parts.append(models.proposer(encoding, m, rng))
    particles = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    weights = measurement_update(models, particles, encoding=encoding)
    return ParticleBelief(particles, weights, t)


def estimate(belief: ParticleBelief) -> np.ndarray:
    """Weighted mean position and circular-mean heading, (B, 3)."""
    p = belief.particles.data
    w = belief.weights.data
    xy = np.einsum("bn,bnd->bd", w, p[..., :2])
    th = np.arctan2(np.sum(w * np.sin(p[..., 2]), axis=1), np.sum(w * np.cos(p[..., 2]), axis=1))
    return np.concatenate([xy, th[:, None]], axis=1)


def run_filter(
    models: DPFModels,
    observations,
    actions,
    cfg: FilterConfig,
    rng: np.random.Generator,
    keep_beliefs: bool = True,
):
    """Filter (B, T, K) observations and (B, T, 3) actions.

    Returns ``(estimates (B, T, 3), beliefs)``; ``beliefs`` is empty when
    ``keep_beliefs`` is False, which keeps memory flat during evaluation.
    """
    observations = np.asarray(observations, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    B, T = observations.shape[:2]
    estimates = np.zeros((B, T, 3))
    beliefs = []
    belief = init(models, observations[:, 0], cfg, rng)
    for t in range(T):
        if t > 0:
            belief = step(models, belief, actions[:, t], observations[:, t], cfg, rng)
        estimates[:, t] = estimate(belief)
        if keep_beliefs:
            beliefs.append(belief)
    return estimates, beliefs
