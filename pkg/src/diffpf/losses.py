"""Density estimation over particle beliefs, training losses and the error-rate metric.

States are compared in *scaled* space: each dimension is divided by the
average per-step change in the training data, and heading differences are
wrapped to (-pi, pi] before scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DegenerateScaleError, UsageError
from .filter import FilterConfig, init, step
from .geometry import wrap_angle
from .models import MIN_LIKELIHOOD, DPFModels

SCALE_FLOOR = 1e-6


@dataclass
class LossReport:
    loss: float
    grad_norms: dict[str, float] = field(default_factory=dict)
    mean_log_density: float | None = None


def compute_scale(states) -> np.ndarray:
    """Mean absolute consecutive difference per dimension over (N, T, 3) trajectories."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[None]
    if states.size == 0 or states.shape[1] < 2:
        raise DegenerateScaleError("need at least two states per episode to compute a scale")
    diff = np.diff(states, axis=1)
    diff[..., 2] = wrap_angle(diff[..., 2])
    scale = np.abs(diff).reshape(-1, 3).mean(axis=0)
    if not np.any(scale > 0):
        raise DegenerateScaleError("degenerate scale: the trajectories never move")
    return np.maximum(scale, SCALE_FLOOR)


def scaled_difference(particles, truth, scale) -> Tensor:
    """(particles - truth) / scale with the heading difference wrapped first."""
    particles = ad.as_tensor(particles)
    truth = np.asarray(ad.as_tensor(truth).data)
    diff = particles - truth[..., None, :]
    diff = ad.concat([diff[..., :2], ad.wrap_angle(diff[..., 2:])], axis=-1)
    return diff / np.asarray(scale, dtype=np.float64)


def mixture_log_density(particles, weights, truth, scale, bandwidth: float = 1.0) -> Tensor:
    """Log density at ``truth`` of a Gaussian mixture centered on the particles.

    ``particles`` (..., n, 3), ``weights`` (..., n), ``truth`` (..., 3).  Each
    component is isotropic with std ``bandwidth`` in scaled space.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    z = scaled_difference(particles, truth, scale)
    sq = ad.tsum(z * z, axis=-1)
    d = z.shape[-1]
    log_norm = -0.5 * d * np.log(2.0 * np.pi * bandwidth**2)
    return ad.weighted_logsumexp(sq * (-0.5 / bandwidth**2), weights, axis=-1) + log_norm


def _uniform(B: int, n: int) -> Tensor:
    return Tensor(np.full((B, n), 1.0 / n))


def motion_loss(
    models: DPFModels,
    prev_states,
    actions,
    next_states,
    n_samples: int,
    scale,
    rng: np.random.Generator,
    bandwidth: float = 1.0,
) -> Tensor:
    """Negative log likelihood of the true next state under sampled motion, batch mean."""
    if n_samples < 2:
        raise ValueError("motion_loss needs n_samples >= 2 (mean centering)")
    prev = np.asarray(prev_states, dtype=np.float64)
    B = prev.shape[0]
    particles = np.broadcast_to(prev[:, None, :], (B, n_samples, 3))
    noisy = models.action_sampler(actions, n_samples, rng)
    moved = models.dynamics(particles, noisy)
    logp = mixture_log_density(moved, _uniform(B, n_samples), next_states, scale, bandwidth)
    return -ad.mean(logp)


def dynamics_mse_loss(models: DPFModels, prev_states, actions, next_states) -> Tensor:
    """Sum over dimensions of the batch-mean squared error of predicted deltas."""
    if models.g is None:
        raise UsageError("dynamics_mse_loss requires a model with learned dynamics")
    prev = np.asarray(prev_states, dtype=np.float64)
    nxt = np.asarray(next_states, dtype=np.float64)
    pred = models.dynamics_learned(prev, actions)
    residual = pred - nxt
    residual = ad.concat([residual[..., :2], ad.wrap_angle(residual[..., 2:])], axis=-1)
    return ad.tsum(ad.mean(residual * residual, axis=0))


def proposer_loss(
    models: DPFModels,
    observations,
    states,
    n_samples: int,
    scale,
    rng: np.random.Generator,
    bandwidth: float = 1.0,
    encoding=None,
) -> Tensor:
    """Negative log mixture density of proposals at the true state, batch mean."""
    if n_samples < 1:
        raise ValueError("proposer_loss needs n_samples >= 1")
    if encoding is None:
        encoding = models.encoder(observations)
    proposed = models.proposer(encoding, n_samples, rng)
    B = proposed.shape[0]
    logp = mixture_log_density(proposed, _uniform(B, n_samples), states, scale, bandwidth)
    return -ad.mean(logp)


def likelihood_contrastive_loss(models: DPFModels, observations, states) -> Tensor:
    """-log mean l(matched) - log(1 - mean l(mismatched)) over a batch.

    Mismatched pairs are all (i, j) with i != j within the batch.  The second
    term uses ``1 - l = (1 - floor) * sigmoid(-logit)`` in log space, so it
    stays finite when the likelihood saturates at 1 in floating point.
    """
    states = np.asarray(states, dtype=np.float64)
    B = states.shape[0]
    if B < 2:
        raise ValueError("likelihood_contrastive_loss needs a batch of at least 2")
    encoding = models.encoder(observations)
    # row i: observation i scored against every state j
    grid = np.broadcast_to(states[None, :, :], (B, B, 3))
    logits = models.likelihood_logits(encoding, grid)
    lik = MIN_LIKELIHOOD + (1.0 - MIN_LIKELIHOOD) * ad.sigmoid(logits)
    eye = np.eye(B)
    matched = ad.tsum(lik * eye) / B
    # log sigmoid(-x) = -log(1 + exp(x))
    log_rest = -ad.logsumexp(ad.stack([ad.as_tensor(np.zeros((B, B))), logits], axis=-1), axis=-1)
    off = (1.0 - eye) / (B * (B - 1))
    log_complement = np.log(1.0 - MIN_LIKELIHOOD) + ad.weighted_logsumexp(
        ad.reshape(log_rest, (B * B,)), off.ravel()
    )
    return -ad.log(matched) - log_complement


def e2e_loss(
    models: DPFModels,
    observations,
    actions,
    states,
    cfg: FilterConfig,
    scale,
    rng: np.random.Generator,
    bandwidth: float = 1.0,
    return_log_density: bool = False,
):
    """Run the filter over (B, L, .) subsequences; ``-log`` of the time-averaged
    belief density at the true states, averaged over the batch."""
    observations = np.asarray(observations, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    states = np.asarray(states, dtype=np.float64)
    L = observations.shape[1]
    belief = init(models, observations[:, 0], cfg, rng)
    logs = []
    for t in range(L):
        if t > 0:
            belief = step(models, belief, actions[:, t], observations[:, t], cfg, rng)
        logs.append(mixture_log_density(belief.particles, belief.weights, states[:, t], scale, bandwidth))
    logp = ad.stack(logs, axis=1)  # (B, L)
    loss = -ad.mean(ad.logsumexp(logp, axis=1) - np.log(L))
    if return_log_density:
        return loss, float(np.mean(logp.data))
    return loss


def scaled_distance(estimates, truths, scale) -> np.ndarray:
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    diff = est - tru
    diff[..., 2] = wrap_angle(diff[..., 2])
    return np.sqrt(np.sum((diff / np.asarray(scale)) ** 2, axis=-1))


def error_rate(estimates, truths, scale) -> float:
    """Fraction of estimates farther than one scaled unit from the truth."""
    est = np.asarray(estimates)
    tru = np.asarray(truths)
    if est.shape != tru.shape:
        raise ValueError(f"estimates {est.shape} and truths {tru.shape} differ in shape")
    return float(np.mean(scaled_distance(est, tru, scale) > 1.0))
