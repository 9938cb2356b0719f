"""Estimators with a scikit-learn style surface.

``DifferentiableParticleFilter`` learns the filter's models individually
(``scheme="ind"``), end-to-end through the filtering loop (``"e2e"``) or both
in sequence (``"ind+e2e"``).  ``fit`` takes a :class:`~diffpf.data.Dataset`;
``predict`` returns per-step pose estimates (N, T, 3); ``score`` returns one
minus the error rate.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, sample_subsequences, transitions
from .exceptions import DataError
from .filter import FilterConfig, run_filter
from .losses import (
    compute_scale,
    dynamics_mse_loss,
    e2e_loss,
    error_rate,
    likelihood_contrastive_loss,
    motion_loss,
    proposer_loss,
)
from .models import DPFModels, ModelConfig
from .training import run_stage
from .validation import check_compatible, check_dataset, split_validation

SCHEMES = ("ind", "e2e", "ind+e2e")
# fixed stream ids so every stage draws the same numbers however it is reached
_STREAMS = {
    "init": 0, "split": 1, "motion": 2, "dynamics": 3, "likelihood": 4,
    "proposer": 5, "e2e": 6, "validation": 7,
}
_VAL_PAIRS = 1000


def _stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAMS[name], *extra])


# the e2e loss is noisy at 100 particles; early stopping needs a few hundred windows
_E2E_VAL_BATCHES = 8


def action_scale(actions) -> np.ndarray:
    """Mean absolute odometry per dimension, floored to stay usable as a divisor."""
    a = np.asarray(actions, dtype=np.float64).reshape(-1, 3)
    return np.maximum(np.abs(a).mean(axis=0), 1e-3)


class DifferentiableParticleFilter(BaseEstimator):
    """Particle filter whose motion and measurement models are neural networks.

    With ``warm_start=True`` a second ``fit`` keeps the current models, so
    ``scheme="ind"`` followed by ``scheme="e2e"`` with ``warm_start=True``
    reproduces ``scheme="ind+e2e"``.
    """

    def __init__(
        self,
        scheme: str = "ind+e2e",
        n_train_particles: int = 100,
        n_test_particles: int = 1000,
        seq_len: int = 20,
        gamma: float = 0.7,
        batch_size: int = 16,
        ind_batch_size: int = 32,
        lr: float = 1e-3,
        e2e_lr: float | None = 3e-5,
        patience: int = 30,
        eval_every: int = 200,
        ind_steps: int = 2000,
        e2e_steps: int = 1000,
        likelihood_steps: int | None = 40000,
        use_known_dynamics: bool = True,
        motion_samples: int = 100,
        proposer_samples: int = 100,
        motion_bandwidth: float = 0.05,
        proposer_bandwidth: float = 0.2,
        e2e_bandwidth: float = 1.0,
        hidden: int = 64,
        likelihood_hidden: int = 128,
        pose_octaves: int = 4,
        encoding_dim: int = 64,
        sampler_hidden: int = 32,
        proposer_keep: float = 0.15,
        val_fraction: float = 0.1,
        clip_norm: float = 1000.0,
        random_state: int = 0,
        warm_start: bool = False,
    ):
        self.scheme = scheme
        self.n_train_particles = n_train_particles
        self.n_test_particles = n_test_particles
        self.seq_len = seq_len
        self.gamma = gamma
        self.batch_size = batch_size
        self.ind_batch_size = ind_batch_size
        self.lr = lr
        self.e2e_lr = e2e_lr
        self.patience = patience
        self.eval_every = eval_every
        self.ind_steps = ind_steps
        self.e2e_steps = e2e_steps
        self.likelihood_steps = likelihood_steps
        self.use_known_dynamics = use_known_dynamics
        self.motion_samples = motion_samples
        self.proposer_samples = proposer_samples
        self.motion_bandwidth = motion_bandwidth
        self.proposer_bandwidth = proposer_bandwidth
        self.e2e_bandwidth = e2e_bandwidth
        self.hidden = hidden
        self.likelihood_hidden = likelihood_hidden
        self.pose_octaves = pose_octaves
        self.encoding_dim = encoding_dim
        self.sampler_hidden = sampler_hidden
        self.proposer_keep = proposer_keep
        self.val_fraction = val_fraction
        self.clip_norm = clip_norm
        self.random_state = random_state
        self.warm_start = warm_start

    # ------------------------------------------------------------------ fit

    def _check_params(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        for name in ("n_train_particles", "n_test_particles", "seq_len", "batch_size",
                     "ind_batch_size", "patience", "eval_every", "motion_samples",
                     "proposer_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ind_batch_size < 2:
            raise ValueError("ind_batch_size must be >= 2 for the contrastive loss")
        if self.motion_samples < 2:
            raise ValueError("motion_samples must be >= 2")
        if self.pose_octaves < 0:
            raise ValueError("pose_octaves must be >= 0")
        FilterConfig(self.n_train_particles, self.gamma)

    def fit(self, X: Dataset, y=None, X_val: Dataset | None = None):
        """Train on ``X``; hold out ``val_fraction`` of it when ``X_val`` is None."""
        self._check_params()
        X = check_dataset(X, min_length=2)
        if X_val is None:
            X, X_val = split_validation(X, self.val_fraction, _stream(self.random_state, "split"))
        else:
            X_val = check_dataset(X_val, min_length=2, name="X_val")
            check_compatible(X_val, X.K, X.maze_id, name="X_val")
        if X.T < self.seq_len or X_val.T < self.seq_len:
            raise DataError(f"episodes of length {min(X.T, X_val.T)} are shorter than seq_len={self.seq_len}")

        if not (self.warm_start and hasattr(self, "models_")):
            cfg = ModelConfig(
                K=X.K, encoding_dim=self.encoding_dim, hidden=self.hidden,
                likelihood_hidden=self.likelihood_hidden, pose_octaves=self.pose_octaves,
                sampler_hidden=self.sampler_hidden, proposer_keep=self.proposer_keep,
                use_known_dynamics=self.use_known_dynamics,
            )
            self.models_ = DPFModels(cfg, X.width, X.height, rng=_stream(self.random_state, "init"))
            self.scale_ = compute_scale(X.states)
            self.models_.set_statistics(self.scale_, action_scale(X.actions))
            self.maze_id_ = str(X.maze_id)
            self.K_ = X.K
            self.metrics_ = []
            self.stages_ = {}
        else:
            check_compatible(X, self.K_, self.maze_id_)

        if self.scheme in ("ind", "ind+e2e"):
            self._fit_individual(X, X_val)
        if self.scheme in ("e2e", "ind+e2e"):
            self._fit_e2e(X, X_val)
        return self

    def _run(self, name, params, train_loss, val_loss, steps, lr=None):
        self.stages_[name] = run_stage(
            name, params, train_loss, val_loss, _stream(self.random_state, name),
            lr=self.lr if lr is None else lr, max_steps=int(steps), eval_every=self.eval_every,
            patience=self.patience, clip_norm=self.clip_norm, metrics=self.metrics_,
        )

    def _fit_individual(self, X: Dataset, X_val: Dataset):
        m = self.models_
        scale = self.scale_
        B = self.ind_batch_size
        prev, act, nxt = transitions(X)
        vprev, vact, vnxt = _first(transitions(X_val), _VAL_PAIRS, self.random_state)
        obs, states = X.observations.reshape(-1, X.K), X.states.reshape(-1, 3)
        vobs, vstates = _first(
            (X_val.observations.reshape(-1, X.K), X_val.states.reshape(-1, 3)),
            _VAL_PAIRS, self.random_state,
        )

        def batch(rng, *arrays):
            idx = rng.integers(0, len(arrays[0]), size=B)
            return [a[idx] for a in arrays]

        def frozen(fn):
            def wrapped():
                with ad.no_grad():
                    return fn(_stream(self.random_state, "validation"))
            return wrapped

        if not self.use_known_dynamics:
            self._run(
                "dynamics", m.group("g/"),
                lambda rng: dynamics_mse_loss(m, *batch(rng, prev, act, nxt)),
                frozen(lambda rng: dynamics_mse_loss(m, vprev, vact, vnxt).item()),
                self.ind_steps,
            )
        bw = self.motion_bandwidth
        self._run(
            "motion", m.group("f/"),
            lambda rng: motion_loss(m, *batch(rng, prev, act, nxt), self.motion_samples, scale, rng, bw),
            frozen(lambda rng: motion_loss(m, vprev, vact, vnxt, self.motion_samples, scale, rng, bw).item()),
            self.ind_steps,
        )

        def val_contrastive(rng):
            losses = [
                likelihood_contrastive_loss(m, vobs[i:i + B], vstates[i:i + B]).item()
                for i in range(0, len(vobs) - B + 1, B)
            ]
            return float(np.mean(losses))

        self._run(
            "likelihood", m.group("h/", "l/"),
            lambda rng: likelihood_contrastive_loss(m, *batch(rng, obs, states)),
            frozen(val_contrastive),
            self.ind_steps if self.likelihood_steps is None else self.likelihood_steps,
        )
        # the encoder is owned by the likelihood stage; only the proposer head moves here
        pbw = self.proposer_bandwidth

        def proposer_train(rng):
            o, s = batch(rng, obs, states)
            with ad.no_grad():
                enc = m.encoder(o)
            return proposer_loss(m, None, s, self.proposer_samples, scale, rng, pbw, encoding=enc)

        self._run(
            "proposer", m.group("k/"),
            proposer_train,
            frozen(lambda rng: proposer_loss(m, vobs, vstates, self.proposer_samples, scale, rng, pbw).item()),
            self.ind_steps,
        )

    def _fit_e2e(self, X: Dataset, X_val: Dataset):
        m = self.models_
        cfg = FilterConfig(self.n_train_particles, self.gamma)
        B, L = self.batch_size, self.seq_len
        val_batches = [
            sample_subsequences(X_val, B, L, _stream(self.random_state, "validation", i))
            for i in range(_E2E_VAL_BATCHES)
        ]

        def train(rng):
            o, a, s = sample_subsequences(X, B, L, rng)
            return e2e_loss(m, o, a, s, cfg, self.scale_, rng, self.e2e_bandwidth)

        def val():
            rng = _stream(self.random_state, "validation")
            with ad.no_grad():
                return float(np.mean([
                    e2e_loss(m, o, a, s, cfg, self.scale_, rng, self.e2e_bandwidth).item()
                    for o, a, s in val_batches
                ]))

        self._run("e2e", m.params, train, val, self.e2e_steps, lr=self.e2e_lr)

    # ------------------------------------------------------------------ predict

    def filter(self, X: Dataset, n_particles: int | None = None, seed: int | None = None,
               keep_beliefs: bool = False, chunk: int = 50):
        """Run the filter over every episode; returns ``(estimates, beliefs)``."""
        check_is_fitted(self, "models_")
        X = check_dataset(X)
        check_compatible(X, self.K_, self.maze_id_)
        n = self.n_test_particles if n_particles is None else int(n_particles)
        cfg = FilterConfig(n, self.gamma)
        rng = np.random.default_rng([self.random_state if seed is None else int(seed), 101])
        estimates, beliefs = [], []
        with ad.no_grad():
            for i in range(0, len(X), chunk):
                est, bel = run_filter(
                    self.models_, X.observations[i:i + chunk], X.actions[i:i + chunk], cfg, rng,
                    keep_beliefs=keep_beliefs,
                )
                estimates.append(est)
                beliefs.append(bel)
        return np.concatenate(estimates), beliefs

    def predict(self, X: Dataset, n_particles: int | None = None, seed: int | None = None) -> np.ndarray:
        return self.filter(X, n_particles, seed)[0]

    def score(self, X: Dataset, y=None) -> float:
        return 1.0 - error_rate(self.predict(X), X.states, self.scale_)

    # ------------------------------------------------------------------ persistence

    def save(self, path) -> None:
        check_is_fitted(self, "models_")
        meta = {
            "estimator": "dpf",
            "estimator_params": self.get_params(),
            "models": self.models_.meta(),
            "scale": self.scale_.tolist(),
            "stages": self.stages_,
            "maze_id": self.maze_id_,
            "K": self.K_,
        }
        save_checkpoint(path, self.models_.params, meta=meta)

    @classmethod
    def load(cls, path) -> "DifferentiableParticleFilter":
        params, _, meta = load_checkpoint(path)
        if meta.get("estimator") != "dpf":
            raise DataError(f"{path} is not a particle filter checkpoint")
        est = cls(**meta["estimator_params"])
        est.models_ = DPFModels.from_checkpoint(params, meta["models"])
        est.scale_ = np.asarray(meta["scale"], dtype=np.float64)
        est.maze_id_ = str(meta["maze_id"])
        est.K_ = int(meta["K"])
        est.metrics_, est.stages_ = [], meta.get("stages", {})
        return est


def _first(arrays, limit: int, seed: int):
    """A fixed random subset of at most ``limit`` aligned rows."""
    n = len(arrays[0])
    if n <= limit:
        return list(arrays)
    idx = np.sort(_stream(seed, "validation").choice(n, size=limit, replace=False))
    return [a[idx] for a in arrays]
