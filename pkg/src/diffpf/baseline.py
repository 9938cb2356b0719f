"""Recurrent baseline: an LSTM that maps observation/odometry sequences to poses.

It shares the data pipeline, scaling and error metric with the particle
filter but replaces the filtering loop with two stacked LSTM layers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, sample_subsequences
from .estimators import action_scale
from .exceptions import DataError
from .layers import MLP, lstm_cell, lstm_params
from .losses import compute_scale, error_rate
from .training import run_stage
from .validation import check_compatible, check_dataset, split_validation


class RecurrentNet:
    """encoder -> concat(encoding, scaled action) -> 2 x LSTM -> 2 x relu fc -> (x, y, sin, cos)."""

    def __init__(self, K, width, height, encoding_dim=64, hidden=64, lstm_hidden=128,
                 fc_hidden=128, rng=None, params=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width, self.height = float(width), float(height)
        self.lstm_hidden = lstm_hidden
        p: dict[str, Tensor] = {}
        self.encoder = MLP(p, "h/", [K, hidden, encoding_dim], ["relu", "relu"], rng)
        lstm_params(p, "r0/", encoding_dim + 3, lstm_hidden, rng)
        lstm_params(p, "r1/", lstm_hidden, lstm_hidden, rng)
        self.head = MLP(p, "o/", [lstm_hidden, fc_hidden, fc_hidden, 4], ["relu", "relu", "linear"], rng)
        if params is not None:
            if set(params) != set(p):
                raise DataError("checkpoint parameters do not match the baseline architecture")
            for name in p:
                if params[name].shape != p[name].shape:
                    raise DataError(f"checkpoint parameter {name} has shape {params[name].shape}")
            p = dict(params)
            self.encoder.params = self.head.params = p
        self.params = p
        self.action_scale = np.ones(3)
        self.diagonal = float(np.hypot(width, height))

    def _cell(self, layer, x, h, c):
        p = self.params
        return lstm_cell(x, h, c, {"Wx": p[f"{layer}Wx"], "Wh": p[f"{layer}Wh"], "b": p[f"{layer}b"]})

    def __call__(self, observations, actions) -> Tensor:
        """(B, T, K), (B, T, 3) -> raw outputs (B, T, 4)."""
        obs = np.asarray(observations, dtype=np.float64)
        act = np.asarray(actions, dtype=np.float64) / self.action_scale
        B, T = obs.shape[:2]
        enc = self.encoder(Tensor(obs / self.diagonal))
        zeros = Tensor(np.zeros((B, self.lstm_hidden)))
        h0 = c0 = h1 = c1 = zeros
        outs = []
        for t in range(T):
            x = ad.concat([enc[:, t], Tensor(act[:, t])], axis=-1)
            h0, c0 = self._cell("r0/", x, h0, c0)
            h1, c1 = self._cell("r1/", h0, h1, c1)
            outs.append(h1)
        return self.head(ad.stack(outs, axis=1))

    def decode(self, raw) -> np.ndarray:
        r = np.asarray(ad.as_tensor(raw).data)
        x = (r[..., 0] + 1.0) * (0.5 * self.width)
        y = (r[..., 1] + 1.0) * (0.5 * self.height)
        return np.stack([x, y, np.arctan2(r[..., 2], r[..., 3])], axis=-1)


def pose_mse(net: RecurrentNet, raw: Tensor, states, scale) -> Tensor:
    """Mean squared error in scaled units with the heading compared through (sin, cos)."""
    s = np.asarray(states, dtype=np.float64)
    x = (raw[..., 0] + 1.0) * (0.5 * net.width)
    y = (raw[..., 1] + 1.0) * (0.5 * net.height)
    sq = ((x - s[..., 0]) / scale[0]) ** 2 + ((y - s[..., 1]) / scale[1]) ** 2
    sq = sq + ((raw[..., 2] - np.sin(s[..., 2])) ** 2 + (raw[..., 3] - np.cos(s[..., 2])) ** 2) / scale[2] ** 2
    return ad.mean(sq)


class RecurrentBaseline(BaseEstimator):
    """LSTM pose regressor trained on the same subsequences as the particle filter."""

    def __init__(
        self,
        seq_len: int = 20,
        batch_size: int = 32,
        lr: float = 3e-3,
        patience: int = 30,
        eval_every: int = 200,
        max_steps: int = 5000,
        encoding_dim: int = 64,
        hidden: int = 64,
        lstm_hidden: int = 128,
        fc_hidden: int = 128,
        val_fraction: float = 0.1,
        clip_norm: float = 1000.0,
        random_state: int = 0,
    ):
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.eval_every = eval_every
        self.max_steps = max_steps
        self.encoding_dim = encoding_dim
        self.hidden = hidden
        self.lstm_hidden = lstm_hidden
        self.fc_hidden = fc_hidden
        self.val_fraction = val_fraction
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _architecture(self) -> dict:
        return dict(encoding_dim=self.encoding_dim, hidden=self.hidden,
                    lstm_hidden=self.lstm_hidden, fc_hidden=self.fc_hidden)

    def fit(self, X: Dataset, y=None, X_val: Dataset | None = None):
        for name in ("seq_len", "batch_size", "patience", "eval_every", "max_steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        X = check_dataset(X, min_length=2)
        seed = int(self.random_state)
        if X_val is None:
            X, X_val = split_validation(X, self.val_fraction, np.random.default_rng([seed, 1]))
        else:
            X_val = check_dataset(X_val, min_length=2, name="X_val")
            check_compatible(X_val, X.K, X.maze_id, name="X_val")
        if min(X.T, X_val.T) < self.seq_len:
            raise DataError(f"episodes are shorter than seq_len={self.seq_len}")
        self.net_ = RecurrentNet(X.K, X.width, X.height, rng=np.random.default_rng([seed, 0]),
                                 **self._architecture())
        self.net_.action_scale = action_scale(X.actions)
        self.scale_ = compute_scale(X.states)
        self.maze_id_, self.K_ = str(X.maze_id), X.K
        self.metrics_ = []
        B, L = self.batch_size, self.seq_len
        val_batches = [sample_subsequences(X_val, B, L, np.random.default_rng([seed, 7, i])) for i in range(4)]

        def train(rng):
            o, a, s = sample_subsequences(X, B, L, rng)
            return pose_mse(self.net_, self.net_(o, a), s, self.scale_)

        def val():
            with ad.no_grad():
                return float(np.mean([
                    pose_mse(self.net_, self.net_(o, a), s, self.scale_).item() for o, a, s in val_batches
                ]))

        self.stages_ = {"baseline": run_stage(
            "baseline", self.net_.params, train, val, np.random.default_rng([seed, 2]),
            lr=self.lr, max_steps=int(self.max_steps), eval_every=self.eval_every,
            patience=self.patience, clip_norm=self.clip_norm, metrics=self.metrics_,
        )}
        return self

    def predict(self, X: Dataset, chunk: int = 50) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_dataset(X)
        check_compatible(X, self.K_, self.maze_id_)
        out = []
        with ad.no_grad():
            for i in range(0, len(X), chunk):
                out.append(self.net_.decode(self.net_(X.observations[i:i + chunk], X.actions[i:i + chunk])))
        return np.concatenate(out)

    def score(self, X: Dataset, y=None) -> float:
        return 1.0 - error_rate(self.predict(X), X.states, self.scale_)

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        meta = {
            "estimator": "baseline",
            "estimator_params": self.get_params(),
            "width": self.net_.width, "height": self.net_.height,
            "action_scale": self.net_.action_scale.tolist(),
            "scale": self.scale_.tolist(), "maze_id": self.maze_id_, "K": self.K_, "stages": self.stages_,
        }
        save_checkpoint(path, self.net_.params, meta=meta)

    @classmethod
    def load(cls, path) -> "RecurrentBaseline":
        params, _, meta = load_checkpoint(path)
        if meta.get("estimator") != "baseline":
            raise DataError(f"{path} is not a baseline checkpoint")
        est = cls(**meta["estimator_params"])
        est.net_ = RecurrentNet(meta["K"], meta["width"], meta["height"], params=params,
                                **est._architecture())
        est.net_.action_scale = np.asarray(meta["action_scale"])
        est.scale_ = np.asarray(meta["scale"])
        est.maze_id_, est.K_ = str(meta["maze_id"]), int(meta["K"])
        est.metrics_, est.stages_ = [], meta.get("stages", {})
        return est
