"""The learnable pieces of the filter.

* action sampler ``f``: per-particle noisy odometry via the reparameterization trick
* dynamics ``g``: known rigid-body composition, or a residual network
* observation encoder ``h``
* particle proposer ``k``: states from an encoding, randomized by a dropout mask
* observation likelihood ``l``: weight in [0.004, 1] for an (encoding, state) pair

All parameters live in one flat dict with ``f/``, ``g/``, ``h/``, ``k/``,
``l/`` prefixes.  Batched tensors carry a leading batch axis B and, for
particle quantities, a particle axis n: states are (B, n, 3).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ShapeError, UsageError
from .layers import MLP, dropout_mask

MIN_LIKELIHOOD = 0.004


@dataclass
class ModelConfig:
    K: int = 5
    encoding_dim: int = 64
    hidden: int = 64
    sampler_hidden: int = 32
    proposer_keep: float = 0.15
    use_known_dynamics: bool = True
    likelihood_hidden: int = 128
    pose_octaves: int = 0

    @property
    def pose_dim(self) -> int:
        return 4 + 4 * self.pose_octaves


def dynamics_known(states, actions) -> Tensor:
    """Compose local-frame actions onto global poses; broadcasts over leading axes."""
    states, actions = ad.as_tensor(states), ad.as_tensor(actions)
    th = states[..., 2]
    c, s = ad.cos(th), ad.sin(th)
    dx, dy, dth = actions[..., 0], actions[..., 1], actions[..., 2]
    return ad.stack(
        [
            states[..., 0] + dx * c - dy * s,
            states[..., 1] + dx * s + dy * c,
            ad.wrap_angle(th + dth),
        ],
        axis=-1,
    )


class DPFModels:
    def __init__(
        self,
        config: ModelConfig,
        width: float,
        height: float,
        rng: np.random.Generator | None = None,
        params: dict[str, Tensor] | None = None,
    ):
        self.config = config
        self.width = float(width)
        self.height = float(height)
        self.state_scale: np.ndarray | None = None
        self.action_scale = np.ones(3)
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        p: dict[str, Tensor] = {}
        self.f = MLP(p, "f/", [6, c.sampler_hidden, c.sampler_hidden, 3], ["relu", "relu", "linear"], rng)
        self.g = None
        if not c.use_known_dynamics:
            self.g = MLP(p, "g/", [c.pose_dim + 3, c.hidden, c.hidden, c.hidden, 3], ["relu"] * 3 + ["linear"], rng)
        self.h = MLP(p, "h/", [c.K, c.hidden, c.encoding_dim], ["relu", "relu"], rng)
        self.k = MLP(
            p, "k/", [c.encoding_dim] + [c.hidden] * 4 + [4], ["relu"] * 4 + ["tanh"], rng
        )
        self.l = MLP(
            p, "l/", [c.encoding_dim + c.pose_dim, c.likelihood_hidden, c.likelihood_hidden, 1],
            ["relu", "relu", "linear"], rng,
        )
        if params is not None:
            missing = set(p) - set(params)
            if missing:
                raise UsageError(f"parameters missing from checkpoint: {sorted(missing)}")
            for name in p:
                if params[name].shape != p[name].shape:
                    raise ShapeError(name, f"checkpoint shape {params[name].shape} != {p[name].shape}")
                p[name] = params[name]
            for mlp in (self.f, self.g, self.h, self.k, self.l):
                if mlp is not None:
                    mlp.params = p
        self.params = p

    # ------------------------------------------------------------ bookkeeping

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def set_statistics(self, state_scale, action_scale=None) -> None:
        self.state_scale = np.asarray(state_scale, dtype=np.float64)
        if action_scale is not None:
            self.action_scale = np.asarray(action_scale, dtype=np.float64)

    def group(self, *prefixes: str) -> dict[str, Tensor]:
        """Sub-dict of parameters whose names start with any of ``prefixes``."""
        return {n: t for n, t in self.params.items() if n.startswith(prefixes)}

    def meta(self) -> dict:
        return {
            "model": asdict(self.config),
            "width": self.width,
            "height": self.height,
            "state_scale": None if self.state_scale is None else self.state_scale.tolist(),
            "action_scale": self.action_scale.tolist(),
        }

    @classmethod
    def from_checkpoint(cls, params: dict[str, Tensor], meta: dict) -> "DPFModels":
        models = cls(ModelConfig(**meta["model"]), meta["width"], meta["height"], params=params)
        if meta.get("state_scale") is not None:
            models.set_statistics(meta["state_scale"], meta["action_scale"])
        return models

    # ------------------------------------------------------------ motion

    def action_sampler(self, actions, n: int, rng: np.random.Generator) -> Tensor:
        """``n`` noisy copies of each action in ``actions`` (B, 3) -> (B, n, 3).

        The network output is mean-centered over the particle axis, so the
        sample mean equals the measured action exactly.
        """
        if n < 1:
            raise ValueError("action_sampler needs at least one particle")
        actions = np.asarray(ad.as_tensor(actions).data)
        B = actions.shape[0]
        eps = rng.standard_normal((B, n, 3))
        W0 = self.params["f/W0"]
        # first layer split into the shared action part and the per-particle noise part
        a_part = (actions / self.action_scale) @ W0[:3] + self.params["f/b0"]
        hidden = ad.relu(ad.expand_dims(a_part, 1) + Tensor(eps) @ W0[3:])
        out = self.f(hidden, start=1) * self.action_scale
        out = out - ad.mean(out, axis=1, keepdims=True)
        return out + actions[:, None, :]

    def dynamics(self, states, actions) -> Tensor:
        if self.g is None:
            return dynamics_known(states, actions)
        return self.dynamics_learned(states, actions)

    def dynamics_learned(self, states, actions) -> Tensor:
        """Residual network step ``s + scale * net(features)``."""
        if self.g is None:
            raise UsageError("model was built with known dynamics")
        if self.state_scale is None:
            raise UsageError("state scale must be set before using learned dynamics")
        states, actions = ad.as_tensor(states), ad.as_tensor(actions)
        feats = ad.concat([self.pose_features(states), actions / self.action_scale], axis=-1)
        delta = self.g(feats) * self.state_scale
        moved = states + delta
        return ad.concat([moved[..., :2], ad.wrap_angle(moved[..., 2:])], axis=-1)

    # ------------------------------------------------------------ measurement

    def pose_features(self, states) -> Tensor:
        """Normalized position, heading on the unit circle and, with
        ``pose_octaves > 0``, sinusoids of the position at doubling frequencies."""
        states = ad.as_tensor(states)
        th = states[..., 2]
        u, v = states[..., 0] / self.width, states[..., 1] / self.height
        feats = [u, v, ad.cos(th), ad.sin(th)]
        for j in range(self.config.pose_octaves):
            w = np.pi * 2.0**j
            feats += [ad.sin(u * w), ad.cos(u * w), ad.sin(v * w), ad.cos(v * w)]
        return ad.stack(feats, axis=-1)

    def encoder(self, observations) -> Tensor:
        """(..., K) depths -> (..., E) encodings."""
        obs = ad.as_tensor(observations)
        if obs.shape[-1] != self.config.K:
            raise ShapeError("encoder", f"expected {self.config.K} depths, got {obs.shape[-1]}")
        return self.h(obs / self.diagonal)

    def proposer(self, encoding, n: int, rng: np.random.Generator) -> Tensor:
        """(B, E) encodings -> (B, n, 3) proposed states inside the maze extents."""
        encoding = ad.as_tensor(encoding)
        first = self.k.layer(0, encoding)  # shared across the particles of one encoding
        B = encoding.shape[0]
        hidden = ad.broadcast_to(ad.expand_dims(first, 1), (B, n, first.shape[-1]))
        hidden = hidden * dropout_mask(hidden.shape, self.config.proposer_keep, rng)
        u = self.k(hidden, start=1)
        return self.decode_proposal(u)

    def decode_proposal(self, u) -> Tensor:
        """Four tanh outputs -> (x, y, theta)."""
        u = ad.as_tensor(u)
        x = (u[..., 0] + 1.0) * (0.5 * self.width)
        y = (u[..., 1] + 1.0) * (0.5 * self.height)
        th = ad.atan2(u[..., 2], u[..., 3])
        return ad.stack([x, y, th], axis=-1)

    def likelihood(self, encoding, states) -> Tensor:
        """(B, E) encodings and (B, n, 3) states -> (B, n) weights in [0.004, 1]."""
        encoding, states = ad.as_tensor(encoding), ad.as_tensor(states)
        return MIN_LIKELIHOOD + (1.0 - MIN_LIKELIHOOD) * ad.sigmoid(
            self.likelihood_logits(encoding, states)
        )

    def likelihood_logits(self, encoding, states) -> Tensor:
        E = self.config.encoding_dim
        W0, b0 = self.params["l/W0"], self.params["l/b0"]
        if encoding.shape[-1] != E:
            raise ShapeError("likelihood", f"encoding width {encoding.shape[-1]} != {E}")
        # dense layer over concat(encoding, pose) with the encoding half computed once
        enc_part = encoding @ W0[:E] + b0
        pose_part = self.pose_features(states) @ W0[E:]
        hidden = ad.relu(ad.expand_dims(enc_part, -2) + pose_part)
        return self.l(hidden, start=1)[..., 0]
