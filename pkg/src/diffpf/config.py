"""Run configuration and its flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored.  Lists are comma separated.
Every field of :class:`TrainConfig` can be set; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

from .exceptions import UsageError


@dataclass
class TrainConfig:
    scheme: str = "ind+e2e"
    train_data: str = ""
    val_data: str = ""
    test_data: str = ""
    checkpoint: str = "model.npz"
    metrics: str = "metrics.csv"
    n_train_particles: int = 100
    n_test_particles: int = 1000
    seq_len: int = 20
    gamma: float = 0.7
    batch_size: int = 16
    ind_batch_size: int = 32
    lr: float = 1e-3
    e2e_lr: float = 3e-5  # 0 means "same as lr"
    patience: int = 30
    eval_every: int = 200
    ind_steps: int = 2000
    e2e_steps: int = 1000
    likelihood_steps: int = 40000  # 0 means "same as ind_steps"
    seed: int = 0
    use_known_dynamics: bool = True
    motion_samples: int = 100
    proposer_samples: int = 100
    motion_bandwidth: float = 0.05
    proposer_bandwidth: float = 0.2
    e2e_bandwidth: float = 1.0
    hidden: int = 64
    likelihood_hidden: int = 128
    pose_octaves: int = 4
    encoding_dim: int = 64
    val_fraction: float = 0.1
    # recurrent baseline
    baseline_steps: int = 5000
    baseline_lr: float = 3e-3
    baseline_batch_size: int = 32
    lstm_hidden: int = 128
    fc_hidden: int = 128
    # experiment grids
    maze: int = 1
    schemes: list[str] = field(default_factory=lambda: ["ind", "e2e", "ind+e2e"])
    sizes: list[int] = field(default_factory=lambda: [32, 63, 125, 250, 500, 1000])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    methods: list[str] = field(default_factory=lambda: ["dpf", "baseline"])
    train_data_a: str = ""
    train_data_b: str = ""
    test_data_a: str = ""
    test_data_b: str = ""
    n_episodes: int = 1000
    out: str = "results.csv"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scheme not in ("ind", "e2e", "ind+e2e"):
            raise UsageError(f"scheme must be ind, e2e or ind+e2e, got {self.scheme!r}")
        for name in ("n_train_particles", "n_test_particles", "seq_len", "batch_size",
                     "patience", "eval_every", "ind_steps", "e2e_steps", "baseline_steps",
                     "n_episodes"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise UsageError("gamma must lie in (0, 1]")
        if self.lr <= 0 or self.e2e_lr < 0 or self.baseline_lr <= 0:
            raise UsageError("learning rates must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Short digest of every field except output paths, used to tag output files."""
        fields = {k: v for k, v in self.to_dict().items() if k not in _OUTPUTS}
        blob = json.dumps(fields, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_HINTS = typing.get_type_hints(TrainConfig)
_OUTPUTS = ("checkpoint", "metrics", "out")


def _coerce(key: str, raw: str):
    hint = _HINTS[key]
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint in (int, float, str):
            return hint(raw)
        (item,) = typing.get_args(hint)
        return [item(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def parse_overrides(pairs: typing.Iterable[str]) -> dict:
    """``["key=value", ...]`` to typed field values."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in _HINTS:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_config(text: str) -> dict:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected 'key = value'")
        pairs.append(line)
    return parse_overrides(pairs)


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> TrainConfig:
    """Read ``path`` (if given), then apply ``overrides`` on top."""
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values = parse_config(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        # relative data paths are taken relative to the config file
        base = os.path.dirname(os.path.abspath(path))
        for key, value in values.items():
            if _HINTS[key] is str and key.endswith(("data", "_a", "_b")) and value and not os.path.isabs(value):
                values[key] = os.path.join(base, value)
    values.update(overrides or {})
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
