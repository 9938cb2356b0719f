"""Episode datasets: generation, the line-delimited container, and batching."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DataError
from .maze import Maze, NoiseSpec, build_maze, simulate_episode

FORMAT_VERSION = 1


@dataclass
class Dataset:
    """Aligned arrays over N episodes of length T."""

    observations: np.ndarray  # (N, T, K)
    actions: np.ndarray  # (N, T, 3)
    states: np.ndarray  # (N, T, 3)
    policies: list[str]
    maze_id: str
    width: int
    height: int
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int | None = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        n, t = self.states.shape[:2]
        if (
            self.observations.ndim != 3
            or self.observations.shape[:2] != (n, t)
            or self.actions.shape != (n, t, 3)
            or self.states.shape != (n, t, 3)
            or len(self.policies) != n
        ):
            raise DataError(
                "dataset arrays are misaligned: "
                f"obs {self.observations.shape}, actions {self.actions.shape}, "
                f"states {self.states.shape}, {len(self.policies)} policy tags"
            )

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.states.shape[1]

    @property
    def K(self) -> int:
        return self.observations.shape[2]

    @property
    def maze(self) -> Maze:
        if self.maze_id in ("1", "2", "3"):
            return build_maze(int(self.maze_id))
        raise DataError(f"maze {self.maze_id!r} is not a preset; keep the Maze object yourself")

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(
            self.observations[index], self.actions[index], self.states[index],
            [self.policies[i] for i in index], self.maze_id, self.width, self.height,
            self.noise, self.seed,
        )

    def head(self, n: int) -> "Dataset":
        if n > len(self):
            raise DataError(f"requested {n} episodes but the dataset has {len(self)}")
        return self.subset(np.arange(n))


def concat(datasets: list[Dataset]) -> Dataset:
    first = datasets[0]
    for d in datasets[1:]:
        if (d.maze_id, d.K, d.T) != (first.maze_id, first.K, first.T):
            raise DataError("cannot concatenate datasets from different mazes or shapes")
    return Dataset(
        np.concatenate([d.observations for d in datasets]),
        np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.states for d in datasets]),
        sum((d.policies for d in datasets), []),
        first.maze_id, first.width, first.height, first.noise, first.seed,
    )


def generate_dataset(
    maze: Maze,
    mode: str,
    n_episodes: int,
    T: int,
    noise: NoiseSpec | None = None,
    seed: int = 0,
    K: int = 5,
) -> Dataset:
    """Episodes from uniformly random free-space starts; episode i uses rng seed (seed, i)."""
    if n_episodes < 1 or T < 2 or K < 1:
        raise ValueError("n_episodes, K must be positive and T >= 2")
    noise = noise or NoiseSpec()
    eps = [
        simulate_episode(maze, mode, T, noise, np.random.default_rng([seed, i]), K=K)
        for i in range(n_episodes)
    ]
    return Dataset(
        np.stack([e.observations for e in eps]),
        np.stack([e.actions for e in eps]),
        np.stack([e.states for e in eps]),
        [mode] * n_episodes, maze.maze_id, maze.width, maze.height, noise, seed,
    )


# ---------------------------------------------------------------- container


def round_sig(a) -> list:
    """Nested lists of floats rounded to 9 significant digits."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return float(f"{a:.9g}")
    return [round_sig(x) for x in a]


def write_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "noise": asdict(dataset.noise),
        "K": dataset.K,
        "seed": dataset.seed,
        "maze_id": dataset.maze_id,
        "width": dataset.width,
        "height": dataset.height,
        "episodes": len(dataset),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(dataset)):
            rec = {
                "maze_id": dataset.maze_id,
                "policy": dataset.policies[i],
                "T": dataset.T,
                "states": round_sig(dataset.states[i]),
                "actions": round_sig(dataset.actions[i]),
                "observations": round_sig(dataset.observations[i]),
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path: str | os.PathLike) -> Dataset:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    if not lines:
        raise DataError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed record: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported dataset version {header.get('format_version')}")
    if not records:
        raise DataError(f"{path} contains no episodes")
    try:
        obs = np.array([r["observations"] for r in records], dtype=np.float64)
        act = np.array([r["actions"] for r in records], dtype=np.float64)
        st = np.array([r["states"] for r in records], dtype=np.float64)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: inconsistent episode records ({exc})") from None
    if obs.shape[2] != header["K"]:
        raise DataError(f"{path}: observation width {obs.shape[2]} != header K {header['K']}")
    return Dataset(
        obs, act, st, [r["policy"] for r in records],
        str(header["maze_id"]), int(header["width"]), int(header["height"]),
        NoiseSpec(**header["noise"]), header.get("seed"),
    )


# ---------------------------------------------------------------- batching


def sample_subsequences(
    dataset: Dataset, batch_size: int, length: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random overlapping windows: returns ``(obs, actions, states)`` of shape (B, L, .)."""
    if length > dataset.T:
        raise DataError(f"subsequence length {length} exceeds episode length {dataset.T}")
    ep = rng.integers(len(dataset), size=batch_size)
    start = rng.integers(dataset.T - length + 1, size=batch_size)
    idx = start[:, None] + np.arange(length)
    return (
        dataset.observations[ep[:, None], idx],
        dataset.actions[ep[:, None], idx],
        dataset.states[ep[:, None], idx],
    )


def transitions(dataset: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All consecutive ``(s_{t-1}, a_t, s_t)`` triples, flattened over episodes."""
    return (
        dataset.states[:, :-1].reshape(-1, 3),
        dataset.actions[:, 1:].reshape(-1, 3),
        dataset.states[:, 1:].reshape(-1, 3),
    )
