"""Input validation helpers for the estimators."""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .exceptions import DataError


def check_dataset(X, *, min_length: int = 1, name: str = "X") -> Dataset:
    """Accept a :class:`Dataset` and verify its arrays are finite and long enough."""
    if not isinstance(X, Dataset):
        raise TypeError(f"{name} must be a diffpf Dataset, got {type(X).__name__}")
    if len(X) == 0:
        raise DataError(f"{name} contains no episodes")
    if X.T < min_length:
        raise DataError(f"{name} episodes have length {X.T}, need at least {min_length}")
    for field in ("observations", "actions", "states"):
        if not np.all(np.isfinite(getattr(X, field))):
            raise DataError(f"{name}.{field} contains non-finite values")
    return X


def check_compatible(X: Dataset, K: int, maze_id: str, name: str = "X") -> None:
    if X.K != K:
        raise DataError(f"{name} has K={X.K} depth rays but the model expects K={K}")
    if str(X.maze_id) != str(maze_id):
        raise DataError(f"{name} comes from maze {X.maze_id!r}, the model from maze {maze_id!r}")


def split_validation(X: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Hold out a random ``fraction`` of episodes (at least one)."""
    n = len(X)
    if n < 2:
        raise DataError("need at least two episodes to split off a validation set")
    n_val = min(max(1, int(round(fraction * n))), n - 1)
    perm = rng.permutation(n)
    return X.subset(np.sort(perm[n_val:])), X.subset(np.sort(perm[:n_val]))
