"""Grid mazes, ray-cast depth observations, noisy motion and the two data policies.

Coordinates are in cell units with the origin at the lower-left corner; the
maze covers ``[0, W] x [0, H]``.  Walls are zero-thickness unit segments on
cell edges and the outer boundary is always closed.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .exceptions import DataError
from .geometry import compose, relative, wrap_angle

PRESETS = {
    1: {"width": 10, "height": 5, "seed": 11},
    2: {"width": 15, "height": 9, "seed": 12},
    3: {"width": 20, "height": 13, "seed": 13},
}

# fraction of interior walls removed after carving a perfect maze
PRESET_OPENNESS = 0.3
FIELD_OF_VIEW = np.pi / 2
COLLISION_MARGIN = 0.01
_EPS = 1e-12


@dataclass
class Maze:
    """``h_walls[j, i]``: wall on ``y = j`` over ``x in [i, i+1]``.
    ``v_walls[j, i]``: wall on ``x = i`` over ``y in [j, j+1]``.
    """

    width: int
    height: int
    h_walls: np.ndarray
    v_walls: np.ndarray
    maze_id: str = "custom"

    def __post_init__(self):
        self.h_walls = np.asarray(self.h_walls, dtype=bool)
        self.v_walls = np.asarray(self.v_walls, dtype=bool)
        if self.h_walls.shape != (self.height + 1, self.width):
            raise DataError(f"h_walls must have shape {(self.height + 1, self.width)}")
        if self.v_walls.shape != (self.height, self.width + 1):
            raise DataError(f"v_walls must have shape {(self.height, self.width + 1)}")
        self.h_walls[0, :] = self.h_walls[-1, :] = True
        self.v_walls[:, 0] = self.v_walls[:, -1] = True

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    @cached_property
    def _h_segments(self) -> np.ndarray:
        j, i = np.nonzero(self.h_walls)
        return np.stack([j, i, i + 1], axis=1).astype(np.float64)  # y, x0, x1

    @cached_property
    def _v_segments(self) -> np.ndarray:
        j, i = np.nonzero(self.v_walls)
        return np.stack([i, j, j + 1], axis=1).astype(np.float64)  # x, y0, y1

    @property
    def segments(self) -> np.ndarray:
        """All wall segments as rows ``(x0, y0, x1, y1)``."""
        h, v = self._h_segments, self._v_segments
        hs = np.stack([h[:, 1], h[:, 0], h[:, 2], h[:, 0]], axis=1)
        vs = np.stack([v[:, 0], v[:, 1], v[:, 0], v[:, 2]], axis=1)
        return np.concatenate([hs, vs])

    def neighbors(self, cell: tuple[int, int]) -> list[tuple[int, int]]:
        i, j = cell
        out = []
        if i > 0 and not self.v_walls[j, i]:
            out.append((i - 1, j))
        if i < self.width - 1 and not self.v_walls[j, i + 1]:
            out.append((i + 1, j))
        if j > 0 and not self.h_walls[j, i]:
            out.append((i, j - 1))
        if j < self.height - 1 and not self.h_walls[j + 1, i]:
            out.append((i, j + 1))
        return out

    def cells(self) -> list[tuple[int, int]]:
        return [(i, j) for j in range(self.height) for i in range(self.width)]

    def cell_of(self, xy) -> tuple[int, int]:
        i = int(np.clip(np.floor(xy[0]), 0, self.width - 1))
        j = int(np.clip(np.floor(xy[1]), 0, self.height - 1))
        return i, j

    def is_connected(self) -> bool:
        return len(self._reachable((0, 0))) == self.width * self.height

    def _reachable(self, start) -> dict:
        parent = {start: None}
        queue = deque([start])
        while queue:
            cell = queue.popleft()
            for nb in self.neighbors(cell):
                if nb not in parent:
                    parent[nb] = cell
                    queue.append(nb)
        return parent

    @cached_property
    def _next_hop(self) -> dict:
        """``_next_hop[goal][cell]``: first cell on a shortest path from ``cell`` to ``goal``."""
        table = {}
        for goal in self.cells():
            # BFS from the goal gives each cell its successor toward the goal
            table[goal] = self._reachable(goal)
        return table

    def next_cell(self, cell, goal):
        hop = self._next_hop[goal].get(cell)
        if cell != goal and hop is None:
            raise DataError(f"goal cell {goal} unreachable from {cell}")
        return hop if hop is not None else goal

    def is_free(self, xy) -> bool:
        x, y = float(xy[0]), float(xy[1])
        if not (0.0 < x < self.width and 0.0 < y < self.height):
            return False
        h, v = self._h_segments, self._v_segments
        on_h = (np.abs(h[:, 0] - y) < _EPS) & (h[:, 1] <= x) & (x <= h[:, 2])
        on_v = (np.abs(v[:, 0] - x) < _EPS) & (v[:, 1] <= y) & (y <= v[:, 2])
        return not (on_h.any() or on_v.any())

    def to_ascii(self) -> str:
        rows = []
        for j in range(self.height, -1, -1):
            rows.append("+" + "+".join("--" if self.h_walls[j, i] else "  " for i in range(self.width)) + "+")
            if j > 0:
                r = j - 1
                rows.append("".join(("|" if self.v_walls[r, i] else " ") + "  " for i in range(self.width)) + "|")
        return "\n".join(rows)


def _carve(width: int, height: int, seed: int, openness: float) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    h = np.ones((height + 1, width), dtype=bool)
    v = np.ones((height, width + 1), dtype=bool)
    visited = np.zeros((width, height), dtype=bool)
    stack = [(int(rng.integers(width)), int(rng.integers(height)))]
    visited[stack[0]] = True
    while stack:
        i, j = stack[-1]
        options = [
            (di, dj) for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= i + di < width and 0 <= j + dj < height and not visited[i + di, j + dj]
        ]
        if not options:
            stack.pop()
            continue
        di, dj = options[int(rng.integers(len(options)))]
        ni, nj = i + di, j + dj
        if di:
            v[j, max(i, ni)] = False
        else:
            h[max(j, nj), i] = False
        visited[ni, nj] = True
        stack.append((ni, nj))
    # knock out extra interior walls to create loops and open areas
    h_int = h[1:-1, :]
    v_int = v[:, 1:-1]
    h_int &= rng.random(h_int.shape) >= openness
    v_int &= rng.random(v_int.shape) >= openness
    return h, v


def build_maze(
    preset: int | None = None,
    *,
    width: int | None = None,
    height: int | None = None,
    walls: Sequence | None = None,
) -> Maze:
    """Build a preset maze (1, 2, 3) or an explicit one.

    Explicit walls are unit segments ``((x0, y0), (x1, y1))`` on cell edges;
    the boundary is added automatically.
    """
    if preset is not None:
        if preset not in PRESETS:
            raise DataError(f"unknown maze preset {preset!r}; choose 1, 2 or 3")
        p = PRESETS[preset]
        h, v = _carve(p["width"], p["height"], p["seed"], PRESET_OPENNESS)
        return Maze(p["width"], p["height"], h, v, maze_id=str(preset))

    if width is None or height is None or width < 1 or height < 1:
        raise DataError("explicit mazes need positive width and height")
    h = np.zeros((height + 1, width), dtype=bool)
    v = np.zeros((height, width + 1), dtype=bool)
    for seg in walls or ():
        (x0, y0), (x1, y1) = seg
        x0, y0, x1, y1 = (float(c) for c in (x0, y0, x1, y1))
        if any(c != round(c) for c in (x0, y0, x1, y1)):
            raise DataError(f"wall {seg} is not on grid edges")
        if y0 == y1 and abs(x1 - x0) == 1 and 0 <= y0 <= height and 0 <= min(x0, x1) < width:
            h[int(y0), int(min(x0, x1))] = True
        elif x0 == x1 and abs(y1 - y0) == 1 and 0 <= x0 <= width and 0 <= min(y0, y1) < height:
            v[int(min(y0, y1)), int(x0)] = True
        else:
            raise DataError(f"wall {seg} is not a unit segment inside the maze")
    maze = Maze(width, height, h, v)
    if not maze.is_connected():
        raise DataError("maze free space is disconnected")
    return maze


# ---------------------------------------------------------------- ray casting


def ray_angles(K: int, fov: float = FIELD_OF_VIEW) -> np.ndarray:
    """Ray offsets relative to the heading, equally spaced and centered."""
    if K == 1:
        return np.zeros(1)
    return np.linspace(-fov / 2, fov / 2, K)


def cast(maze: Maze, origins: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Exact distance from each origin along each absolute angle to the nearest wall.

    ``origins`` is (N, 2) and ``angles`` (N, R); returns (N, R).
    """
    ox = origins[:, 0][:, None, None]
    oy = origins[:, 1][:, None, None]
    dx = np.cos(angles)[..., None]
    dy = np.sin(angles)[..., None]
    best = np.full(angles.shape, np.inf)

    h = maze._h_segments
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (h[:, 0] - oy) / dy
        x = ox + t * dx
        ok = (t > _EPS) & (x >= h[:, 1] - 1e-12) & (x <= h[:, 2] + 1e-12)
        best = np.minimum(best, np.where(ok, t, np.inf).min(axis=-1))

        v = maze._v_segments
        t = (v[:, 0] - ox) / dx
        y = oy + t * dy
        ok = (t > _EPS) & (y >= v[:, 1] - 1e-12) & (y <= v[:, 2] + 1e-12)
        best = np.minimum(best, np.where(ok, t, np.inf).min(axis=-1))
    return best


def raycast(
    maze: Maze,
    pose,
    K: int = 5,
    sigma_o: float = 0.0,
    rng: np.random.Generator | None = None,
    fov: float = FIELD_OF_VIEW,
) -> np.ndarray:
    """K depth readings over the field of view centered on the heading.

    ``pose`` may be a single (3,) pose or a (N, 3) batch.  Gaussian noise with
    std ``sigma_o`` is added and readings are clamped at zero.
    """
    poses = np.atleast_2d(np.asarray(pose, dtype=np.float64))
    for p in poses:
        if not maze.is_free(p[:2]):
            raise DataError(f"pose {p.tolist()} is inside a wall or outside the maze")
    angles = poses[:, 2:3] + ray_angles(K, fov)
    depth = cast(maze, poses[:, :2], angles)
    if sigma_o > 0:
        if rng is None:
            raise ValueError("an rng is required when sigma_o > 0")
        depth = np.maximum(depth + rng.normal(0.0, sigma_o, depth.shape), 0.0)
    return depth[0] if np.ndim(pose) == 1 else depth


# ---------------------------------------------------------------- motion


def first_hit(maze: Maze, start, end) -> float | None:
    """Fraction of the segment start->end at which it first touches a wall, or None."""
    sx, sy = start
    dx, dy = end[0] - sx, end[1] - sy
    best = np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        h = maze._h_segments
        if dy != 0.0:
            s = (h[:, 0] - sy) / dy
            x = sx + s * dx
            ok = (s > 0) & (s <= 1) & (x >= h[:, 1]) & (x <= h[:, 2])
            if ok.any():
                best = min(best, s[ok].min())
        v = maze._v_segments
        if dx != 0.0:
            s = (v[:, 0] - sx) / dx
            y = sy + s * dy
            ok = (s > 0) & (s <= 1) & (y >= v[:, 1]) & (y <= v[:, 2])
            if ok.any():
                best = min(best, s[ok].min())
    return None if best == np.inf else float(best)


def apply_motion(
    maze: Maze,
    pose,
    intended,
    rng: np.random.Generator | None = None,
    actuation_sigma: float = 0.05,
) -> tuple[np.ndarray, np.ndarray]:
    """Execute an intended local-frame action; returns ``(new_pose, realized_delta)``.

    The intended action is perturbed by multiplicative actuation noise.  A
    translation that would cross a wall stops ``COLLISION_MARGIN`` short of
    the contact point; the heading change is applied regardless.
    """
    pose = np.asarray(pose, dtype=np.float64)
    action = np.asarray(intended, dtype=np.float64)
    if actuation_sigma > 0:
        if rng is None:
            raise ValueError("an rng is required when actuation_sigma > 0")
        action = action * (1.0 + rng.normal(0.0, actuation_sigma, 3))
    target = compose(pose, action)
    hit = first_hit(maze, pose[:2], target[:2])
    if hit is not None:
        step = target[:2] - pose[:2]
        length = float(np.hypot(*step))
        allowed = max(0.0, hit * length - COLLISION_MARGIN)
        xy = pose[:2] + step * (allowed / length)
        target = np.array([xy[0], xy[1], target[2]])
    delta = relative(pose, target)
    # recompose so that chaining realized deltas reproduces the trajectory
    return compose(pose, delta), delta


def odometry_measure(delta, sigma_a: float, rng: np.random.Generator) -> np.ndarray:
    """Corrupt each component by an independent ``1 + N(0, sigma_a^2)`` factor."""
    delta = np.asarray(delta, dtype=np.float64)
    if sigma_a == 0:
        return delta.copy()
    return delta * (1.0 + rng.normal(0.0, sigma_a, delta.shape))


# ---------------------------------------------------------------- policies


@dataclass
class PolicyConfig:
    speed: float = 0.5
    max_turn: float = np.pi / 4
    random_prob: float = 0.1
    clearance: float = 0.3
    K: int = 5


def _as_action(turn: float, speed: float) -> np.ndarray:
    return np.array([speed * np.cos(turn), speed * np.sin(turn), turn])


def _random_action(rng, cfg: PolicyConfig) -> np.ndarray:
    return _as_action(rng.uniform(-cfg.max_turn, cfg.max_turn), cfg.speed)


def policy_step(
    maze: Maze,
    pose,
    mode: str,
    goal: tuple[int, int] | None,
    rng: np.random.Generator,
    cfg: PolicyConfig | None = None,
) -> tuple[np.ndarray, tuple[int, int] | None]:
    """Intended local-frame action and the (possibly redrawn) goal cell.

    Policy A steers toward the deepest ray and advances while there is
    clearance.  Policy B follows a shortest cell path to ``goal`` and draws a
    new goal on arrival.  Both take a random action 10% of the time.
    """
    cfg = cfg or PolicyConfig()
    pose = np.asarray(pose, dtype=np.float64)
    if mode == "A":
        if rng.random() < cfg.random_prob:
            return _random_action(rng, cfg), goal
        offsets = ray_angles(cfg.K)
        depths = raycast(maze, pose, cfg.K)
        best = int(np.argmax(depths))
        if depths[best] < 2 * cfg.clearance:
            # boxed in: rotate in place toward the more open side
            half = cfg.K // 2
            left = depths[cfg.K - half:].sum() >= depths[:half].sum()
            return _as_action(cfg.max_turn if left else -cfg.max_turn, 0.0), goal
        turn = float(np.clip(offsets[best], -cfg.max_turn, cfg.max_turn))
        speed = float(np.clip(depths[best] - cfg.clearance, 0.0, cfg.speed))
        return _as_action(turn, speed), goal

    if mode == "B":
        cell = maze.cell_of(pose)
        if goal is None or goal == cell:
            # a one-cell maze has nowhere else to go
            cells = [c for c in maze.cells() if c != cell] or [cell]
            goal = cells[int(rng.integers(len(cells)))]
        nxt = maze.next_cell(cell, goal)
        if rng.random() < cfg.random_prob:
            return _random_action(rng, cfg), goal
        target = np.array([nxt[0] + 0.5, nxt[1] + 0.5])
        desired = np.arctan2(target[1] - pose[1], target[0] - pose[0])
        err = float(wrap_angle(desired - pose[2]))
        turn = float(np.clip(err, -cfg.max_turn, cfg.max_turn))
        speed = cfg.speed * max(0.0, np.cos(err - turn))
        return _as_action(turn, speed), goal

    raise ValueError(f"unknown policy mode {mode!r}; expected 'A' or 'B'")


# ---------------------------------------------------------------- episodes


@dataclass
class NoiseSpec:
    sigma_a: float = 0.1
    sigma_o: float = 0.1
    actuation: float = 0.05

    def __post_init__(self):
        if min(self.sigma_a, self.sigma_o, self.actuation) < 0:
            raise ValueError("noise levels must be non-negative")


@dataclass
class Episode:
    observations: np.ndarray  # (T, K)
    actions: np.ndarray  # (T, 3) measured odometry; row 0 is zero
    states: np.ndarray  # (T, 3)
    policy: str = "A"
    true_deltas: np.ndarray | None = field(default=None, repr=False)  # (T, 3)


def random_free_pose(maze: Maze, rng: np.random.Generator) -> np.ndarray:
    while True:
        xy = rng.uniform([0.0, 0.0], [maze.width, maze.height])
        if maze.is_free(xy):
            return np.array([xy[0], xy[1], rng.uniform(-np.pi, np.pi)])


def simulate_episode(
    maze: Maze,
    mode: str,
    T: int,
    noise: NoiseSpec,
    rng: np.random.Generator,
    K: int = 5,
    policy: PolicyConfig | None = None,
) -> Episode:
    policy = policy or PolicyConfig(K=K)
    states = np.zeros((T, 3))
    deltas = np.zeros((T, 3))
    states[0] = random_free_pose(maze, rng)
    goal = None
    for t in range(1, T):
        intended, goal = policy_step(maze, states[t - 1], mode, goal, rng, policy)
        states[t], deltas[t] = apply_motion(maze, states[t - 1], intended, rng, noise.actuation)
    actions = odometry_measure(deltas, noise.sigma_a, rng)
    obs = raycast(maze, states, K, noise.sigma_o, rng)
    return Episode(obs, actions, states, policy=mode, true_deltas=deltas)
