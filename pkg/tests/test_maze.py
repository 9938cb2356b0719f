import numpy as np
import pytest

from diffpf.data import generate_dataset
from diffpf.exceptions import DataError
from diffpf.geometry import compose, relative
from diffpf.maze import (
    COLLISION_MARGIN, NoiseSpec, PolicyConfig, apply_motion, build_maze, odometry_measure,
    policy_step, random_free_pose, raycast, ray_angles, simulate_episode,
)


def march(maze, origin, angle, step=1e-3, start=0.0, length=None):
    """Walk along a ray in small steps until a grid-line crossing lands on a wall.

    A step that crosses a vertical and a horizontal grid line at once (the ray
    passes near a corner) is marched again at a thousandth of the step, so the
    two crossings are taken in the right order.
    """
    length = maze.diagonal + 2 * step if length is None else length
    n = int(np.ceil(length / step)) + 1
    s = start + np.arange(n) * step
    x = origin[0] + s * np.cos(angle)
    y = origin[1] + s * np.sin(angle)
    ix, iy = np.floor(x).astype(int), np.floor(y).astype(int)
    for k in range(1, n):
        if ix[k] != ix[k - 1] and iy[k] != iy[k - 1] and step > 1e-9:
            hit = march(maze, origin, angle, step / 1000, s[k - 1], step)
            if hit is not None:
                return hit
            continue
        if ix[k] != ix[k - 1]:
            line = max(ix[k], ix[k - 1])
            row = int(np.clip(iy[k - 1], 0, maze.height - 1))
            if line <= 0 or line >= maze.width or maze.v_walls[row, line]:
                return s[k]
        if iy[k] != iy[k - 1]:
            line = max(iy[k], iy[k - 1])
            col = int(np.clip(ix[k - 1], 0, maze.width - 1))
            if line <= 0 or line >= maze.height or maze.h_walls[line, col]:
                return s[k]
    if start == 0.0:
        raise AssertionError("ray never hit a wall")
    return None


def crosses_wall(maze, p, q):
    """Independent segment test against every wall segment (strict proper intersection or touch)."""
    for x0, y0, x1, y1 in maze.segments:
        d1 = np.array([q[0] - p[0], q[1] - p[1]])
        d2 = np.array([x1 - x0, y1 - y0])
        den = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(den) < 1e-15:
            continue
        w = np.array([x0 - p[0], y0 - p[1]])
        t = (w[0] * d2[1] - w[1] * d2[0]) / den
        u = (w[0] * d1[1] - w[1] * d1[0]) / den
        if 0 <= t <= 1 and 0 <= u <= 1:
            return True
    return False


@pytest.mark.parametrize("preset,size", [(1, (10, 5)), (2, (15, 9)), (3, (20, 13))])
def test_presets_have_expected_dimensions_and_are_connected(preset, size):
    m = build_maze(preset)
    assert (m.width, m.height) == size
    assert m.is_connected()
    assert m.h_walls[0].all() and m.h_walls[-1].all()
    assert m.v_walls[:, 0].all() and m.v_walls[:, -1].all()


def test_presets_are_reproducible():
    a, b = build_maze(2), build_maze(2)
    np.testing.assert_array_equal(a.h_walls, b.h_walls)
    np.testing.assert_array_equal(a.v_walls, b.v_walls)


def test_open_room_and_disconnected_walls():
    room = build_maze(width=10, height=5, walls=[])
    for _ in range(20):
        assert room.is_free(np.random.default_rng(_).uniform([0.01, 0.01], [9.99, 4.99]))
    seal = [((2, 2), (3, 2)), ((2, 3), (3, 3)), ((2, 2), (2, 3)), ((3, 2), (3, 3))]
    with pytest.raises(DataError, match="disconnected"):
        build_maze(width=5, height=5, walls=seal)
    with pytest.raises(DataError):
        build_maze(width=5, height=5, walls=[((0.5, 1), (1.5, 1))])
    with pytest.raises(DataError):
        build_maze(7)


def test_raycast_examples():
    room = build_maze(width=10, height=5, walls=[])
    assert raycast(room, [5.0, 2.5, 0.0])[2] == pytest.approx(5.0)
    corridor = build_maze(width=10, height=5, walls=[((6, 2), (6, 3))])
    assert raycast(corridor, [4.0, 2.5, 0.0])[2] == pytest.approx(2.0)
    a = raycast(room, [5.0, 2.5, 0.3], sigma_o=0.1, rng=np.random.default_rng(0))
    b = raycast(room, [5.0, 2.5, 0.3], sigma_o=0.1, rng=np.random.default_rng(1))
    assert not np.array_equal(a, b)
    assert (a >= 0).all()


def test_ray_angles_span_field_of_view():
    np.testing.assert_allclose(ray_angles(5), [-np.pi / 4, -np.pi / 8, 0, np.pi / 8, np.pi / 4])


def test_raycast_rejects_pose_in_wall():
    room = build_maze(width=4, height=4, walls=[((2, 1), (2, 2))])
    with pytest.raises(DataError):
        raycast(room, [2.0, 1.5, 0.0])
    with pytest.raises(DataError):
        raycast(room, [5.0, 1.5, 0.0])


def test_raycast_matches_marching_oracle():
    m = build_maze(1)
    rng = np.random.default_rng(0)
    angles = ray_angles(5)
    worst = 0.0
    for _ in range(1000):
        pose = random_free_pose(m, rng)
        depth = raycast(m, pose)
        for k in range(5):
            worst = max(worst, abs(depth[k] - march(m, pose[:2], pose[2] + angles[k])))
    assert worst < 2e-3


def test_apply_motion_examples():
    room = build_maze(width=10, height=5, walls=[])
    pose = np.array([2.0, 2.0, 0.3])
    new, delta = apply_motion(room, pose, [0.4, 0.1, 0.2], actuation_sigma=0.0)
    np.testing.assert_allclose(new, compose(pose, [0.4, 0.1, 0.2]), atol=1e-12)
    np.testing.assert_allclose(delta, [0.4, 0.1, 0.2], atol=1e-12)
    same, delta = apply_motion(room, pose, [0, 0, 0], actuation_sigma=0.0)
    np.testing.assert_allclose(same, pose, atol=1e-12)
    # forward 1.0 toward the east wall 0.3 away stops 0.01 short
    new, delta = apply_motion(room, [9.7, 2.0, 0.0], [1.0, 0.0, 0.5], actuation_sigma=0.0)
    assert new[0] == pytest.approx(10.0 - COLLISION_MARGIN)
    assert delta[0] == pytest.approx(0.3 - COLLISION_MARGIN)
    assert new[2] == pytest.approx(0.5)


def test_odometry_measure():
    rng = np.random.default_rng(0)
    delta = np.array([0.5, 0.0, -0.2])
    np.testing.assert_array_equal(odometry_measure(delta, 0.0, rng), delta)
    draws = np.array([odometry_measure(delta, 0.1, rng) for _ in range(10_000)])
    assert (draws[:, 1] == 0).all()
    ratio = draws[:, 0] / delta[0]
    assert abs(ratio.std() / 0.1 - 1) < 0.05


def test_trajectories_never_cross_walls_and_odometry_closes():
    m = build_maze(1)
    for seed in range(6):
        ep = simulate_episode(m, "AB"[seed % 2], 100, NoiseSpec(), np.random.default_rng(seed))
        s = ep.states
        for t in range(1, len(s)):
            assert m.is_free(s[t, :2])
            assert not crosses_wall(m, s[t - 1, :2], s[t, :2])
        pose = s[0]
        for t in range(1, len(s)):
            pose = compose(pose, ep.true_deltas[t])
        np.testing.assert_allclose(pose, s[-1], atol=1e-9)
        # realized deltas are the local-frame difference of consecutive states
        np.testing.assert_allclose(relative(s[:-1], s[1:]), ep.true_deltas[1:], atol=1e-9)


def test_policy_a_follows_corridor():
    corridor = build_maze(width=10, height=1, walls=[])
    rng = np.random.default_rng(0)
    cfg = PolicyConfig(random_prob=0.0)
    action, _ = policy_step(corridor, [2.0, 0.5, 0.0], "A", None, rng, cfg)
    np.testing.assert_allclose(action, [0.5, 0.0, 0.0], atol=1e-12)


def test_policy_b_resamples_goal_and_caps_speed():
    m = build_maze(1)
    rng = np.random.default_rng(0)
    pose = np.array([0.5, 0.5, 0.0])
    action, goal = policy_step(m, pose, "B", (0, 0), rng)
    assert goal != (0, 0)
    for mode in "AB":
        goal = None
        for _ in range(300):
            pose = random_free_pose(m, rng)
            action, goal = policy_step(m, pose, mode, goal, rng)
            assert np.hypot(action[0], action[1]) <= 0.5 + 1e-12
    with pytest.raises(ValueError):
        policy_step(m, pose, "C", None, rng)


def test_policies_visit_the_maze_differently():
    m = build_maze(1)
    counts = []
    for mode in "AB":
        d = generate_dataset(m, mode, 40, 100, seed=5)
        cells = np.floor(d.states[..., 0]).astype(int) + m.width * np.floor(d.states[..., 1]).astype(int)
        counts.append(np.bincount(cells.ravel(), minlength=m.width * m.height))
    table = np.array(counts, dtype=float)
    table = table[:, table.sum(axis=0) > 0]
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
    chi2 = ((table - expected) ** 2 / expected).sum()
    dof = table.shape[1] - 1
    # the 0.999 quantile of chi2 with ~50 dof is about 87
    assert chi2 > 2 * dof + 6 * np.sqrt(2 * dof)


def test_generate_dataset_is_deterministic_and_free():
    m = build_maze(1)
    a = generate_dataset(m, "A", 2, 5, seed=9)
    b = generate_dataset(m, "A", 2, 5, seed=9)
    np.testing.assert_array_equal(a.observations, b.observations)
    np.testing.assert_array_equal(a.states, b.states)
    assert all(m.is_free(s[:2]) for s in a.states.reshape(-1, 3))
    np.testing.assert_array_equal(a.actions[:, 0], 0.0)
