import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffpf import autodiff as ad
from diffpf.autodiff import Tensor
from diffpf.data import generate_dataset, transitions
from diffpf.exceptions import DegenerateScaleError, UsageError
from diffpf.filter import FilterConfig
from diffpf.losses import (
    compute_scale, dynamics_mse_loss, e2e_loss, error_rate, likelihood_contrastive_loss,
    mixture_log_density, motion_loss, proposer_loss, scaled_distance,
)
from diffpf.maze import NoiseSpec, build_maze
from diffpf.models import MIN_LIKELIHOOD, DPFModels, ModelConfig
from diffpf.optim import AdamState, adam_step

from conftest import check_gradients, replay_resampling

PEAK_LOG_DENSITY = -1.5 * np.log(2 * np.pi)  # about -2.7568


def tiny_models(known=True, seed=0, width=10, height=5):
    cfg = ModelConfig(K=5, encoding_dim=8, hidden=8, sampler_hidden=8, likelihood_hidden=8,
                      pose_octaves=1, use_known_dynamics=known)
    m = DPFModels(cfg, width, height, rng=np.random.default_rng(seed))
    m.set_statistics([0.3, 0.3, 0.2], [0.2, 0.01, 0.1])
    return m


def zero_group(models, prefix):
    for name, p in models.group(prefix).items():
        p.data[...] = 0.0


# ---------------------------------------------------------------- scale


def test_constant_trajectory_has_degenerate_scale():
    with pytest.raises(DegenerateScaleError, match="degenerate scale"):
        compute_scale(np.zeros((2, 5, 3)))


def test_straight_line_scale_is_floored():
    states = np.stack([np.arange(6.0), np.zeros(6), np.zeros(6)], axis=1)
    np.testing.assert_allclose(compute_scale(states), [1.0, 1e-6, 1e-6])


def test_scale_wraps_heading():
    states = np.array([[0, 0, np.pi - 0.1], [0, 0, -np.pi + 0.1]])
    assert compute_scale(states)[2] == pytest.approx(0.2)


# ---------------------------------------------------------------- density


def test_single_particle_peak():
    logp = mixture_log_density(np.zeros((1, 3)), np.ones(1), np.zeros(3), np.ones(3))
    assert logp.item() == pytest.approx(PEAK_LOG_DENSITY, abs=1e-12)
    assert PEAK_LOG_DENSITY == pytest.approx(-2.7568, abs=1e-4)


def test_two_particle_density_matches_direct_evaluation():
    particles = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    logp = mixture_log_density(particles, np.array([0.5, 0.5]), np.zeros(3), np.ones(3))
    gauss = lambda r2: (2 * np.pi) ** -1.5 * np.exp(-0.5 * r2)
    assert np.exp(logp.item()) == pytest.approx(0.5 * gauss(0.0) + 0.5 * gauss(4.0), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_density_symmetries(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(7, 3))
    w = rng.dirichlet(np.ones(7))
    s = rng.normal(size=3)
    scale = rng.uniform(0.2, 2.0, 3)
    base = mixture_log_density(p, w, s, scale).item()
    shift = np.array([rng.normal(), rng.normal(), 0.0])
    assert mixture_log_density(p + shift, w, s + shift, scale).item() == pytest.approx(base, abs=1e-9)
    perm = rng.permutation(7)
    assert mixture_log_density(p[perm], w[perm], s, scale).item() == pytest.approx(base, abs=1e-9)
    # linear in the weights: density of a blend is the blend of densities
    v = rng.dirichlet(np.ones(7))
    dv = np.exp(mixture_log_density(p, v, s, scale).item())
    blend = np.exp(mixture_log_density(p, 0.3 * w + 0.7 * v, s, scale).item())
    assert blend == pytest.approx(0.3 * np.exp(base) + 0.7 * dv, rel=1e-9)


def test_density_handles_wrapped_heading():
    near = mixture_log_density(np.array([[0, 0, np.pi - 0.05]]), np.ones(1), [0, 0, -np.pi + 0.05], np.ones(3))
    direct = mixture_log_density(np.array([[0, 0, 0.0]]), np.ones(1), [0, 0, 0.1], np.ones(3))
    assert near.item() == pytest.approx(direct.item(), abs=1e-12)


# ---------------------------------------------------------------- motion / dynamics


def test_motion_loss_peak_with_silent_sampler():
    m = tiny_models()
    zero_group(m, "f/")
    rng = np.random.default_rng(0)
    prev = np.array([[2.0, 2.0, 0.3], [4.0, 1.0, -1.0]])
    act = np.array([[0.4, 0.0, 0.1], [0.2, 0.0, -0.3]])
    nxt = np.stack([m.dynamics(prev[i], act[i]).data for i in range(2)])
    loss = motion_loss(m, prev, act, nxt, 10, np.ones(3), rng)
    assert loss.item() == pytest.approx(-PEAK_LOG_DENSITY, abs=1e-9)
    # a batch of one equals the single transition
    one = motion_loss(m, prev[:1], act[:1], nxt[:1], 10, np.ones(3), rng)
    assert one.item() == pytest.approx(-PEAK_LOG_DENSITY, abs=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_motion_loss_decreases_with_training(seed):
    maze = build_maze(1)
    data = generate_dataset(maze, "A", 20, 30, NoiseSpec(sigma_a=0.1), seed=seed)
    prev, act, nxt = transitions(data)
    scale = compute_scale(data.states)
    m = tiny_models(seed=seed)
    m.set_statistics(scale, np.abs(act).mean(0) + 1e-3)
    params = m.group("f/")
    state = AdamState(lr=3e-3)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(100):
        idx = rng.integers(len(prev), size=32)
        loss = motion_loss(m, prev[idx], act[idx], nxt[idx], 50, scale, rng, 0.05)
        losses.append(loss.item())
        adam_step(params, ad.gradients(loss, params), state)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_dynamics_mse_examples():
    m = tiny_models(known=False)
    zero_group(m, "g/")
    prev = np.array([[2.0, 2.0, 0.0], [3.0, 1.0, 1.0]])
    act = np.zeros((2, 3))
    assert dynamics_mse_loss(m, prev, act, prev).item() == 0.0
    shifted = prev - np.array([1.0, 0.0, 0.0])
    assert dynamics_mse_loss(m, prev, act, shifted).item() == pytest.approx(1.0)
    a = np.array([[1.0, 1.0, np.pi - 0.1]])
    b = np.array([[1.0, 1.0, -np.pi + 0.1]])
    assert dynamics_mse_loss(m, a, np.zeros((1, 3)), b).item() == pytest.approx(0.04)
    with pytest.raises(UsageError):
        dynamics_mse_loss(tiny_models(), prev, act, prev)


# ---------------------------------------------------------------- proposer / likelihood


def _pin_proposer(m, u):
    W, b = f"k/W{len(m.k) - 1}", f"k/b{len(m.k) - 1}"
    m.params[W].data[...] = 0.0
    m.params[b].data[...] = np.arctanh(u)


def test_proposer_loss_peak_when_every_proposal_is_the_truth():
    m = tiny_models()
    _pin_proposer(m, np.array([0.2, -0.4, 0.6, 0.8]))
    target = m.decode_proposal(np.array([0.2, -0.4, 0.6, 0.8])).data
    obs = np.full((3, 5), 2.0)
    loss = proposer_loss(m, obs, np.tile(target, (3, 1)), 16, np.ones(3), np.random.default_rng(0))
    assert loss.item() == pytest.approx(-PEAK_LOG_DENSITY, abs=1e-9)


def test_proposer_loss_decreases_in_a_single_cell():
    cell = build_maze(width=1, height=1, walls=[])
    data = generate_dataset(cell, "A", 20, 20, seed=0)
    obs, states = data.observations.reshape(-1, 5), data.states.reshape(-1, 3)
    scale = compute_scale(data.states)
    m = tiny_models(width=1, height=1)
    params = m.group("h/", "k/")
    state = AdamState(lr=3e-3)
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(150):
        idx = rng.integers(len(obs), size=16)
        loss = proposer_loss(m, obs[idx], states[idx], 20, scale, rng, 1.0)
        losses.append(loss.item())
        adam_step(params, ad.gradients(loss, params), state)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def _pin_likelihood(m, value):
    last = len(m.l) - 1
    m.params[f"l/W{last}"].data[...] = 0.0
    p = (value - MIN_LIKELIHOOD) / (1 - MIN_LIKELIHOOD)
    m.params[f"l/b{last}"].data[...] = np.log(p / (1 - p))


def test_contrastive_loss_at_one_half():
    m = tiny_models()
    _pin_likelihood(m, 0.5)
    rng = np.random.default_rng(0)
    loss = likelihood_contrastive_loss(m, rng.uniform(0, 5, (6, 5)), rng.uniform(0, 5, (6, 3)))
    assert loss.item() == pytest.approx(2 * np.log(2), abs=1e-9)
    assert 2 * np.log(2) == pytest.approx(1.386, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_contrastive_loss_finite_for_random_parameters(seed, gain):
    m = tiny_models(seed=seed)
    for p in m.params.values():
        p.data[...] = np.random.default_rng(seed).normal(scale=gain, size=p.shape)
    rng = np.random.default_rng(seed + 1)
    loss = likelihood_contrastive_loss(m, rng.uniform(0, 5, (4, 5)), rng.uniform(0, 5, (4, 3)))
    assert np.isfinite(loss.item())


def test_contrastive_loss_finite_at_the_weight_floor():
    m = tiny_models()
    m.params[f"l/b{len(m.l) - 1}"].data[...] = -1e6
    rng = np.random.default_rng(0)
    loss = likelihood_contrastive_loss(m, rng.uniform(0, 5, (4, 5)), rng.uniform(0, 5, (4, 3)))
    assert loss.item() == pytest.approx(-np.log(MIN_LIKELIHOOD) - np.log(1 - MIN_LIKELIHOOD))


def test_contrastive_loss_needs_two_samples():
    with pytest.raises(ValueError):
        likelihood_contrastive_loss(tiny_models(), np.ones((1, 5)), np.ones((1, 3)))


# ---------------------------------------------------------------- end to end


def _subsequences(L=4, B=3, seed=0):
    data = generate_dataset(build_maze(1), "A", B, L, seed=seed)
    return data.observations, data.actions, data.states


def test_length_one_e2e_is_the_proposal_density():
    m = tiny_models()
    o, a, s = (x[:, :1] for x in _subsequences(L=2))
    cfg = FilterConfig(12, 0.7)
    scale = np.array([0.3, 0.3, 0.2])
    e2e = e2e_loss(m, o, a, s, cfg, scale, np.random.default_rng(5))
    prop = proposer_loss(m, o[:, 0], s[:, 0], 12, scale, np.random.default_rng(5))
    assert e2e.item() == pytest.approx(prop.item(), abs=1e-12)


def test_e2e_loss_ignores_likelihood_scale(monkeypatch):
    m = tiny_models()
    o, a, s = _subsequences(L=5)
    cfg = FilterConfig(10, 0.7)
    scale = np.array([0.3, 0.3, 0.2])
    base = e2e_loss(m, o, a, s, cfg, scale, np.random.default_rng(1)).item()
    original = DPFModels.likelihood
    monkeypatch.setattr(DPFModels, "likelihood", lambda self, e, x: original(self, e, x) * 2.0)
    doubled = e2e_loss(m, o, a, s, cfg, scale, np.random.default_rng(1)).item()
    assert doubled == pytest.approx(base, abs=1e-12)


def _frozen(fn, seed):
    return lambda: fn(np.random.default_rng(seed))


def jittered(known=True, seed=0):
    """Tiny models with non-zero biases, so no unit sits exactly on a relu kink."""
    m = tiny_models(known=known, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for p in m.params.values():
        p.data += rng.normal(scale=0.1, size=p.shape)
    return m


def loss_gradient_cases():
    """name -> builder(seed) returning (fn, params) with frozen randomness."""
    scale = np.array([0.3, 0.3, 0.2])
    tiny_models = jittered

    def motion(seed):
        m = tiny_models(seed=seed)
        r = np.random.default_rng(seed)
        prev = np.column_stack([r.uniform(1, 9, 4), r.uniform(1, 4, 4), r.uniform(-3, 3, 4)])
        act = np.column_stack([r.uniform(0, 0.5, 4), np.zeros(4), r.uniform(-0.3, 0.3, 4)])
        nxt = prev + r.normal(scale=0.1, size=(4, 3))
        return _frozen(lambda g: motion_loss(m, prev, act, nxt, 8, scale, g), seed), m.group("f/")

    def dynamics(seed):
        m = tiny_models(known=False, seed=seed)
        r = np.random.default_rng(seed)
        prev = np.column_stack([r.uniform(1, 9, 4), r.uniform(1, 4, 4), r.uniform(-3, 3, 4)])
        act = r.normal(scale=0.2, size=(4, 3))
        nxt = prev + r.normal(scale=0.1, size=(4, 3))
        return (lambda: dynamics_mse_loss(m, prev, act, nxt)), m.group("g/")

    def proposer(seed):
        m = tiny_models(seed=seed)
        r = np.random.default_rng(seed)
        obs = r.uniform(0, 5, (3, 5))
        st_ = np.column_stack([r.uniform(0, 10, 3), r.uniform(0, 5, 3), r.uniform(-3, 3, 3)])
        return _frozen(lambda g: proposer_loss(m, obs, st_, 8, scale, g), seed), m.group("h/", "k/")

    def contrastive(seed):
        m = tiny_models(seed=seed)
        r = np.random.default_rng(seed)
        obs = r.uniform(0, 5, (4, 5))
        st_ = np.column_stack([r.uniform(0, 10, 4), r.uniform(0, 5, 4), r.uniform(-3, 3, 4)])
        return (lambda: likelihood_contrastive_loss(m, obs, st_)), m.group("h/", "l/")

    def e2e(seed):
        m = tiny_models(seed=seed)
        o, a, s = _subsequences(L=3, B=2, seed=seed)
        cfg = FilterConfig(8, 0.7)
        return replay_resampling(_frozen(lambda g: e2e_loss(m, o, a, s, cfg, scale, g), seed)), m.params

    return {"motion": motion, "dynamics": dynamics, "proposer": proposer,
            "contrastive": contrastive, "e2e": e2e}


@pytest.mark.parametrize("name", ["motion", "dynamics", "proposer", "contrastive", "e2e"])
def test_loss_gradients_match_finite_differences(name):
    build = loss_gradient_cases()[name]
    skipped = []
    for seed in range(5):
        fn, params = build(seed)
        err = check_gradients(fn, params, per_param=4, rng=np.random.default_rng(seed), skipped=skipped)
        assert err < 1e-3, f"{name} seed {seed}: {err:.2e}"
    assert sum(skipped) <= 0.05 * 5 * 4 * len(params)


# ---------------------------------------------------------------- metric


def test_error_rate_examples():
    truth = np.zeros((3, 3))
    est = np.array([[0.5, 0, 0], [1.5, 0, 0], [3.0, 0, 0]])
    assert error_rate(est, truth, np.ones(3)) == pytest.approx(2 / 3)
    assert error_rate(truth, truth, np.ones(3)) == 0.0
    with pytest.raises(ValueError):
        error_rate(est[:2], truth, np.ones(3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_error_rate_translation_invariant_and_monotone(seed):
    rng = np.random.default_rng(seed)
    est = rng.normal(size=(20, 3))
    tru = rng.normal(size=(20, 3))
    scale = rng.uniform(0.5, 2.0, 3)
    base = error_rate(est, tru, scale)
    shift = np.array([rng.normal() * 5, rng.normal() * 5, 0.0])
    assert error_rate(est + shift, tru + shift, scale) == base
    i = rng.integers(20)
    far = est.copy()
    far[i, :2] = tru[i, :2] + 10 * scale[:2]
    assert error_rate(far, tru, scale) >= base
    assert scaled_distance(far, tru, scale)[i] > 1
