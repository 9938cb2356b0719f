import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from diffpf import DifferentiableParticleFilter, RecurrentBaseline
from diffpf.data import generate_dataset
from diffpf.exceptions import DataError
from diffpf.losses import error_rate, scaled_distance
from diffpf.maze import build_maze
from diffpf.training import METRIC_FIELDS

TINY = dict(
    n_train_particles=8, n_test_particles=20, seq_len=5, batch_size=2, ind_batch_size=4,
    eval_every=2, ind_steps=6, likelihood_steps=6, e2e_steps=4, motion_samples=4, proposer_samples=4, hidden=8,
    encoding_dim=8, sampler_hidden=8, likelihood_hidden=8, pose_octaves=1,
)


@pytest.fixture(scope="module")
def data():
    maze = build_maze(1)
    return generate_dataset(maze, "A", 10, 12, seed=0), generate_dataset(maze, "A", 3, 12, seed=50)


def params_of(est):
    return {k: v.data.copy() for k, v in est.models_.params.items()}


def test_sklearn_parameter_protocol():
    est = DifferentiableParticleFilter(**TINY)
    assert clone(est).get_params() == est.get_params()
    est.set_params(gamma=0.5)
    assert est.gamma == 0.5
    base = RecurrentBaseline(max_steps=3)
    assert clone(base).get_params() == base.get_params()


@pytest.mark.parametrize("bad", [dict(scheme="both"), dict(n_train_particles=0), dict(ind_batch_size=1),
                                 dict(motion_samples=1), dict(gamma=0.0), dict(pose_octaves=-1)])
def test_invalid_parameters(data, bad):
    with pytest.raises(ValueError):
        DifferentiableParticleFilter(**{**TINY, **bad}).fit(data[0])


def test_fit_predict_score(data):
    train, test = data
    est = DifferentiableParticleFilter(**TINY).fit(train)
    assert set(est.stages_) == {"motion", "likelihood", "proposer", "e2e"}
    assert est.K_ == 5 and est.maze_id_ == "1"
    assert all(set(row) == set(METRIC_FIELDS) for row in est.metrics_)
    for stage in est.stages_.values():
        assert stage["best_val"] <= stage["final_val"]
    pred = est.predict(test)
    assert pred.shape == test.states.shape
    assert 0.0 <= est.score(test) <= 1.0
    assert est.score(test) == 1.0 - error_rate(pred, test.states, est.scale_)


def test_learned_dynamics_adds_a_stage(data):
    est = DifferentiableParticleFilter(**{**TINY, "scheme": "ind", "use_known_dynamics": False}).fit(data[0])
    assert set(est.stages_) == {"dynamics", "motion", "likelihood", "proposer"}


def test_ind_then_e2e_equals_ind_plus_e2e(data):
    train, test = data
    both = DifferentiableParticleFilter(**TINY).fit(train)
    staged = DifferentiableParticleFilter(**{**TINY, "scheme": "ind"}).fit(train)
    staged.set_params(scheme="e2e", warm_start=True).fit(train)
    for name, value in params_of(both).items():
        np.testing.assert_array_equal(staged.models_.params[name].data, value)
    assert staged.metrics_ == both.metrics_
    np.testing.assert_array_equal(staged.predict(test), both.predict(test))


def test_fit_is_deterministic(data):
    a = DifferentiableParticleFilter(**TINY).fit(data[0])
    b = DifferentiableParticleFilter(**TINY).fit(data[0])
    assert a.metrics_ == b.metrics_
    np.testing.assert_array_equal(a.predict(data[1]), b.predict(data[1]))
    c = DifferentiableParticleFilter(**{**TINY, "random_state": 1}).fit(data[0])
    assert c.metrics_ != a.metrics_


def test_prediction_seed_controls_the_filter(data):
    est = DifferentiableParticleFilter(**TINY).fit(data[0])
    assert not np.array_equal(est.predict(data[1], seed=1), est.predict(data[1], seed=2))
    np.testing.assert_array_equal(est.predict(data[1], seed=1), est.predict(data[1], seed=1))


def test_save_load_round_trip(tmp_path, data):
    est = DifferentiableParticleFilter(**TINY).fit(data[0])
    est.save(tmp_path / "dpf.npz")
    back = DifferentiableParticleFilter.load(tmp_path / "dpf.npz")
    assert back.get_params() == est.get_params()
    np.testing.assert_array_equal(back.scale_, est.scale_)
    np.testing.assert_array_equal(back.predict(data[1]), est.predict(data[1]))
    with pytest.raises(DataError):
        RecurrentBaseline.load(tmp_path / "dpf.npz")


def test_input_checks(data):
    with pytest.raises(NotFittedError):
        DifferentiableParticleFilter(**TINY).predict(data[1])
    est = DifferentiableParticleFilter(**{**TINY, "scheme": "ind"}).fit(data[0])
    other = generate_dataset(build_maze(2), "A", 2, 12, seed=0)
    with pytest.raises(DataError):
        est.predict(other)
    with pytest.raises(DataError):
        DifferentiableParticleFilter(**{**TINY, "seq_len": 50}).fit(data[0])
    with pytest.raises(DataError):
        DifferentiableParticleFilter(**TINY).fit(data[0], X_val=other)


# ---------------------------------------------------------------- baseline


def test_baseline_fit_predict_save(tmp_path, data):
    train, test = data
    kw = dict(seq_len=5, batch_size=2, eval_every=2, max_steps=4, hidden=8, encoding_dim=8,
              lstm_hidden=8, fc_hidden=8)
    est = RecurrentBaseline(**kw).fit(train)
    pred = est.predict(test)
    assert pred.shape == test.states.shape
    assert (pred[..., 2] > -np.pi - 1e-12).all() and (pred[..., 2] <= np.pi + 1e-12).all()
    est.save(tmp_path / "b.npz")
    back = RecurrentBaseline.load(tmp_path / "b.npz")
    np.testing.assert_array_equal(back.predict(test), pred)
    again = RecurrentBaseline(**kw).fit(train)
    assert again.metrics_ == est.metrics_


def test_constant_baseline_error_rate(data):
    train, test = data
    est = RecurrentBaseline(seq_len=5, batch_size=2, eval_every=2, max_steps=1, hidden=8,
                            encoding_dim=8, lstm_hidden=8, fc_hidden=8).fit(train)
    head = len([k for k in est.net_.params if k.startswith("o/W")]) - 1
    est.net_.params[f"o/W{head}"].data[...] = 0.0
    est.net_.params[f"o/b{head}"].data[...] = [0.2, -0.4, 0.6, 0.8]
    const = est.predict(test)[0, 0]
    np.testing.assert_allclose(est.predict(test), np.broadcast_to(const, test.states.shape))
    far = scaled_distance(np.broadcast_to(const, test.states.shape), test.states, est.scale_) > 1
    assert 1.0 - est.score(test) == pytest.approx(far.mean())
