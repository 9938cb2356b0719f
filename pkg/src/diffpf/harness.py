"""Training, evaluation and the experiment grids behind the command line."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import parameter
from .baseline import RecurrentBaseline
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Dataset, round_sig, concat, read_dataset
from .estimators import DifferentiableParticleFilter
from .exceptions import DataError, NumericError
from .filter import estimate
from .losses import scaled_distance
from .models import DPFModels
from .training import METRIC_FIELDS

CSV_FORMAT_VERSION = 1


@dataclass
class EvalReport:
    error_rate: float
    per_step: list[float]
    mean_distance: float
    n_episodes: int
    n_particles: int | None
    seed: int
    config: dict = field(default_factory=dict)
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- estimators


def build_dpf(cfg: TrainConfig, scheme: str | None = None, seed: int | None = None):
    return DifferentiableParticleFilter(
        scheme=scheme or cfg.scheme,
        n_train_particles=cfg.n_train_particles, n_test_particles=cfg.n_test_particles,
        seq_len=cfg.seq_len, gamma=cfg.gamma, batch_size=cfg.batch_size,
        ind_batch_size=cfg.ind_batch_size, lr=cfg.lr, e2e_lr=cfg.e2e_lr or None,
        patience=cfg.patience, eval_every=cfg.eval_every, ind_steps=cfg.ind_steps,
        e2e_steps=cfg.e2e_steps,
        likelihood_steps=cfg.likelihood_steps or None, use_known_dynamics=cfg.use_known_dynamics,
        motion_samples=cfg.motion_samples, proposer_samples=cfg.proposer_samples,
        motion_bandwidth=cfg.motion_bandwidth, proposer_bandwidth=cfg.proposer_bandwidth,
        e2e_bandwidth=cfg.e2e_bandwidth, hidden=cfg.hidden, encoding_dim=cfg.encoding_dim,
        likelihood_hidden=cfg.likelihood_hidden, pose_octaves=cfg.pose_octaves,
        val_fraction=cfg.val_fraction, random_state=cfg.seed if seed is None else seed,
    )


def build_baseline(cfg: TrainConfig, seed: int | None = None) -> RecurrentBaseline:
    return RecurrentBaseline(
        seq_len=cfg.seq_len, batch_size=cfg.baseline_batch_size, lr=cfg.baseline_lr,
        patience=cfg.patience, eval_every=cfg.eval_every, max_steps=cfg.baseline_steps,
        encoding_dim=cfg.encoding_dim, hidden=cfg.hidden, lstm_hidden=cfg.lstm_hidden,
        fc_hidden=cfg.fc_hidden, val_fraction=cfg.val_fraction,
        random_state=cfg.seed if seed is None else seed,
    )


def load_estimator(path):
    """Load either estimator type from a checkpoint file."""
    _, _, meta = load_checkpoint(path)
    kind = meta.get("estimator")
    if kind == "dpf":
        return DifferentiableParticleFilter.load(path)
    if kind == "baseline":
        return RecurrentBaseline.load(path)
    raise DataError(f"{path}: unknown estimator type {kind!r}")


def _datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset | None]:
    if not cfg.train_data:
        raise DataError("train_data is not set")
    train = read_dataset(cfg.train_data)
    val = read_dataset(cfg.val_data) if cfg.val_data else None
    return train, val


# ---------------------------------------------------------------- metrics CSV


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_text(rows: list[dict], fields, cfg: TrainConfig, kind: str) -> str:
    """CSV with a leading comment line carrying kind, format version and config hash."""
    buf = io.StringIO()
    buf.write(f"# diffpf {kind} format_version={CSV_FORMAT_VERSION} config_hash={cfg.hash()}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_fmt(row.get(f, "")) for f in fields])
    return buf.getvalue()


def write_csv(path, rows, fields, cfg: TrainConfig, kind: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(rows, fields, cfg, kind))


def read_csv(path) -> tuple[dict, list[dict]]:
    """Returns (header fields, rows) of a file written by :func:`write_csv`."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        rows = list(csv.DictReader(fh))
    header = dict(tok.split("=", 1) for tok in first.split() if "=" in tok)
    return header, rows


# ---------------------------------------------------------------- train / evaluate


def _fit_guarded(est, snapshot_path, *args, **kwargs):
    try:
        return est.fit(*args, **kwargs)
    except NumericError:
        params = est.models_.params if hasattr(est, "models_") else getattr(est, "net_", None).params
        save_checkpoint(snapshot_path, params, meta={"diagnostic": True, "metrics": est.metrics_})
        raise


def train(cfg: TrainConfig, write: bool = True) -> DifferentiableParticleFilter:
    """Fit the particle filter described by ``cfg``; save checkpoint and metrics CSV."""
    X, X_val = _datasets(cfg)
    est = build_dpf(cfg)
    _fit_guarded(est, cfg.checkpoint + ".failed.npz", X, X_val=X_val)
    if write:
        est.save(cfg.checkpoint)
        write_csv(cfg.metrics, est.metrics_, METRIC_FIELDS, cfg, "metrics")
    return est


def train_baseline(cfg: TrainConfig, write: bool = True) -> RecurrentBaseline:
    X, X_val = _datasets(cfg)
    est = build_baseline(cfg)
    _fit_guarded(est, cfg.checkpoint + ".failed.npz", X, X_val=X_val)
    if write:
        est.save(cfg.checkpoint)
        write_csv(cfg.metrics, est.metrics_, METRIC_FIELDS, cfg, "metrics")
    return est


def evaluate(model, dataset: Dataset, n_particles: int | None = None, seed: int = 0) -> EvalReport:
    """Error rate of ``model`` (estimator or checkpoint path) on full test episodes.

    The scale comes from the model's training data, never from ``dataset``.
    """
    est = load_estimator(model) if isinstance(model, (str, os.PathLike)) else model
    start = time.perf_counter()
    if isinstance(est, DifferentiableParticleFilter):
        n = est.n_test_particles if n_particles is None else int(n_particles)
        pred = est.predict(dataset, n_particles=n, seed=seed)
    else:
        n = None
        pred = est.predict(dataset)
    dist = scaled_distance(pred, dataset.states, est.scale_)
    wrong = dist > 1.0
    return EvalReport(
        error_rate=float(wrong.mean()),
        per_step=[float(v) for v in wrong.mean(axis=0)],
        mean_distance=float(dist.mean()),
        n_episodes=len(dataset),
        n_particles=n,
        seed=int(seed),
        config=est.get_params(),
        wall_clock=time.perf_counter() - start,
    )


def late_error_rate(report: EvalReport, after: int = 25) -> float:
    """Mean error rate over steps t > ``after`` (steps numbered from 1)."""
    return float(np.mean(report.per_step[after:]))


# ---------------------------------------------------------------- experiments


def _subsample(dataset: Dataset, n: int, rng: np.random.Generator) -> Dataset:
    if n > len(dataset):
        raise DataError(f"requested {n} episodes but the dataset has {len(dataset)}")
    return dataset.subset(np.sort(rng.choice(len(dataset), size=n, replace=False)))


def _fit_dpf_schemes(cfg, schemes, X, X_val, seed):
    """Fitted models for each scheme; ``ind+e2e`` continues from the ``ind`` model when both run."""
    fitted = {}
    if "ind" in schemes and "ind+e2e" in schemes:
        est = build_dpf(cfg, "ind", seed).fit(X, X_val=X_val)
        fitted["ind"] = _frozen_copy(est)
        est.set_params(scheme="e2e", warm_start=True).fit(X, X_val=X_val)
        fitted["ind+e2e"] = est
    for scheme in schemes:
        if scheme not in fitted:
            fitted[scheme] = build_dpf(cfg, scheme, seed).fit(X, X_val=X_val)
    return fitted


def _frozen_copy(est: DifferentiableParticleFilter) -> DifferentiableParticleFilter:
    clone = DifferentiableParticleFilter(**est.get_params())
    params = {k: parameter(p.data.copy(), k) for k, p in est.models_.params.items()}
    clone.models_ = DPFModels.from_checkpoint(params, est.models_.meta())
    clone.scale_, clone.maze_id_, clone.K_ = est.scale_.copy(), est.maze_id_, est.K_
    clone.metrics_, clone.stages_ = list(est.metrics_), dict(est.stages_)
    return clone


CURVE_FIELDS = ("maze", "scheme", "n_episodes", "seed", "error_rate")


def learning_curve(cfg: TrainConfig) -> list[dict]:
    """Train every (scheme, size, seed) cell on a random subset and test on a fixed set."""
    full = read_dataset(cfg.train_data)
    test = read_dataset(cfg.test_data)
    X_val = read_dataset(cfg.val_data) if cfg.val_data else None
    for n in cfg.sizes:
        if n > len(full):
            raise DataError(f"size {n} exceeds the {len(full)} available episodes")
    rows = []
    for n in cfg.sizes:
        for seed in cfg.seeds:
            X = _subsample(full, n, np.random.default_rng([seed, n]))
            fitted = _fit_dpf_schemes(cfg, cfg.schemes, X, X_val, seed)
            for scheme in cfg.schemes:
                rep = evaluate(fitted[scheme], test, cfg.n_test_particles, seed)
                rows.append(dict(maze=cfg.maze, scheme=scheme, n_episodes=n, seed=seed,
                                 error_rate=rep.error_rate))
    order = {s: i for i, s in enumerate(cfg.schemes)}
    rows.sort(key=lambda r: (order[r["scheme"]], r["n_episodes"], r["seed"]))
    return rows


CROSS_FIELDS = ("method", "train_policy", "test_policy", "seed", "error_rate")


def policy_mix(a: Dataset, b: Dataset, n: int, rng: np.random.Generator) -> Dataset:
    """Equal split by episode count: ``n // 2`` from ``a`` and the rest from ``b``."""
    return concat([_subsample(a, n // 2, rng), _subsample(b, n - n // 2, rng)])


def cross_policy(cfg: TrainConfig) -> list[dict]:
    """Train on A, B and an even A+B mix, test each model on both policies."""
    paths = dict(A=cfg.train_data_a, B=cfg.train_data_b)
    tests = dict(A=cfg.test_data_a, B=cfg.test_data_b)
    for key, path in {**paths, **{f"test {k}": v for k, v in tests.items()}}.items():
        if not path:
            raise DataError(f"dataset for policy {key} is not set")
    pools = {k: read_dataset(v) for k, v in paths.items()}
    tests = {k: read_dataset(v) for k, v in tests.items()}
    rows = []
    for seed in cfg.seeds:
        for train_policy in ("A", "B", "A+B"):
            rng = np.random.default_rng([seed, 17])
            if train_policy == "A+B":
                X = policy_mix(pools["A"], pools["B"], cfg.n_episodes, rng)
            else:
                X = _subsample(pools[train_policy], cfg.n_episodes, rng)
            for method in cfg.methods:
                if method == "dpf":
                    est = build_dpf(cfg, seed=seed).fit(X)
                elif method == "baseline":
                    est = build_baseline(cfg, seed).fit(X)
                else:
                    raise DataError(f"unknown method {method!r}")
                for test_policy in ("A", "B"):
                    rep = evaluate(est, tests[test_policy], cfg.n_test_particles, seed)
                    rows.append(dict(method=method, train_policy=train_policy,
                                     test_policy=test_policy, seed=seed, error_rate=rep.error_rate))
    return rows


# ---------------------------------------------------------------- belief dump


def dump_belief(model, dataset: Dataset, episode: int, out, n_particles: int | None = None,
                seed: int = 0) -> int:
    """Write one JSON line per filter step of ``episode``; returns the number of steps."""
    est = load_estimator(model) if isinstance(model, (str, os.PathLike)) else model
    if not isinstance(est, DifferentiableParticleFilter):
        raise DataError("belief dumps need a particle filter checkpoint")
    if not 0 <= episode < len(dataset):
        raise DataError(f"episode {episode} out of range (dataset has {len(dataset)})")
    ep = dataset.subset([episode])
    _, beliefs = est.filter(ep, n_particles=n_particles, seed=seed, keep_beliefs=True)
    beliefs = beliefs[0]
    header = {
        "format_version": CSV_FORMAT_VERSION, "kind": "belief", "maze_id": dataset.maze_id,
        "episode": int(episode), "n_particles": beliefs[0].n, "seed": int(seed), "T": len(beliefs),
    }
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for t, bel in enumerate(beliefs, 1):
            rec = {
                "t": t,
                "estimate": round_sig(estimate(bel)[0]),
                "state": round_sig(ep.states[0, t - 1]),
                "particles": round_sig(bel.particles.data[0]),
                "weights": round_sig(bel.weights.data[0]),
            }
            fh.write(json.dumps(rec) + "\n")
    return len(beliefs)
