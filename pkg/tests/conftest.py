import numpy as np
import pytest

from diffpf import autodiff as ad
from diffpf import filter as pf
from diffpf.data import generate_dataset
from diffpf.maze import build_maze


KINK_TOLERANCE = 1e-3


def numeric_gradient(fn, params, eps=1e-5, entries=None, kinks=None):
    """Central differences of scalar ``fn()`` with respect to entries of ``params``.

    ``entries`` maps a parameter name to the flat indices to probe; by default
    every entry is probed.  Unprobed entries are left at zero.  When ``kinks``
    is a dict, it receives per parameter the probed indices whose second
    one-sided slopes disagree (a relu switching inside the stencil), where
    central differences say nothing about the true derivative.
    """
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = range(p.data.size) if entries is None else entries[name]
        bent = []
        for k in flat:
            i = np.unravel_index(k, p.data.shape)
            old = p.data[i]
            mid = fn().item() if kinks is not None else 0.0
            p.data[i] = old + eps
            hi = fn().item()
            p.data[i] = old - eps
            lo = fn().item()
            p.data[i] = old
            g[i] = (hi - lo) / (2 * eps)
            # smooth functions have matching one-sided slopes up to O(eps * curvature)
            up, down = hi - mid, mid - lo
            if kinks is not None and abs(up - down) > KINK_TOLERANCE * (abs(up) + abs(down)) + 1e-13:
                bent.append(k)
        out[name] = g
        if kinks is not None:
            kinks[name] = bent
    return out


def relative_error(a, b, floor=1e-6):
    """Norm-relative difference; below ``floor`` the norms count as zero, since
    central differences of an O(1) function carry roundoff near 1e-11."""
    a = np.concatenate([np.ravel(v) for v in a.values()]) if isinstance(a, dict) else np.ravel(a)
    b = np.concatenate([np.ravel(v) for v in b.values()]) if isinstance(b, dict) else np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_gradients(fn, params, eps=1e-5, per_param=None, rng=None, skipped=None):
    """Norm-relative error between analytic and numeric gradients.

    With ``per_param`` set, only that many random entries of each parameter
    are compared, which keeps checks of large models affordable; probes that
    straddle a relu kink are then left out, and their count is appended to
    ``skipped`` when given.
    """
    analytic = ad.gradients(fn(), params)
    if per_param is None:
        return relative_error(analytic, numeric_gradient(fn, params, eps))
    rng = rng or np.random.default_rng(0)
    entries = {
        n: rng.choice(p.data.size, size=min(per_param, p.data.size), replace=False)
        for n, p in params.items()
    }
    kinks = {}
    numeric = numeric_gradient(fn, params, eps, entries, kinks)
    keep = {n: np.array([k for k in entries[n] if k not in kinks[n]], dtype=int) for n in params}
    if skipped is not None:
        skipped.append(sum(len(v) for v in kinks.values()))
    picked = {n: np.ravel(analytic[n])[keep[n]] for n in params}
    probed = {n: np.ravel(numeric[n])[keep[n]] for n in params}
    return relative_error(picked, probed)


def replay_resampling(fn):
    """Wrap ``fn`` so resampled particles keep the values of its first call.

    The filter detaches resampled particles, so analytic gradients treat them
    as constants.  Finite differences only agree with that when every
    perturbed evaluation reuses the same survivor arrays.
    """
    tape = []
    recorded = [False]

    def run():
        original = pf._gather
        count = [0]

        def gather(particles, idx):
            if not recorded[0]:
                tape.append(original(particles, idx))
            out = tape[count[0]]
            count[0] += 1
            return out

        pf._gather = gather
        try:
            return fn()
        finally:
            pf._gather = original
            recorded[0] = True

    return run


@pytest.fixture(scope="session")
def maze1():
    return build_maze(1)


@pytest.fixture(scope="session")
def small_dataset(maze1):
    return generate_dataset(maze1, "A", 12, 25, seed=3)


# ---------------------------------------------------------------- acceptance verdicts

_VERDICTS: dict[int, str] = {}


def record_verdict(criterion: int, ok: bool, detail: str) -> None:
    _VERDICTS[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(_VERDICTS[criterion])


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
