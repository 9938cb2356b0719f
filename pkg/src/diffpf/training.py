"""Generic gradient-descent stage with early stopping, shared by both estimators."""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import NumericError
from .layers import clip_by_global_norm
from .optim import AdamState, EarlyStopping, adam_step

log = logging.getLogger(__name__)

METRIC_FIELDS = ("stage", "step", "train_loss", "val_loss", "grad_norm", "best")


def group_norms(grads: dict[str, np.ndarray]) -> dict[str, float]:
    """Gradient norm per model prefix (``f``, ``h``, ...)."""
    acc: dict[str, float] = {}
    for name, g in grads.items():
        key = name.split("/", 1)[0]
        acc[key] = acc.get(key, 0.0) + float(np.sum(g * g))
    return {k: float(np.sqrt(v)) for k, v in acc.items()}


def run_stage(
    name: str,
    params: dict[str, Tensor],
    train_loss: Callable[[np.random.Generator], Tensor],
    val_loss: Callable[[], float],
    rng: np.random.Generator,
    *,
    lr: float,
    max_steps: int,
    eval_every: int,
    patience: int,
    clip_norm: float = 1000.0,
    metrics: list | None = None,
) -> dict:
    """Optimize ``params`` with Adam, validating every ``eval_every`` steps.

    The parameters with the best validation loss are restored on exit.
    Returns a summary with the best and final validation losses.
    """
    adam = AdamState(lr=lr)
    stopper = EarlyStopping(patience)
    best = {k: p.data.copy() for k, p in params.items()}
    first = val_loss()
    stopper.update(first, 0)
    if metrics is not None:
        metrics.append(dict(stage=name, step=0, train_loss="", val_loss=first, grad_norm="", best=1))
    window, norms = [], []
    final_val = first
    for it in range(1, max_steps + 1):
        loss = train_loss(rng)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"stage {name!r}: non-finite training loss at step {it}")
        grads = ad.gradients(loss, params)
        grads, norm = clip_by_global_norm(grads, clip_norm)
        adam_step(params, grads, adam)
        window.append(value)
        norms.append(norm)
        if it % eval_every == 0 or it == max_steps:
            final_val = val_loss()
            if not np.isfinite(final_val):
                raise NumericError(f"stage {name!r}: non-finite validation loss at step {it}")
            improved = stopper.update(final_val, it)
            if improved:
                best = {k: p.data.copy() for k, p in params.items()}
            if metrics is not None:
                metrics.append(
                    dict(
                        stage=name, step=it, train_loss=float(np.mean(window)),
                        val_loss=final_val, grad_norm=float(np.mean(norms)), best=int(improved),
                    )
                )
            log.info("%s step %d train %.4f val %.4f", name, it, np.mean(window), final_val)
            window, norms = [], []
            if stopper.should_stop:
                break
    for k, p in params.items():
        p.data[...] = best[k]
    return {"best_val": stopper.best_score, "best_step": stopper.best_round, "final_val": final_val}
