"""Checkpoint container.

A checkpoint is an ``.npz`` archive: every parameter is stored under its own
name as a little-endian float64 array (the shape travels with the array),
Adam moments live under ``adam.m/<name>`` and ``adam.v/<name>``, and a JSON
document under ``__meta__`` carries the format version, the Adam step
counter and hyperparameters, and any caller metadata.
"""

from __future__ import annotations

import io
import json
import os
from typing import Any

import numpy as np

from .autodiff import Tensor, parameter
from .exceptions import DataError
from .optim import AdamState

FORMAT_VERSION = 1
_META = "__meta__"


def save_checkpoint(
    path: str | os.PathLike,
    params: dict[str, Tensor],
    adam: AdamState | None = None,
    meta: dict[str, Any] | None = None,
) -> None:
    arrays = {name: np.asarray(p.data, dtype="<f8") for name, p in params.items()}
    header: dict[str, Any] = {"format_version": FORMAT_VERSION, "meta": meta or {}}
    if adam is not None:
        header["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "t": adam.t,
        }
        for name in adam.m:
            arrays[f"adam.m/{name}"] = np.asarray(adam.m[name], dtype="<f8")
            arrays[f"adam.v/{name}"] = np.asarray(adam.v[name], dtype="<f8")
    arrays[_META] = np.array(json.dumps(header, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Tensor], AdamState | None, dict]:
    """Returns ``(params, adam_state_or_None, meta)``."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    with archive:
        if _META not in archive.files:
            raise DataError(f"{path} is not a diffpf checkpoint (missing header)")
        header = json.loads(str(archive[_META]))
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
        params, m, v = {}, {}, {}
        for key in archive.files:
            if key == _META:
                continue
            arr = np.array(archive[key], dtype=np.float64)
            if key.startswith("adam.m/"):
                m[key[len("adam.m/"):]] = arr
            elif key.startswith("adam.v/"):
                v[key[len("adam.v/"):]] = arr
            else:
                params[key] = parameter(arr, name=key)
    adam = None
    if "adam" in header:
        adam = AdamState(**header["adam"], m=m, v=v)
    return params, adam, header["meta"]
