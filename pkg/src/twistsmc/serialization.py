"""Checkpoint files: named parameter stores as flat JSON arrays.

Values are written as flat lists with shape metadata. Full float repr is
used, so round-trips recover each entry to at least 1e-15 relative.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np


def params_to_jsonable(params: Mapping[str, np.ndarray]) -> dict:
    """Encode a parameter store as ``{name: {shape, data}}``."""
    out = {}
    for name, value in params.items():
        arr = np.asarray(value, dtype=float)
        out[name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    return out


def params_from_jsonable(obj: Mapping[str, dict]) -> dict[str, np.ndarray]:
    """Decode a store written by :func:`params_to_jsonable`."""
    out = {}
    for name, entry in obj.items():
        arr = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        out[name] = arr
    return out


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_text(json.dumps(params_to_jsonable(params), indent=2))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return params_from_jsonable(json.loads(Path(path).read_text()))
