"""Tensor files for the CLI: a flat little-endian binary plus a JSON sidecar.

``images.bin`` holds the raw values; ``images.bin.json`` describes them::

    {"dtype": "float32", "shape": [1797, 1, 8, 8], "labels": [0, 1, ...]}

``labels`` is optional (inference inputs do not need it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPES = {"float32": "<f4", "float64": "<f8", "int8": "i1"}


@dataclass
class TensorFile:
    values: np.ndarray
    labels: np.ndarray | None = None


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_tensor(path, values, labels=None, dtype: str = "float32") -> None:
    values = np.asarray(values)
    meta = {"dtype": dtype, "shape": list(values.shape)}
    if labels is not None:
        labels = np.asarray(labels).reshape(-1)
        if len(labels) != values.shape[0]:
            raise ValueError(f"{len(labels)} labels for {values.shape[0]} samples")
        meta["labels"] = [int(v) for v in labels]
    Path(path).write_bytes(values.astype(DTYPES[dtype]).tobytes())
    sidecar_path(path).write_text(json.dumps(meta) + "\n")


def load_tensor(path) -> TensorFile:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    if not isinstance(meta, dict) or "shape" not in meta:
        raise ValueError(f"sidecar {side} has no shape")
    dtype = meta.get("dtype", "float32")
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    shape = tuple(int(d) for d in meta["shape"])
    raw = np.frombuffer(path.read_bytes(), dtype=DTYPES[dtype])
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{path} holds {raw.size} values but the sidecar shape {shape} needs "
                         f"{int(np.prod(shape))}")
    labels = meta.get("labels")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != shape[0]:
            raise ValueError(f"{len(labels)} labels for {shape[0]} samples")
    return TensorFile(raw.reshape(shape).astype(np.float64), labels)


def export_digits(path) -> None:
    """Write sklearn's 8x8 digits (scaled to [0, 1], NCHW) in this format."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    save_tensor(path, digits.images[:, None, :, :] / 16.0, digits.target)
