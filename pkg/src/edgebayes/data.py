"""Synthetic two-class datasets and the CSV dataset format.

CSV files have a header ``x0,...,x{D-1},label``; label ``-1`` marks
unlabeled (e.g. out-of-distribution) rows.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import DataError, ParameterError

UNLABELED = -1


def make_moons(n: int, noise: float, rng) -> Tuple[np.ndarray, np.ndarray]:
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    X = np.concatenate([np.column_stack([np.cos(t0), np.sin(t0)]),
                        np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        X = X + rng.normal(0.0, noise, X.shape)
    return X, y


def make_blobs(n: int, noise: float, rng) -> Tuple[np.ndarray, np.ndarray]:
    """Two isotropic Gaussians at (-1.5, 0) and (1.5, 0) with sd ``noise``."""
    n0 = (n + 1) // 2
    n1 = n - n0
    centers = np.array([[-1.5, 0.0], [1.5, 0.0]])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    X = centers[y] + rng.normal(0.0, noise, (n, 2))
    return X, y


def shift(X, angle: float = 0.0, offset=(0.0, 0.0)) -> np.ndarray:
    """Rotate 2-D points about the origin by ``angle`` radians, then translate."""
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return np.asarray(X) @ R.T + np.asarray(offset, dtype=np.float64)


def gen_synthetic(task: str, n: int, noise: float, seed, ood_shift: Optional[tuple] = None):
    """Return ``(X, y)``; with ``ood_shift=(angle, dx, dy)`` the points are moved
    off-distribution and labeled ``-1``."""
    if n < 2:
        raise ParameterError("need at least two points")
    rng = np.random.default_rng(seed)
    if task == "moons":
        X, y = make_moons(n, noise, rng)
    elif task == "blobs":
        X, y = make_blobs(n, noise, rng)
    else:
        raise ParameterError(f"unknown task {task!r}")
    if ood_shift is not None:
        angle, dx, dy = ood_shift
        X = shift(X, angle, (dx, dy))
        y = np.full(n, UNLABELED, dtype=np.int64)
    return X, y


def to_csv(X, y) -> str:
    X = np.asarray(X, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(X.shape[1])] + ["label"])
    for row, lab in zip(X, y):
        w.writerow([repr(float(v)) for v in row] + [int(lab)])
    return buf.getvalue()


def write_csv(path, X, y) -> None:
    Path(path).write_text(to_csv(X, y))


def read_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{path}: empty file")
    head = rows[0]
    d = len(head) - 1
    if d < 1 or head != [f"x{i}" for i in range(d)] + ["label"]:
        raise DataError(f"{path}: header must be x0,...,x{{D-1}},label")
    X = np.empty((len(rows) - 1, d))
    y = np.empty(len(rows) - 1, dtype=np.int64)
    for i, r in enumerate(rows[1:]):
        if len(r) != d + 1:
            raise DataError(f"{path}: row {i + 2} has {len(r)} fields, expected {d + 1}")
        try:
            X[i] = [float(v) for v in r[:d]]
            y[i] = int(r[d])
        except ValueError:
            raise DataError(f"{path}: row {i + 2} is not numeric") from None
    return X, y


def split(X, y, test_fraction: float, seed):
    """Shuffled train/test split."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(X))
    n_test = int(round(test_fraction * len(X)))
    te, tr = idx[:n_test], idx[n_test:]
    return X[tr], y[tr], X[te], y[te]
