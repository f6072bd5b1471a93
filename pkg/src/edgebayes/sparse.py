"""COO matrices, the shared-index ensemble (SIE) format and storage accounting.

Per-member COO stores ``(row, col, value)`` for each of ``N`` non-zeros in
each of ``S`` members: ``3NS`` words. SIE stores the two index arrays once
and ``S`` value arrays: ``2N + NS`` words.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError, ParameterError, StructureError
from .nn import Tensor

INDEX_BYTES = 4
VALUE_BYTES = {"f32": 4, "f16": 2, "q8": 1}

COO_PER_MEMBER = "coo"
SIE = "sie"


def _freeze(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _check_indices(rows, cols, idx_r, idx_c):
    if idx_r.shape != idx_c.shape or idx_r.ndim != 1:
        raise DimensionError("index arrays must be 1-D and of equal length")
    if idx_r.size:
        if idx_r.min() < 0 or idx_r.max() >= rows or idx_c.min() < 0 or idx_c.max() >= cols:
            raise DimensionError("index out of bounds")
        key = idx_r.astype(np.int64) * cols + idx_c
        if (np.diff(key) <= 0).any():
            raise StructureError("COO indices must be strictly sorted (row-major) and unique")


@dataclass(frozen=True)
class CooMatrix:
    rows: int
    cols: int
    idx_r: np.ndarray
    idx_c: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "idx_r", _freeze(self.idx_r, np.int64))
        object.__setattr__(self, "idx_c", _freeze(self.idx_c, np.int64))
        object.__setattr__(self, "vals", _freeze(self.vals, np.float64))
        _check_indices(self.rows, self.cols, self.idx_r, self.idx_c)
        if self.vals.shape != self.idx_r.shape:
            raise DimensionError("values and indices differ in length")

    @property
    def nnz(self) -> int:
        return int(self.idx_r.size)

    @property
    def shape(self):
        return (self.rows, self.cols)

    def same_support(self, other: "CooMatrix") -> bool:
        return (self.shape == other.shape and np.array_equal(self.idx_r, other.idx_r)
                and np.array_equal(self.idx_c, other.idx_c))


@dataclass(frozen=True)
class SharedIndexEnsembleMatrix:
    rows: int
    cols: int
    idx_r: np.ndarray
    idx_c: np.ndarray
    member_vals: np.ndarray  # (S, N)

    def __post_init__(self):
        object.__setattr__(self, "idx_r", _freeze(self.idx_r, np.int64))
        object.__setattr__(self, "idx_c", _freeze(self.idx_c, np.int64))
        vals = _freeze(self.member_vals, np.float64)
        if vals.ndim != 2 or vals.shape[0] < 1 or vals.shape[1] != self.idx_r.size:
            raise DimensionError(f"member values must be (S >= 1, {self.idx_r.size}), got {vals.shape}")
        object.__setattr__(self, "member_vals", vals)
        _check_indices(self.rows, self.cols, self.idx_r, self.idx_c)

    @property
    def nnz(self) -> int:
        return int(self.idx_r.size)

    @property
    def n_members(self) -> int:
        return self.member_vals.shape[0]

    @property
    def shape(self):
        return (self.rows, self.cols)

    def member(self, s: int) -> CooMatrix:
        return CooMatrix(self.rows, self.cols, self.idx_r, self.idx_c, self.member_vals[s])


def dense_to_coo(t, tol: float = 0.0) -> CooMatrix:
    """Keep entries with ``|x| > tol`` in row-major order."""
    a = t.to_numpy() if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    r, c = np.nonzero(np.abs(a) > tol)
    return CooMatrix(a.shape[0], a.shape[1], r, c, a[r, c])


def coo_from_mask(a, keep) -> CooMatrix:
    """COO over an explicit support; kept entries may hold exact zeros."""
    a = np.asarray(a, dtype=np.float64)
    r, c = np.nonzero(np.asarray(keep, dtype=bool))
    return CooMatrix(a.shape[0], a.shape[1], r, c, a[r, c])


def coo_to_dense(m: Union[CooMatrix, SharedIndexEnsembleMatrix], member: int = 0) -> np.ndarray:
    if isinstance(m, SharedIndexEnsembleMatrix):
        m = m.member(member)
    out = np.zeros((m.rows, m.cols))
    out[m.idx_r, m.idx_c] = m.vals
    return out


def pack_shared(members: Sequence[CooMatrix]) -> SharedIndexEnsembleMatrix:
    """Store the common support once and every member's values after it."""
    if len(members) < 1:
        raise ParameterError("need at least one member")
    first = members[0]
    for s, m in enumerate(members[1:], start=1):
        if m.shape != first.shape:
            raise StructureError(f"member {s} has shape {m.shape}, expected {first.shape}")
        if not first.same_support(m):
            n = min(first.nnz, m.nnz)
            diff = np.nonzero((first.idx_r[:n] != m.idx_r[:n]) | (first.idx_c[:n] != m.idx_c[:n]))[0]
            pos = int(diff[0]) if diff.size else n
            src = first if pos < first.nnz else m
            coord = (int(src.idx_r[pos]), int(src.idx_c[pos]))
            raise StructureError(f"member {s} support differs from member 0 at coordinate {coord}")
    vals = np.stack([m.vals for m in members])
    return SharedIndexEnsembleMatrix(first.rows, first.cols, first.idx_r, first.idx_c, vals)


def unpack(sie: SharedIndexEnsembleMatrix) -> list:
    return [sie.member(s) for s in range(sie.n_members)]


def storage_words(fmt: str, n: int, s: int) -> int:
    """Abstract word count: ``3NS`` for per-member COO, ``2N + NS`` for SIE."""
    if n < 0 or s < 1:
        raise ParameterError("need N >= 0 and S >= 1")
    if fmt == COO_PER_MEMBER:
        return 3 * n * s
    if fmt == SIE:
        return 2 * n + n * s
    raise ParameterError(f"unknown storage format {fmt!r}")


def storage_reduction(n: int, s: int) -> float:
    """Fraction of per-member COO storage saved by SIE."""
    if n == 0:
        return 0.0
    return 1.0 - storage_words(SIE, n, s) / storage_words(COO_PER_MEMBER, n, s)


def spmv(m: Union[CooMatrix, SharedIndexEnsembleMatrix], x, member: int = 0) -> np.ndarray:
    if isinstance(m, SharedIndexEnsembleMatrix):
        m = m.member(member)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.cols,):
        raise DimensionError(f"vector of length {m.cols} expected, got shape {x.shape}")
    return np.bincount(m.idx_r, weights=m.vals * x[m.idx_c], minlength=m.rows).astype(np.float64)


@dataclass(frozen=True)
class StorageAccount:
    """Byte accounting of a serialized archive.

    ``payload_bytes`` counts the weight words the storage formats argue about
    (indices and values, or dense theta). Dense bias vectors that ride along
    with sparse formats are reported separately in ``dense_bytes``.
    """

    payload_bytes: int
    header_bytes: int
    index_words: int
    value_words: int
    value_width: int
    dense_bytes: int = 0

    @property
    def logical_words(self) -> int:
        return self.index_words + self.value_words

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + self.payload_bytes + self.dense_bytes


def measure_serialized(obj, dtype: str = "f32") -> StorageAccount:
    """Serialize ``obj`` in memory and account for every byte.

    ``obj`` may be a ``CooMatrix`` sequence (per-member COO), a
    ``SharedIndexEnsembleMatrix``, or anything :func:`edgebayes.archive.encode`
    accepts.
    """
    from . import archive

    return archive.account(archive.encode(obj, dtype=dtype))


@dataclass(frozen=True)
class SparseEnsemble:
    """A posterior ensemble whose weight matrices are stored sparsely.

    ``layers[l]`` is either a list of per-member ``CooMatrix`` (format
    ``"coo"``) or one ``SharedIndexEnsembleMatrix`` (format ``"sie"``).
    Biases stay dense in ``biases`` with shape ``(S, total bias count)``.
    """

    spec: object
    fmt: str
    layers: tuple
    biases: np.ndarray
    meta: dict = None

    def __post_init__(self):
        if self.fmt not in (COO_PER_MEMBER, SIE):
            raise ParameterError(f"unknown sparse format {self.fmt!r}")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "biases", _freeze(np.atleast_2d(self.biases), np.float64))
        object.__setattr__(self, "meta", dict(self.meta or {}))
        S = self.biases.shape[0]
        for l, (ls, layer) in enumerate(zip(self.spec.layout, self.layers)):
            mats = unpack(layer) if self.fmt == SIE else list(layer)
            if len(mats) != S or any(m.shape != (ls.n_out, ls.n_in) for m in mats):
                raise StructureError(f"layer {l} does not match the architecture or member count")

    @property
    def n_members(self) -> int:
        return self.biases.shape[0]

    def layer_members(self, l: int) -> list:
        layer = self.layers[l]
        return unpack(layer) if self.fmt == SIE else list(layer)

    def nnz(self, member: int = 0) -> int:
        return sum(self.layer_members(l)[member].nnz for l in range(len(self.layers)))

    def to_thetas(self) -> np.ndarray:
        S = self.n_members
        out = np.zeros((S, self.spec.n_params))
        boff = 0
        for l, ls in enumerate(self.spec.layout):
            for s, m in enumerate(self.layer_members(l)):
                out[s, ls.w_off:ls.b_off] = coo_to_dense(m).ravel()
            out[:, ls.b_off:ls.b_off + ls.n_out] = self.biases[:, boff:boff + ls.n_out]
            boff += ls.n_out
        return out

    def to_ensemble(self):
        from .ensemble import PosteriorEnsemble

        return PosteriorEnsemble(self.spec, self.to_thetas(), self.meta)


def bias_columns(spec) -> np.ndarray:
    return np.concatenate([np.arange(ls.b_off, ls.b_off + ls.n_out) for ls in spec.layout])


def sparsify_ensemble(ensemble, keep, fmt: str) -> SparseEnsemble:
    """Store an ensemble's weights over explicit supports.

    ``keep`` is one boolean theta-mask shared by all members, or an ``(S, K)``
    array of per-member masks (``fmt="coo"`` only).
    """
    keep = np.asarray(keep, dtype=bool)
    shared = keep.ndim == 1
    if fmt == SIE and not shared:
        raise StructureError("shared-index storage needs one support for all members")
    spec, thetas = ensemble.spec, ensemble.members
    layers = []
    for ls in spec.layout:
        mats = []
        for s in range(thetas.shape[0]):
            k = keep if shared else keep[s]
            W = thetas[s, ls.w_off:ls.b_off].reshape(ls.n_out, ls.n_in)
            mats.append(coo_from_mask(W, k[ls.w_off:ls.b_off].reshape(ls.n_out, ls.n_in)))
        layers.append(pack_shared(mats) if fmt == SIE else tuple(mats))
    return SparseEnsemble(spec, fmt, layers, thetas[:, bias_columns(spec)], ensemble.meta)
