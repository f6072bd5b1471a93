"""BEA1 binary ensemble archives.

Layout (little-endian)::

    b"BEA1" | u32 version | u32 header length | UTF-8 JSON header | payload

Blob offsets in the header are relative to the start of the payload. Blobs
are ordered structure first (shared index arrays), then member by member, so
a reader can build the layer structure once and stream parameters into it.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ParameterError, VersionError
from .nn import DTYPES, F16, F32, Q8, MlpSpec, ParamSet, QuantParams, Tensor, dequantize, quantize
from .sparse import (COO_PER_MEMBER, INDEX_BYTES, SIE, VALUE_BYTES, CooMatrix, SharedIndexEnsembleMatrix,
                     SparseEnsemble, StorageAccount, sparsify_ensemble)

MAGIC = b"BEA1"
VERSION = 1
DENSE = "dense"
FORMATS = (DENSE, COO_PER_MEMBER, SIE)
_PREFIX = struct.Struct("<4sII")
_VALUE_NP = {F32: "<f4", F16: "<f2", Q8: "i1"}


@dataclass
class LoadTimings:
    structure_s: float
    stream_s: float


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


class _Writer:
    def __init__(self, dtype):
        if dtype not in DTYPES:
            raise ParameterError(f"unknown dtype {dtype!r}")
        self.dtype = dtype
        self.blobs, self.chunks, self.offset = [], [], 0

    def _add(self, raw: bytes, **info):
        self.blobs.append({**info, "offset": self.offset, "length": len(raw)})
        self.chunks.append(raw)
        self.offset += len(raw)

    def index(self, a, **info):
        self._add(np.asarray(a, dtype="<u4").tobytes(), kind="index", dtype="u32", count=len(a), **info)

    def values(self, a, kind="value", **info):
        t = quantize(Tensor(np.asarray(a, dtype=np.float64)), self.dtype)
        extra = {"scale": t.quant.scale} if t.quant else {}
        self._add(t.data.astype(_VALUE_NP[self.dtype]).tobytes(), kind=kind, dtype=self.dtype,
                  count=int(t.data.size), **extra, **info)


def _as_sparse(obj, fmt):
    """Bring an ensemble into the requested sparse format without losing entries."""
    if isinstance(obj, SparseEnsemble) and obj.fmt == fmt:
        return obj
    if isinstance(obj, SparseEnsemble):
        spec, S = obj.spec, obj.n_members
        keeps = np.zeros((S, spec.n_params), dtype=bool)
        for l, ls in enumerate(spec.layout):
            for s, m in enumerate(obj.layer_members(l)):
                k = np.zeros((ls.n_out, ls.n_in), dtype=bool)
                k[m.idx_r, m.idx_c] = True
                keeps[s, ls.w_off:ls.b_off] = k.ravel()
        ens = obj.to_ensemble()
    else:
        ens = obj
        keeps = ens.members != 0
    if fmt == SIE:
        keeps = keeps.any(axis=0)
    return sparsify_ensemble(ens, keeps, fmt)


def _header(w: _Writer, **fields) -> bytes:
    hdr = {**fields, "dtype": w.dtype, "index_width": INDEX_BYTES,
           "value_width": VALUE_BYTES[w.dtype], "blobs": w.blobs}
    return json.dumps(hdr, sort_keys=True, separators=(",", ":"), default=_json_default).encode()


def _finish(w: _Writer, **fields) -> bytes:
    h = _header(w, **fields)
    return _PREFIX.pack(MAGIC, VERSION, len(h)) + h + b"".join(w.chunks)


def encode(obj, fmt=None, dtype: str = F32, member_times: list = None) -> bytes:
    """Serialize an ensemble, sparse ensemble, student or bare sparse matrices.

    ``member_times``, if given, receives the wall time spent preparing each
    member's blobs (the per-model deployment pre-processing cost).
    """
    from .distill import Student
    from .ensemble import PosteriorEnsemble

    w = _Writer(dtype)
    if isinstance(obj, SharedIndexEnsembleMatrix) or (
            isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], CooMatrix)):
        return _encode_matrices(w, obj)
    if isinstance(obj, Student):
        return _encode_dense(w, obj.spec, obj.params.theta[None], "student", {}, member_times,
                             student={"method": obj.method, "provenance": obj.provenance})
    if isinstance(obj, SparseEnsemble):
        fmt = fmt or obj.fmt
    elif isinstance(obj, PosteriorEnsemble):
        fmt = fmt or DENSE
    else:
        raise ParameterError(f"cannot archive object of type {type(obj).__name__}")
    if fmt not in FORMATS:
        raise ParameterError(f"unknown storage format {fmt!r}")
    if fmt == DENSE:
        ens = obj.to_ensemble() if isinstance(obj, SparseEnsemble) else obj
        return _encode_dense(w, ens.spec, ens.members, "ensemble", ens.meta, member_times)
    return _encode_sparse(w, _as_sparse(obj, fmt), member_times)


def _spec_fields(spec):
    return {"spec": list(spec.layer_widths), "layout": [list(ls) for ls in spec.layout]}


def _encode_dense(w, spec, thetas, kind, meta, member_times, **extra):
    for s in range(thetas.shape[0]):
        t0 = time.perf_counter()
        for l, ls in enumerate(spec.layout):
            w.values(thetas[s, ls.w_off:ls.b_off], member=s, layer=l)
            w.values(thetas[s, ls.b_off:ls.b_off + ls.n_out], kind="bias", member=s, layer=l)
        if member_times is not None:
            member_times.append(time.perf_counter() - t0)
    return _finish(w, kind=kind, format=DENSE, n_members=int(thetas.shape[0]), meta=meta,
                   **_spec_fields(spec), **extra)


def _encode_sparse(w, se: SparseEnsemble, member_times):
    spec, S = se.spec, se.n_members
    boffs = np.cumsum([0] + [ls.n_out for ls in spec.layout])
    if se.fmt == SIE:
        for l, layer in enumerate(se.layers):
            w.index(layer.idx_r, layer=l, axis="row")
            w.index(layer.idx_c, layer=l, axis="col")
    for s in range(S):
        t0 = time.perf_counter()
        for l, layer in enumerate(se.layers):
            if se.fmt == SIE:
                w.values(layer.member_vals[s], member=s, layer=l)
            else:
                m = layer[s]
                w.index(m.idx_r, member=s, layer=l, axis="row")
                w.index(m.idx_c, member=s, layer=l, axis="col")
                w.values(m.vals, member=s, layer=l)
            w.values(se.biases[s, boffs[l]:boffs[l + 1]], kind="bias", member=s, layer=l)
        if member_times is not None:
            member_times.append(time.perf_counter() - t0)
    return _finish(w, kind="ensemble", format=se.fmt, n_members=S, meta=se.meta, **_spec_fields(spec))


def _encode_matrices(w, obj):
    if isinstance(obj, SharedIndexEnsembleMatrix):
        w.index(obj.idx_r, axis="row")
        w.index(obj.idx_c, axis="col")
        for s in range(obj.n_members):
            w.values(obj.member_vals[s], member=s)
        return _finish(w, kind="matrix", format=SIE, n_members=obj.n_members, shape=list(obj.shape))
    for s, m in enumerate(obj):
        w.index(m.idx_r, member=s, axis="row")
        w.index(m.idx_c, member=s, axis="col")
        w.values(m.vals, member=s)
    return _finish(w, kind="matrix", format=COO_PER_MEMBER, n_members=len(obj), shape=list(obj[0].shape))


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------

def read_header(buf: bytes):
    """Validate the prefix and blob table; return ``(header, payload memoryview)``."""
    if len(buf) < _PREFIX.size:
        raise FormatError("file too short for a BEA1 archive")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version > VERSION:
        raise VersionError(f"archive version {version} is newer than supported {VERSION}")
    if _PREFIX.size + hlen > len(buf):
        raise CorruptionError("header extends past end of file")
    try:
        header = json.loads(bytes(buf[_PREFIX.size:_PREFIX.size + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    payload = memoryview(buf)[_PREFIX.size + hlen:]
    if not isinstance(header, dict) or not isinstance(header.get("blobs"), list):
        raise FormatError("header has no blob table")
    end = 0
    for i, b in enumerate(header["blobs"]):
        if not isinstance(b, dict) or not {"kind", "offset", "length", "count"} <= b.keys():
            raise CorruptionError(f"blob {i} has an incomplete descriptor", i)
        if b["kind"] != "index" and b.get("dtype") not in VALUE_BYTES:
            raise CorruptionError(f"blob {i} has an unknown value dtype", i)
        width = INDEX_BYTES if b["kind"] == "index" else VALUE_BYTES[b["dtype"]]
        if b["length"] != b["count"] * width:
            raise CorruptionError(f"blob {i} declares {b['count']} items but {b['length']} bytes", i)
        if b["offset"] < end:
            raise CorruptionError(f"blob {i} overlaps the previous blob", i)
        if b["offset"] + b["length"] > len(payload):
            raise CorruptionError(f"blob {i} is truncated", i)
        end = b["offset"] + b["length"]
    return header, payload


def _blob(payload, b) -> np.ndarray:
    raw = payload[b["offset"]:b["offset"] + b["length"]]
    if b["kind"] == "index":
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)
    a = np.frombuffer(raw, dtype=_VALUE_NP[b["dtype"]])
    if b["dtype"] == Q8:
        return dequantize(Tensor(a.astype(np.int8), Q8, QuantParams(b["scale"]))).data
    return a.astype(np.float64)


def account(buf: bytes) -> StorageAccount:
    header, payload = read_header(buf)
    idx_words = val_words = dense = 0
    for b in header["blobs"]:
        if b["kind"] == "index":
            idx_words += b["count"]
        elif b["kind"] == "value":
            val_words += b["count"]
        else:
            dense += b["length"]
    vw = int(header.get("value_width", 0))
    return StorageAccount(payload_bytes=idx_words * INDEX_BYTES + val_words * vw,
                          header_bytes=len(buf) - len(payload), index_words=idx_words,
                          value_words=val_words, value_width=vw, dense_bytes=dense)


def decode(buf: bytes):
    """Return ``(artifact, LoadTimings)``."""
    try:
        return _decode(buf)
    except FormatError:
        raise
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise FormatError(f"malformed archive: {exc!r}") from None


def _decode(buf: bytes):
    from .distill import Student
    from .ensemble import PosteriorEnsemble

    t0 = time.perf_counter()
    header, payload = read_header(buf)
    blobs = header["blobs"]
    if header.get("kind") == "matrix":
        out = _decode_matrices(header, payload)
        t1 = time.perf_counter()
        return out, LoadTimings(t1 - t0, 0.0)

    spec = MlpSpec(tuple(header["spec"]))
    S, fmt = header["n_members"], header["format"]
    layout = spec.layout
    thetas = np.zeros((S, spec.n_params))
    shared_keep = np.zeros(spec.n_params, dtype=bool) if fmt == SIE else None
    member_keep = np.zeros((S, spec.n_params), dtype=bool) if fmt == COO_PER_MEMBER else None
    # structure: shared index arrays
    i = 0
    shared_idx = {}
    while i < len(blobs) and "member" not in blobs[i]:
        b = blobs[i]
        shared_idx[(b["layer"], b["axis"])] = _blob(payload, b)
        i += 1
    sie_flat = {}
    for l, ls in enumerate(layout):
        if fmt == SIE:
            flat = ls.w_off + shared_idx[(l, "row")] * ls.n_in + shared_idx[(l, "col")]
            shared_keep[flat] = True
            sie_flat[l] = flat
    t1 = time.perf_counter()
    # stream members into the preallocated structure
    pending = {}
    for b in blobs[i:]:
        s, l = b["member"], b["layer"]
        ls = layout[l]
        row = thetas[s]
        if b["kind"] == "bias":
            row[ls.b_off:ls.b_off + ls.n_out] = _blob(payload, b)
        elif b["kind"] == "index":
            pending[b["axis"]] = _blob(payload, b)
        elif b["kind"] != "value":
            continue  # written by a newer minor revision
        elif fmt == DENSE:
            row[ls.w_off:ls.b_off] = _blob(payload, b)
        elif fmt == SIE:
            row[sie_flat[l]] = _blob(payload, b)
        else:
            flat = ls.w_off + pending.pop("row") * ls.n_in + pending.pop("col")
            row[flat] = _blob(payload, b)
            member_keep[s, flat] = True
    t2 = time.perf_counter()
    timings = LoadTimings(t1 - t0, t2 - t1)

    if header["kind"] == "student":
        st = header["student"]
        return Student(spec, ParamSet.from_theta(spec, thetas[0]), st["method"], st["provenance"]), timings
    ens = PosteriorEnsemble(spec, thetas, header.get("meta", {}))
    if fmt == DENSE:
        return ens, timings
    return sparsify_ensemble(ens, shared_keep if fmt == SIE else member_keep, fmt), timings


def _decode_matrices(header, payload):
    rows, cols = header["shape"]
    blobs = header["blobs"]
    if header["format"] == SIE:
        r, c = _blob(payload, blobs[0]), _blob(payload, blobs[1])
        vals = np.stack([_blob(payload, b) for b in blobs[2:]]) if len(blobs) > 2 else np.zeros((0, r.size))
        return SharedIndexEnsembleMatrix(rows, cols, r, c, vals)
    out = []
    for j in range(0, len(blobs), 3):
        r, c, v = (_blob(payload, b) for b in blobs[j:j + 3])
        out.append(CooMatrix(rows, cols, r, c, v))
    return out


def save_archive(obj, path, fmt=None, dtype: str = F32) -> int:
    """Write ``obj`` to ``path``; returns the byte count."""
    buf = encode(obj, fmt=fmt, dtype=dtype)
    Path(path).write_bytes(buf)
    return len(buf)


def load_archive(path, with_timings: bool = False):
    obj, timings = decode(Path(path).read_bytes())
    return (obj, timings) if with_timings else obj


def pack_timed(ensemble, fmt=DENSE, dtype: str = F32):
    """Encode and return ``(bytes, total_seconds, per_member_seconds)``."""
    times = []
    t0 = time.perf_counter()
    buf = encode(ensemble, fmt=fmt, dtype=dtype, member_times=times)
    return buf, time.perf_counter() - t0, times
