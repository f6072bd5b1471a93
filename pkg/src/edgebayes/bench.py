"""Timing and trade-off harnesses used by ``edgebayes bench`` and the demos."""
from __future__ import annotations

import timeit

import numpy as np

from . import archive
from .ensemble import PosteriorEnsemble, batched_infer, sequential_infer
from .metrics import accuracy, evaluate_records
from .nn import count_macs
from .pruning import prune_ensemble


def _best_time(fn, repeats):
    """Seconds per call: the best of ``repeats`` timing loops of >= 0.2 s each."""
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeats, number)) / number


def batched_vs_sequential(e: PosteriorEnsemble, n_inputs: int = 50, repeats: int = 5, seed=0) -> dict:
    """Per-input wall time of the member-stacked pass vs a member loop."""
    X = np.random.default_rng(seed).normal(size=(n_inputs, e.spec.n_inputs))
    for x in X[:3]:
        batched_infer(e, x), sequential_infer(e, x)

    def run(fn):
        return lambda: [fn(e, x) for x in X]

    tb = _best_time(run(batched_infer), repeats) / n_inputs
    ts = _best_time(run(sequential_infer), repeats) / n_inputs
    spread = float(np.var(batched_infer(e, X), axis=0).mean())
    return {"members": e.size, "batched_s": tb, "sequential_s": ts, "speedup": ts / tb,
            "member_output_variance": spread}


def pack_linearity(e: PosteriorEnsemble, fmt: str = archive.DENSE, dtype: str = "f32",
                   repeats: int = 15) -> dict:
    """Compare packing all ``S`` members at once with packing each member alone.

    The single-model baseline cycles through every member so that neither side
    gets to re-pack one cache-hot parameter vector. The two timings are
    interleaved so slow drift in machine load hits both equally.
    """
    singles = [e.with_members(e.members[s:s + 1]) for s in range(e.size)]
    one = timeit.Timer(lambda: [archive.encode(m, fmt=fmt, dtype=dtype) for m in singles])
    all_ = timeit.Timer(lambda: archive.encode(e, fmt=fmt, dtype=dtype))
    number = max(one.autorange()[0], all_.autorange()[0])
    t1 = ts = float("inf")
    for _ in range(repeats):
        t1 = min(t1, one.timeit(number) / number / e.size)
        ts = min(ts, all_.timeit(number) / number)
    return {"members": e.size, "single_s": t1, "ensemble_s": ts, "ratio": ts / (e.size * t1)}


def pareto_sweep(e: PosteriorEnsemble, X_test, y_test, rates=(0, 50, 80, 90, 95),
                 dtypes=("f32", "f16", "q8"), mode: str = "shared") -> list:
    """Storage / compute / accuracy for every (pruning rate, dtype) pair.

    Accuracy is measured on the archive round-tripped at each dtype, so
    quantization error is included.
    """
    rows = []
    dense_macs = e.size * count_macs(e.spec)
    for rate in rates:
        se = prune_ensemble(e, rate, mode)
        nnz = sum(se.nnz(s) for s in range(se.n_members))
        for dt in dtypes:
            buf = archive.encode(se, dtype=dt)
            loaded, _ = archive.decode(buf)
            acct = archive.account(buf)
            acc = accuracy(evaluate_records(loaded.to_ensemble(), X_test, y_test))
            rows.append({"rate": rate, "dtype": dt, "format": se.fmt, "nnz": nnz,
                         "stored_bytes": len(buf), "payload_bytes": acct.payload_bytes,
                         "dense_macs": dense_macs, "sparse_macs": nnz, "accuracy": acc})
    return rows


def format_table(rows) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))  # noqa: E731
    return "\n".join([line(cols)] + [line(r) for r in cells]) + "\n"


def _cell(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
