"""Predictive, calibration, robustness and scalability metrics."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError, ParameterError

IN_DIST, OOD = "in-distribution", "ood"
SIGNALS = ("total", "knowledge", "data", "confidence")
NLL_FLOOR = 1e-12


@dataclass(frozen=True)
class EvalRecord:
    """Predictions for a set of test points (arrays, one row per point)."""

    probs: np.ndarray
    labels: np.ndarray
    total: np.ndarray
    knowledge: np.ndarray
    data: np.ndarray
    source: np.ndarray = None

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        n = len(p)
        if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
            raise DomainError("predicted probabilities must be distributions")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).reshape(n))
        for name in ("total", "knowledge", "data"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(n))
        src = np.full(n, IN_DIST, dtype=object) if self.source is None else np.asarray(self.source, dtype=object)
        object.__setattr__(self, "source", src)
        lab = self.labels[src == IN_DIST]
        if lab.size and (lab.min() < 0 or lab.max() >= p.shape[1]):
            raise DomainError("in-distribution labels must be valid class indices")

    def __len__(self):
        return len(self.probs)

    def subset(self, which: str) -> "EvalRecord":
        m = self.source == which
        return EvalRecord(self.probs[m], self.labels[m], self.total[m], self.knowledge[m],
                          self.data[m], self.source[m])

    def signal(self, name: str) -> np.ndarray:
        """Uncertainty score where larger means less certain."""
        if name == "confidence":
            return 1.0 - self.probs.max(axis=1)
        if name in ("total", "knowledge", "data"):
            return getattr(self, name)
        raise ParameterError(f"unknown uncertainty signal {name!r}")

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def records_from_predictive(result, labels, source=IN_DIST) -> EvalRecord:
    """Wrap a batched :class:`~edgebayes.ensemble.PredictiveResult`."""
    n = len(np.atleast_2d(result.probs))
    return EvalRecord(result.probs, labels, result.total_u, result.knowledge_u, result.data_u,
                      np.full(n, source, dtype=object))


def concat_records(*recs: EvalRecord) -> EvalRecord:
    return EvalRecord(*(np.concatenate([getattr(r, f) for r in recs])
                        for f in ("probs", "labels", "total", "knowledge", "data", "source")))


def _labeled(records: EvalRecord) -> EvalRecord:
    r = records.subset(IN_DIST)
    if len(r) == 0:
        raise ParameterError("need at least one in-distribution record")
    return r


def accuracy(records: EvalRecord) -> float:
    r = _labeled(records)
    return float((r.predictions == r.labels).mean())


def mean_nll(records: EvalRecord) -> float:
    r = _labeled(records)
    p = r.probs[np.arange(len(r)), r.labels]
    return float(-np.log(np.maximum(p, NLL_FLOOR)).mean())


def ece(records: EvalRecord, bins: int = 15) -> float:
    """Top-label expected calibration error over equal-width bins ``(k/B, (k+1)/B]``."""
    if bins < 1:
        raise ParameterError("need at least one bin")
    r = _labeled(records)
    conf = r.probs.max(axis=1)
    correct = (r.predictions == r.labels).astype(np.float64)
    upper = np.arange(1, bins + 1) / bins
    idx = np.minimum(np.searchsorted(upper, conf, side="left"), bins - 1)
    total = 0.0
    for b in range(bins):
        m = idx == b
        if m.any():
            total += m.sum() / len(r) * abs(correct[m].mean() - conf[m].mean())
    return float(total)


def brier(records: EvalRecord) -> float:
    r = _labeled(records)
    onehot = np.zeros_like(r.probs)
    onehot[np.arange(len(r)), r.labels] = 1.0
    return float(((r.probs - onehot) ** 2).sum(axis=1).mean())


def auroc(pos_scores, neg_scores) -> float:
    """``P(pos > neg) + 0.5 P(tie)`` from the Mann-Whitney rank statistic."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ParameterError("AUROC needs at least one positive and one negative")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def misclassification_auroc(records: EvalRecord, signal: str = "total") -> Optional[float]:
    """Misclassified points are positives. ``None`` when nothing is misclassified."""
    r = _labeled(records)
    wrong = r.predictions != r.labels
    if wrong.all() or not wrong.any():
        return None
    s = r.signal(signal)
    return auroc(s[wrong], s[~wrong])


def ood_auroc(records: EvalRecord, signal: str = "total") -> Optional[float]:
    """OOD points are positives, in-distribution points negatives."""
    src = records.source
    if not (src == OOD).any() or not (src == IN_DIST).any():
        return None
    s = records.signal(signal)
    return auroc(s[src == OOD], s[src == IN_DIST])


def misclassification_task(model, X, y, signal: str = "total") -> Optional[float]:
    return misclassification_auroc(evaluate_records(model, X, y), signal)


def ood_task(model, X_in, X_ood, signal: str = "total") -> Optional[float]:
    """OOD inputs are positives; needs no labels."""
    def scores(X):
        p, t, k, d = predictive(model, X)
        return 1.0 - p.max(axis=1) if signal == "confidence" else {"total": t, "knowledge": k, "data": d}[signal]

    if signal not in SIGNALS:
        raise ParameterError(f"unknown uncertainty signal {signal!r}")
    return auroc(scores(X_ood), scores(X_in))


# ---------------------------------------------------------------------------
# model adapters
# ---------------------------------------------------------------------------

def predictive(model, X):
    """``(probs, total, knowledge, data)`` for an ensemble, ParamSet-bearing model or student."""
    from .distill import BDK, END2, Student, dirichlet_uncertainty
    from .ensemble import PosteriorEnsemble, posterior_predictive
    from .errors import MethodError
    from .nn import entropy
    from .sparse import SparseEnsemble

    if isinstance(model, SparseEnsemble):
        model = model.to_ensemble()
    if isinstance(model, PosteriorEnsemble):
        r = posterior_predictive(model, np.atleast_2d(X))
        return r.probs, r.total_u, r.knowledge_u, r.data_u
    if isinstance(model, Student):
        if model.method == END2:
            a = model.alpha(np.atleast_2d(X))
            t, k, d = dirichlet_uncertainty(a)
            return a / a.sum(axis=1, keepdims=True), t, k, d
        if model.method == BDK:
            p = model.predict(np.atleast_2d(X))
            h = entropy(p)
            return p, h, np.zeros_like(h), h
        raise MethodError("GPED students do not produce class probabilities")
    raise ParameterError(f"cannot evaluate object of type {type(model).__name__}")


def evaluate_records(model, X, y, source=IN_DIST, labeled=True) -> EvalRecord:
    p, t, k, d = predictive(model, X)
    n = len(p)
    labels = np.asarray(y) if labeled else np.full(n, -1)
    return EvalRecord(p, labels, t, k, d, np.full(n, source, dtype=object))


# ---------------------------------------------------------------------------
# scalability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalabilityReport:
    params: int
    stored_bytes: int
    macs_per_prediction: int
    latency_s: Optional[float] = None


def measure_latency(fn, x, repeats: int = 30, warmup: int = 5) -> float:
    """Median wall time of ``fn(x)`` over ``repeats`` runs after ``warmup`` runs."""
    for _ in range(warmup):
        fn(x)
    times = []
    for _ in range(max(repeats, 30)):
        t0 = time.perf_counter()
        fn(x)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def scalability_report(artifact, dtype: str = "f32", fmt: Optional[str] = None,
                       time_latency: bool = True) -> ScalabilityReport:
    """Parameter count, serialized bytes, MACs and median single-input latency.

    ``params`` counts stored parameters (non-zeros plus biases for sparse
    artifacts). MACs are ``S * count_macs(spec)`` for ensembles whether they
    run sequentially or batched.
    """
    from . import archive
    from .distill import Student
    from .ensemble import PosteriorEnsemble
    from .nn import count_macs
    from .sparse import SparseEnsemble

    if isinstance(artifact, SparseEnsemble):
        spec, S = artifact.spec, artifact.n_members
        params = sum(artifact.nnz(s) for s in range(S)) + artifact.biases.size
        macs = S * count_macs(spec)
    elif isinstance(artifact, PosteriorEnsemble):
        spec, S = artifact.spec, artifact.size
        params, macs = artifact.members.size, S * count_macs(spec)
    elif isinstance(artifact, Student):
        spec = artifact.spec
        params, macs = len(artifact.params), count_macs(spec)
    else:
        raise ParameterError(f"unsupported artifact {type(artifact).__name__}")
    acct = archive.account(archive.encode(artifact, fmt=fmt, dtype=dtype))
    latency = None
    if time_latency:
        x = np.zeros(spec.n_inputs)
        model = artifact.to_ensemble() if isinstance(artifact, SparseEnsemble) else artifact
        latency = measure_latency(lambda v: predictive(model, v), x)
    return ScalabilityReport(int(params), acct.total_bytes, int(macs), latency)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    nll: float
    ece: float
    brier: float
    auroc_misclassification: dict
    auroc_ood: dict
    param_count: int
    stored_bytes: int
    macs_per_prediction: int
    latency_s: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        """Flat ``key = value`` block, one field per line, nested dicts dotted."""
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, dict):
                for kk in sorted(v):
                    lines.append(f"{k}.{kk} = {_fmt(v[kk])}")
            else:
                lines.append(f"{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate(model, X_test, y_test, X_ood=None, bins: int = 15, time_latency: bool = False,
             dtype: str = "f32", fmt: Optional[str] = None) -> MetricsReport:
    """All four facets for one artifact."""
    from .sparse import SparseEnsemble

    rec = evaluate_records(model, X_test, y_test)
    if X_ood is not None and len(X_ood):
        rec = concat_records(rec, evaluate_records(model, X_ood, None, OOD, labeled=False))
    if isinstance(model, SparseEnsemble):
        fmt = model.fmt
    scal = scalability_report(model, dtype=dtype, fmt=fmt, time_latency=time_latency)
    return MetricsReport(
        accuracy=accuracy(rec), nll=mean_nll(rec), ece=ece(rec, bins), brier=brier(rec),
        auroc_misclassification={s: misclassification_auroc(rec, s) for s in SIGNALS},
        auroc_ood={s: ood_auroc(rec, s) for s in SIGNALS},
        param_count=scal.params, stored_bytes=scal.stored_bytes,
        macs_per_prediction=scal.macs_per_prediction, latency_s=scal.latency_s,
    )
