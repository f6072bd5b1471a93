"""Posterior ensembles: Monte Carlo predictive, uncertainty decomposition, batched inference."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, DomainError, ParameterError, StructureError
from .nn import MlpSpec, ParamSet, _mm, entropy, forward, softmax


@dataclass(frozen=True)
class PosteriorEnsemble:
    """``S`` parameter vectors sharing one architecture, stored as an ``(S, K)`` array."""

    spec: MlpSpec
    members: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = self.members
        if not isinstance(m, np.ndarray):
            m = list(m)
            for p in m:
                if isinstance(p, ParamSet) and not p.matches(self.spec):
                    raise StructureError("ensemble members must share one parameter layout")
            m = np.stack([p.theta if isinstance(p, ParamSet) else np.asarray(p) for p in m]) if m else np.zeros((0, 0))
        m = np.array(m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise ParameterError("an ensemble needs at least one member")
        if m.shape[1] != self.spec.n_params:
            raise StructureError(f"members have {m.shape[1]} parameters, spec needs {self.spec.n_params}")
        m.setflags(write=False)
        object.__setattr__(self, "members", m)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def size(self) -> int:
        return self.members.shape[0]

    def __len__(self):
        return self.size

    def member(self, s: int) -> ParamSet:
        return ParamSet.from_theta(self.spec, self.members[s])

    def __iter__(self):
        return (self.member(s) for s in range(self.size))

    def with_members(self, members, **meta) -> "PosteriorEnsemble":
        return PosteriorEnsemble(self.spec, members, {**self.meta, **meta})


@dataclass(frozen=True)
class PredictiveResult:
    probs: np.ndarray
    total_u: np.ndarray
    knowledge_u: np.ndarray
    data_u: np.ndarray
    member_probs: Optional[np.ndarray] = None


def _inputs(e: PosteriorEnsemble, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim not in (1, 2) or X.shape[-1] != e.spec.n_inputs:
        raise DimensionError(f"expected input width {e.spec.n_inputs}, got shape {X.shape}")
    return X


def sequential_infer(e: PosteriorEnsemble, X) -> np.ndarray:
    """Member probabilities by looping over members one at a time."""
    X = _inputs(e, X)
    return np.stack([forward(e.spec, p, X) for p in e])


def batched_infer(e: PosteriorEnsemble, X) -> np.ndarray:
    """Member probabilities with all members evaluated in one pass per layer.

    Member weights are stacked along a leading axis so each layer is a single
    batched affine map. Returns ``(S, C)`` for one input, ``(S, n, C)`` for rows.
    """
    X = _inputs(e, X)
    single = X.ndim == 1
    S = e.size
    h = np.broadcast_to(np.atleast_2d(X), (S,) + np.atleast_2d(X).shape)
    for l, ls in enumerate(e.spec.layout):
        W = e.members[:, ls.w_off:ls.b_off].reshape(S, ls.n_out, ls.n_in)
        b = e.members[:, ls.b_off:ls.b_off + ls.n_out][:, None, :]
        z = _mm(h, W.transpose(0, 2, 1)) + b
        h = z if l == e.spec.n_layers - 1 else np.maximum(z, 0.0)
    p = softmax(h)
    return p[:, 0] if single else p


def decompose_uncertainty(member_probs):
    """Split predictive entropy into knowledge and expected-data parts (nats).

    ``member_probs`` has the member axis first and classes last. Returns
    ``(total, knowledge, data)`` where total is the entropy of the mean,
    data is the mean member entropy and knowledge is their difference.
    """
    mp = np.asarray(member_probs, dtype=np.float64)
    if mp.ndim < 2:
        raise DomainError("member_probs needs a member axis and a class axis")
    if (mp < 0).any() or np.abs(mp.sum(axis=-1) - 1.0).max() > 1e-6:
        raise DomainError("every member row must be a probability distribution")
    total = entropy(mp.mean(axis=0))
    data = entropy(mp).mean(axis=0)
    knowledge = total - data
    # Jensen makes this non-negative; only round-off can push it below zero
    knowledge = np.where((knowledge < 0) & (knowledge > -1e-9), 0.0, knowledge)
    total = knowledge + data
    if np.ndim(total) == 0:
        return float(total), float(knowledge), float(data)
    return total, knowledge, data


def posterior_predictive(e: PosteriorEnsemble, X, keep_members: bool = False,
                         batched: bool = True) -> PredictiveResult:
    """Monte Carlo posterior predictive: mean of member softmax outputs."""
    mp = batched_infer(e, X) if batched else sequential_infer(e, X)
    total, knowledge, data = decompose_uncertainty(mp)
    # identical members average to themselves exactly
    probs = mp[0].copy() if (mp == mp[0]).all() else mp.mean(axis=0)
    return PredictiveResult(probs, total, knowledge, data,
                            mp if keep_members else None)


def predict_class(e: PosteriorEnsemble, X):
    """Argmax of the predictive; ties go to the lowest class index."""
    out = np.argmax(posterior_predictive(e, X).probs, axis=-1)
    return int(out) if np.ndim(out) == 0 else out
