"""Magnitude pruning, lottery-ticket rewinding, structured unit pruning and group lasso."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .ensemble import PosteriorEnsemble
from .errors import ParameterError, StructureError
from .nn import MlpSpec, ParamSet
from .sampler import TrainConfig, sgd_train
from .sparse import COO_PER_MEMBER, SIE, SparseEnsemble, sparsify_ensemble

FINETUNE, REWIND = "finetune", "rewind"


def _weight_positions(layout) -> np.ndarray:
    return np.concatenate([np.arange(ls.w_off, ls.b_off) for ls in layout])


@dataclass(frozen=True)
class PruneMask:
    keep: np.ndarray
    layout: tuple

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool)
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @classmethod
    def full(cls, params: ParamSet) -> "PruneMask":
        return cls(np.ones(len(params), dtype=bool), params.layout)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.keep.sum() / self.keep.size

    @property
    def weight_sparsity(self) -> float:
        w = self.keep[_weight_positions(self.layout)]
        return 1.0 - w.sum() / w.size

    def apply(self, params: ParamSet) -> ParamSet:
        return ParamSet(params.theta * self.keep, params.layout)


@dataclass(frozen=True)
class PruneSchedule:
    rate: float
    cycles: int = 1
    finetune_epochs: int = 10
    mode: str = FINETUNE

    def __post_init__(self):
        if not 0 <= self.rate < 100:
            raise ParameterError(f"pruning rate must be in [0, 100), got {self.rate}")
        if self.cycles < 1:
            raise ParameterError("need at least one pruning cycle")
        if self.mode not in (FINETUNE, REWIND):
            raise ParameterError(f"unknown pruning mode {self.mode!r}")


def magnitude_prune(params: ParamSet, rate: float, mask: Optional[PruneMask] = None) -> PruneMask:
    """Drop the smallest-magnitude ``rate`` percent of the active weights.

    Biases are never pruned. Exactly ``floor(rate/100 * active)`` weights go,
    smallest ``|w|`` first, lower flat index first among ties. The returned
    mask includes everything already pruned in ``mask``.
    """
    if not 0 <= rate < 100:
        raise ParameterError(f"pruning rate must be in [0, 100), got {rate}")
    keep = np.ones(len(params), dtype=bool) if mask is None else mask.keep.copy()
    pos = _weight_positions(params.layout)
    active = pos[keep[pos]]
    n_prune = int(np.floor(rate / 100.0 * active.size))
    if n_prune:
        order = np.lexsort((active, np.abs(params.theta[active])))
        keep[active[order[:n_prune]]] = False
    return PruneMask(keep, params.layout)


def iterative_prune_finetune(spec: MlpSpec, params: ParamSet, X, y, sched: PruneSchedule,
                             cfg: TrainConfig, reg_grad: Optional[Callable] = None):
    """Alternate cumulative magnitude pruning with masked SGD fine-tuning.

    Returns ``(params, mask)``; pruned entries are exactly zero and never
    come back.
    """
    if sched.mode != FINETUNE:
        raise ParameterError("schedule mode must be 'finetune'")
    mask = PruneMask.full(params)
    for c in range(sched.cycles):
        mask = magnitude_prune(params, sched.rate, mask)
        params = mask.apply(params)
        if sched.finetune_epochs:
            ft = replace(cfg, epochs=sched.finetune_epochs, seed=cfg.seed + c)
            params = sgd_train(spec, X, y, ft, init=params, mask=mask.keep, reg_grad=reg_grad)
    return params, mask


def iterative_prune_rewind(spec: MlpSpec, init_params: ParamSet, X, y, sched: PruneSchedule,
                           cfg: TrainConfig, on_rewind: Optional[Callable] = None):
    """Lottery-ticket style pruning with weight rewinding.

    Each cycle trains from ``init_params`` restricted to the current mask,
    prunes the trained weights, then rewinds the survivors to their initial
    values. A last training run under the final mask gives the output.
    ``on_rewind(cycle, params, mask)`` sees every rewound state.
    """
    if sched.mode != REWIND:
        raise ParameterError("schedule mode must be 'rewind'")
    mask = PruneMask.full(init_params)
    start = init_params
    for c in range(sched.cycles):
        ft = replace(cfg, epochs=sched.finetune_epochs, seed=cfg.seed + c)
        trained = sgd_train(spec, X, y, ft, init=start, mask=mask.keep)
        mask = magnitude_prune(trained, sched.rate, mask)
        start = mask.apply(init_params)
        if on_rewind is not None:
            on_rewind(c, start, mask)
    ft = replace(cfg, epochs=sched.finetune_epochs, seed=cfg.seed + sched.cycles)
    return sgd_train(spec, X, y, ft, init=start, mask=mask.keep), mask


# ---------------------------------------------------------------------------
# Structured pruning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UnitMask:
    keep: tuple  # one boolean array per hidden layer

    def __post_init__(self):
        keep = tuple(np.array(k, dtype=bool) for k in self.keep)
        for l, k in enumerate(keep):
            if not k.any():
                raise ParameterError(f"hidden layer {l} would lose every unit")
        object.__setattr__(self, "keep", keep)


def unit_norms(params: ParamSet, layer: int) -> np.ndarray:
    """L2 norm of each unit's incoming weights and bias."""
    W, b = params.weight(layer), params.bias(layer)
    return np.sqrt((W ** 2).sum(axis=1) + b ** 2)


def select_units(spec: MlpSpec, params: ParamSet, rate: float) -> UnitMask:
    if not 0 <= rate < 100:
        raise ParameterError(f"pruning rate must be in [0, 100), got {rate}")
    keep = []
    for l in range(spec.n_layers - 1):
        norms = unit_norms(params, l)
        n_drop = int(np.floor(rate / 100.0 * norms.size))
        if n_drop >= norms.size:
            raise ParameterError(f"rate {rate} would empty hidden layer {l}")
        k = np.ones(norms.size, dtype=bool)
        k[np.argsort(norms, kind="stable")[:n_drop]] = False
        keep.append(k)
    return UnitMask(tuple(keep))


def mask_units(spec: MlpSpec, params: ParamSet, units: UnitMask) -> ParamSet:
    """Zero removed units in place: their incoming row, bias and outgoing column."""
    theta = params.theta.copy()
    for l, k in enumerate(units.keep):
        ls, nxt = spec.layout[l], spec.layout[l + 1]
        W = theta[ls.w_off:ls.b_off].reshape(ls.n_out, ls.n_in)
        W[~k, :] = 0.0
        theta[ls.b_off:ls.b_off + ls.n_out][~k] = 0.0
        theta[nxt.w_off:nxt.b_off].reshape(nxt.n_out, nxt.n_in)[:, ~k] = 0.0
    return ParamSet(theta, params.layout)


def repack_units(spec: MlpSpec, params: ParamSet, units: UnitMask):
    """Build the smaller dense network that drops the masked units."""
    widths = [spec.n_inputs] + [int(k.sum()) for k in units.keep] + [spec.n_outputs]
    new_spec = MlpSpec(tuple(widths))
    rows = list(units.keep) + [np.ones(spec.n_outputs, dtype=bool)]
    cols = [np.ones(spec.n_inputs, dtype=bool)] + list(units.keep)
    parts = []
    for l in range(spec.n_layers):
        parts.append(params.weight(l)[rows[l]][:, cols[l]].ravel())
        parts.append(params.bias(l)[rows[l]])
    return new_spec, ParamSet.from_theta(new_spec, np.concatenate(parts))


def structured_prune(spec: MlpSpec, params: ParamSet, rate: float):
    """Remove the bottom ``rate`` percent of units per hidden layer by incoming norm.

    Returns ``(smaller_spec, repacked_params, unit_mask)``.
    """
    units = select_units(spec, params, rate)
    new_spec, new_params = repack_units(spec, params, units)
    return new_spec, new_params, units


def structured_prune_ensemble(e: PosteriorEnsemble, rate: float):
    """Drop the same units from every member, ranked by their mean norm.

    Returns ``(smaller_ensemble, unit_mask)``.
    """
    norms = np.zeros(e.members.shape[1])
    for p in e:
        for l in range(e.spec.n_layers - 1):
            ls = e.spec.layout[l]
            norms[ls.b_off:ls.b_off + ls.n_out] += unit_norms(p, l) / e.size
    # rank on a pseudo-network whose biases hold the mean norms
    units = select_units(e.spec, ParamSet.from_theta(e.spec, norms), rate)
    members = [repack_units(e.spec, p, units)[1] for p in e]
    new_spec = repack_units(e.spec, e.member(0), units)[0]
    meta = {**e.meta, "pruning": {"rate": rate, "mode": "structured"}}
    return PosteriorEnsemble(new_spec, members, meta), units


# ---------------------------------------------------------------------------
# Group lasso
# ---------------------------------------------------------------------------

def unit_groups(layout) -> list:
    """One group per unit holding its incoming weights (biases excluded)."""
    groups = []
    for ls in layout:
        for o in range(ls.n_out):
            start = ls.w_off + o * ls.n_in
            groups.append(np.arange(start, start + ls.n_in))
    return groups


def _resolve_groups(phi, groups):
    if isinstance(phi, ParamSet):
        universe = _weight_positions(phi.layout)
        vec = phi.theta
        if groups is None:
            groups = unit_groups(phi.layout)
    else:
        vec = np.asarray(phi, dtype=np.float64).ravel()
        universe = np.arange(vec.size)
        if groups is None:
            groups = [universe]
    groups = [np.asarray(g, dtype=np.int64) for g in groups]
    flat = np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)
    if flat.size != universe.size or not np.array_equal(np.sort(flat), universe):
        raise StructureError("groups must partition the weight entries exactly once")
    return vec, groups


def group_lasso_penalty(phi, groups: Optional[Sequence] = None) -> float:
    """Sum over groups of the group's L2 norm.

    ``phi`` is a ``ParamSet`` (default: per-unit incoming-weight groups) or a
    plain vector (default: a single group).
    """
    vec, groups = _resolve_groups(phi, groups)
    return float(sum(np.sqrt((vec[g] ** 2).sum()) for g in groups))


def group_lasso_subgradient(phi, groups: Optional[Sequence] = None) -> np.ndarray:
    """``phi_G / |phi_G|`` per group; zero for groups with zero norm."""
    vec, groups = _resolve_groups(phi, groups)
    out = np.zeros_like(vec)
    for g in groups:
        n = np.sqrt((vec[g] ** 2).sum())
        if n > 0:
            out[g] = vec[g] / n
    return out


def group_lasso_reg(spec: MlpSpec, strength: float) -> Callable:
    """Penalty gradient closure for :func:`edgebayes.sampler.sgd_train`."""
    groups = unit_groups(spec.layout)

    def reg(theta):
        return strength * group_lasso_subgradient(ParamSet.from_theta(spec, theta), groups)

    return reg


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

PER_MEMBER, SHARED = "per-member", "shared"


def shared_support_mask(e: PosteriorEnsemble, rate: float, mask: Optional[PruneMask] = None) -> PruneMask:
    """Magnitude mask over the per-coordinate mean ``|theta|`` across members."""
    mean_abs = ParamSet.from_theta(e.spec, np.abs(e.members).mean(axis=0))
    return magnitude_prune(mean_abs, rate, mask)


def prune_ensemble(e: PosteriorEnsemble, rate: float, mode: str = SHARED, cycles: int = 1) -> SparseEnsemble:
    """Sparsify every member without any fine-tuning.

    ``per-member`` prunes each member independently (stored as per-member
    COO); ``shared`` gives all members one support (stored as SIE). With
    ``cycles > 1`` the rate is applied again to the surviving weights.
    """
    if cycles < 1:
        raise ParameterError("need at least one pruning cycle")
    meta = {**e.meta, "pruning": {"rate": rate, "mode": mode, "cycles": cycles}}
    e = e.with_members(e.members, **meta)
    if mode == PER_MEMBER:
        keeps = []
        for p in e:
            m = None
            for _ in range(cycles):
                m = magnitude_prune(p, rate, m)
            keeps.append(m.keep)
        return sparsify_ensemble(e, np.stack(keeps), COO_PER_MEMBER)
    if mode == SHARED:
        m = None
        for _ in range(cycles):
            m = shared_support_mask(e, rate, m)
        return sparsify_ensemble(e, m.keep, SIE)
    raise ParameterError(f"unknown ensemble pruning mode {mode!r}")
