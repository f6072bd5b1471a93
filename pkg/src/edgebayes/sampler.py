"""Parameter generation: MAP training, SGLD, deep ensembles and cyclic snapshots."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .ensemble import PosteriorEnsemble
from .errors import DataError, NumericError, ParameterError
from .nn import MlpSpec, ParamSet, grad_log_posterior, init_params, log_posterior, mc_dropout_final_layer


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.05
    prior_precision: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch_size >= 1 and epochs >= 0 required")
        if self.prior_precision < 0:
            raise ParameterError("prior precision must be >= 0")


@dataclass(frozen=True)
class SgldConfig(TrainConfig):
    burn_in: int = 1000
    thinning: int = 100
    n_samples: int = 20

    def __post_init__(self):
        super().__post_init__()
        if self.burn_in < 0 or self.thinning < 1 or self.n_samples < 1:
            raise ParameterError("need burn_in >= 0, thinning >= 1, n_samples >= 1")


@dataclass(frozen=True)
class CyclicSchedule:
    cycle_length: int
    lr_max: float
    lr_min: float
    snapshots_per_run: int = 5

    def __post_init__(self):
        if not (self.lr_max >= self.lr_min > 0):
            raise ParameterError("need lr_max >= lr_min > 0")
        if self.cycle_length < 1 or self.snapshots_per_run < 1:
            raise ParameterError("cycle_length and snapshots_per_run must be >= 1")

    def lr(self, step: int) -> float:
        """Cosine decay from lr_max to lr_min inside each cycle (step is 0-based)."""
        t = step % self.cycle_length
        if self.cycle_length == 1:
            return self.lr_max
        frac = t / (self.cycle_length - 1)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * frac))


def _check_data(spec, X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise DataError("training data is empty")
    if X.ndim != 2 or X.shape[1] != spec.n_inputs or len(y) != len(X):
        raise DataError(f"expected X of shape (n, {spec.n_inputs}) and matching labels")
    return X, y.astype(np.int64)


def minibatches(n: int, batch_size: int, rng):
    """Endless stream of index batches; reshuffled every epoch."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i:i + batch_size]


def mean_loss(spec, params, X, y, prior_precision=1.0) -> float:
    """Negative log posterior divided by the dataset size."""
    return -log_posterior(spec, params, X, y, prior_precision) / len(X)


def _sgd(spec, X, y, theta, n_steps, lr_at, batch_size, prior_precision, rng,
         mask=None, reg_grad=None, on_step=None):
    n = len(X)
    batches = minibatches(n, batch_size, rng)
    if mask is not None:
        theta = theta * mask
    for step in range(n_steps):
        idx = next(batches)
        p = ParamSet.from_theta(spec, theta)
        g = grad_log_posterior(spec, p, X[idx], y[idx], prior_precision, n / len(idx)) / n
        if reg_grad is not None:
            g = g - reg_grad(theta)
        if mask is not None:
            g = g * mask
        theta = theta + lr_at(step) * g
        if not np.isfinite(theta).all():
            raise NumericError(f"SGD diverged at step {step}")
        if on_step is not None:
            on_step(step, theta)
    return theta


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def sgd_train(spec: MlpSpec, X, y, cfg: TrainConfig, init: Optional[ParamSet] = None,
              mask=None, reg_grad: Optional[Callable] = None) -> ParamSet:
    """MAP training by mini-batch SGD on the per-datum negative log posterior.

    ``mask`` pins the zero entries of a boolean keep-vector at 0 (their
    gradients are discarded). ``reg_grad(theta)`` adds an extra penalty
    gradient, e.g. a group-lasso subgradient.
    """
    X, y = _check_data(spec, X, y)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        init = init_params(spec, cfg.seed)
    if cfg.epochs == 0:
        return init if mask is None else ParamSet(init.theta * mask, init.layout)
    n_steps = cfg.epochs * steps_per_epoch(len(X), cfg.batch_size)
    theta = _sgd(spec, X, y, init.theta.copy(), n_steps, lambda _: cfg.learning_rate,
                 cfg.batch_size, cfg.prior_precision, rng, mask, reg_grad)
    return ParamSet.from_theta(spec, theta)


# ---------------------------------------------------------------------------
# SGLD
# ---------------------------------------------------------------------------

def sgld_step(theta, grad, step_size, noise):
    """``theta + (eps/2) grad + noise`` with ``noise ~ N(0, eps I)`` supplied by the caller."""
    return theta + 0.5 * step_size * grad + noise


def kept_iterations(burn_in: int, thinning: int, n_samples: int) -> list:
    """1-based step indices whose iterates are retained."""
    return [burn_in + k * thinning for k in range(1, n_samples + 1)]


def sgld_sample(grad_log_density: Callable, theta0, cfg: SgldConfig, mask=None) -> np.ndarray:
    """Run SGLD against any differentiable log density.

    ``grad_log_density(theta)`` returns a (possibly stochastic) gradient.
    Returns the ``(n_samples, K)`` array of retained iterates. Noise comes from
    ``cfg.seed``; any mini-batching randomness is the callable's business.
    """
    theta = np.array(theta0, dtype=np.float64, ndmin=1)
    K = theta.size
    eps = cfg.learning_rate
    sd = math.sqrt(eps)
    rng = np.random.default_rng(cfg.seed)
    total = cfg.burn_in + cfg.n_samples * cfg.thinning
    out = np.empty((cfg.n_samples, K))
    block = max(1, min(total, (1 << 18) // K))
    noise, j, kept = None, block, 0
    for step in range(1, total + 1):
        if j == block:
            noise = rng.standard_normal((block, K)) * sd
            if mask is not None:
                noise *= mask
            j = 0
        g = grad_log_density(theta)
        if mask is not None:
            g = g * mask
        theta = theta + 0.5 * eps * g + noise[j]
        j += 1
        if step > cfg.burn_in and (step - cfg.burn_in) % cfg.thinning == 0:
            if not np.isfinite(theta).all():
                raise NumericError(f"SGLD iterate became non-finite by step {step}")
            out[kept] = theta
            kept += 1
    if not np.isfinite(out).all():
        raise NumericError("SGLD produced a non-finite sample")
    return out


def mlp_log_posterior_grad(spec: MlpSpec, X, y, batch_size: int, prior_precision: float, seed):
    """Stochastic gradient closure over mini-batches, rescaled by ``N / |batch|``."""
    X, y = _check_data(spec, X, y)
    n = len(X)
    batches = minibatches(n, batch_size, np.random.default_rng(seed))

    def grad(theta):
        idx = next(batches)
        p = ParamSet.from_theta(spec, theta)
        return grad_log_posterior(spec, p, X[idx], y[idx], prior_precision, n / len(idx))

    return grad


def sgld_ensemble(spec: MlpSpec, X, y, cfg: SgldConfig, init: Optional[ParamSet] = None,
                  mask=None) -> PosteriorEnsemble:
    """Sample an MLP posterior ensemble with SGLD.

    Passing ``mask`` keeps the chain inside a fixed sparse support, e.g. one
    found by pruning a MAP model.
    """
    batch_seed, init_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    if init is None:
        init = init_params(spec, np.random.default_rng(init_seed))
    theta0 = init.theta if mask is None else init.theta * mask
    grad = mlp_log_posterior_grad(spec, X, y, cfg.batch_size, cfg.prior_precision, batch_seed)
    samples = sgld_sample(grad, theta0, cfg, mask)
    meta = {"sampler": "sgld", "prior_precision": cfg.prior_precision, "seeds": [cfg.seed],
            "config": asdict(cfg), "sparse_support": mask is not None}
    return PosteriorEnsemble(spec, samples, meta)


# ---------------------------------------------------------------------------
# Ensembles of optimized models
# ---------------------------------------------------------------------------

def deep_ensemble(spec: MlpSpec, X, y, n_members: int, cfg: TrainConfig) -> PosteriorEnsemble:
    """``n_members`` independent SGD runs with seeds ``seed, seed+1, ...``."""
    if n_members < 1:
        raise ParameterError("need at least one member")
    seeds = [cfg.seed + i for i in range(n_members)]
    members = [sgd_train(spec, X, y, TrainConfig(**{**asdict(cfg), "seed": s})) for s in seeds]
    meta = {"sampler": "deep-ensemble", "prior_precision": cfg.prior_precision,
            "seeds": seeds, "config": asdict(cfg)}
    return PosteriorEnsemble(spec, members, meta)


def snapshot_ensemble(spec: MlpSpec, X, y, cfg: TrainConfig, sched: CyclicSchedule,
                      init: Optional[ParamSet] = None) -> PosteriorEnsemble:
    """One SGD run under a cyclic cosine learning rate, snapshotting each cycle end.

    ``cfg.learning_rate`` and ``cfg.epochs`` are unused; the schedule fixes
    the step count at ``snapshots_per_run * cycle_length``.
    """
    X, y = _check_data(spec, X, y)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        init = init_params(spec, cfg.seed)
    snaps = []

    def on_step(step, theta):
        if (step + 1) % sched.cycle_length == 0:
            snaps.append(theta.copy())

    _sgd(spec, X, y, init.theta.copy(), sched.snapshots_per_run * sched.cycle_length, sched.lr,
         cfg.batch_size, cfg.prior_precision, rng, on_step=on_step)
    meta = {"sampler": "snapshot", "prior_precision": cfg.prior_precision, "seeds": [cfg.seed],
            "config": asdict(cfg), "schedule": asdict(sched)}
    return PosteriorEnsemble(spec, snaps, meta)


def mc_dropout_ensemble(spec: MlpSpec, params: ParamSet, rate: float, n_samples: int,
                        seed) -> PosteriorEnsemble:
    """Last-layer MC dropout materialized as a parameter ensemble."""
    members = mc_dropout_final_layer(spec, params, rate, n_samples, seed)
    meta = {"sampler": "mc-dropout-ll", "dropout_rate": rate, "seeds": [seed]}
    return PosteriorEnsemble(spec, members, meta)
