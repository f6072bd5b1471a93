"""Compress a posterior ensemble into one student network.

Three targets are supported:

* ``bdk``  -- match the ensemble's posterior predictive (forward KL).
* ``gped`` -- regress a named posterior expectation, by default the
  expected data uncertainty.
* ``end2`` -- fit a Dirichlet over the members' categorical outputs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
from scipy.special import digamma, expit, gammaln

from .ensemble import PosteriorEnsemble, batched_infer, decompose_uncertainty
from .errors import MethodError, NumericError, ParameterError
from .nn import MlpSpec, ParamSet, backprop, entropy, init_params, logits, softmax
from .sampler import TrainConfig, minibatches

BDK, GPED, END2 = "bdk", "gped", "end2"
METHODS = (BDK, GPED, END2)
PROB_SMOOTHING = 1e-6


def _expected_data_uncertainty(member_probs):
    return decompose_uncertainty(member_probs)[2]


def _total_uncertainty(member_probs):
    return decompose_uncertainty(member_probs)[0]


def _knowledge_uncertainty(member_probs):
    return decompose_uncertainty(member_probs)[1]


# name -> f(member_probs (S, n, C)) -> (n,) targets
GPED_TARGETS: Dict[str, Callable] = {
    "expected_data_uncertainty": _expected_data_uncertainty,
    "total_uncertainty": _total_uncertainty,
    "knowledge_uncertainty": _knowledge_uncertainty,
}


def register_gped_target(name: str, fn: Callable) -> None:
    GPED_TARGETS[name] = fn


OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class DistillConfig:
    student_spec: MlpSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = BDK
    gped_target: str = "expected_data_uncertainty"
    jitter_copies: int = 4
    jitter_scale: float = 0.1
    momentum: float = 0.9
    optimizer: str = "sgd"  # or "adam"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.method not in METHODS:
            raise ParameterError(f"unknown distillation method {self.method!r}")
        if self.method == GPED:
            if self.gped_target not in GPED_TARGETS:
                raise ParameterError(f"unknown GPED target {self.gped_target!r}")
            if self.student_spec.n_outputs != 1:
                raise ParameterError("GPED students need a single regression output")


@dataclass(frozen=True)
class Student:
    spec: MlpSpec
    params: ParamSet
    method: str
    provenance: dict = field(default_factory=dict)

    def raw(self, X) -> np.ndarray:
        return logits(self.spec, self.params, X)

    def predict(self, X) -> np.ndarray:
        """Class probabilities (BDK), Dirichlet mean (EnD2) or clamped regression output (GPED)."""
        z = self.raw(X)
        if self.method == BDK:
            return softmax(z)
        if self.method == END2:
            a = dirichlet_alpha(z)
            return a / a.sum(axis=-1, keepdims=True)
        hi = self.provenance.get("target_range", [0.0, np.inf])[1]
        return np.clip(z[..., 0], 0.0, hi)

    def alpha(self, X) -> np.ndarray:
        if self.method != END2:
            raise MethodError("Dirichlet parameters exist only for EnD2 students")
        return dirichlet_alpha(self.raw(X))


def distill_inputs(X, copies: int, scale: float, seed) -> np.ndarray:
    """Training inputs plus Gaussian-jittered copies (sd = scale * feature std)."""
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    sd = scale * X.std(axis=0)
    jit = [X + rng.normal(size=X.shape) * sd for _ in range(copies)]
    return np.concatenate([X] + jit)


def dirichlet_alpha(z) -> np.ndarray:
    """``softplus(z) + 1``; keeps every concentration above 1."""
    z = np.asarray(z, dtype=np.float64)
    return np.logaddexp(0.0, z) + 1.0


def smooth_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return (p + PROB_SMOOTHING) / (1.0 + p.shape[-1] * PROB_SMOOTHING)


def dirichlet_nll(alpha, probs) -> np.ndarray:
    """Negative Dirichlet log density of ``probs`` (trailing class axis)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    logp = np.log(smooth_probs(probs))
    a0 = alpha.sum(axis=-1)
    return -(gammaln(a0) - gammaln(alpha).sum(axis=-1) + ((alpha - 1.0) * logp).sum(axis=-1))


def dirichlet_uncertainty(alpha):
    """Closed-form ``(total, knowledge, data)`` for Dirichlet concentrations."""
    alpha = np.asarray(alpha, dtype=np.float64)
    a0 = alpha.sum(axis=-1, keepdims=True)
    mean = alpha / a0
    total = entropy(mean)
    data = -(mean * (digamma(alpha + 1.0) - digamma(a0 + 1.0))).sum(axis=-1)
    knowledge = total - data
    total = knowledge + data
    return total, knowledge, data


def student_uncertainty(student: Student, X):
    if student.method != END2:
        raise MethodError("closed-form uncertainties need an EnD2 student")
    return dirichlet_uncertainty(student.alpha(X))


# ---------------------------------------------------------------------------
# losses: each returns (mean loss, d loss / d logits) for a batch
# ---------------------------------------------------------------------------

def _bdk_loss(z, target):
    q = softmax(z)
    t = target
    logq = z - z.max(axis=1, keepdims=True)
    logq = logq - np.log(np.exp(logq).sum(axis=1, keepdims=True))
    tlogt = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
    loss = (tlogt - t * logq).sum(axis=1).mean()
    return loss, (q - t) / len(z)


def _gped_loss(z, target):
    r = z[:, 0] - target
    return float((r ** 2).mean()), (2.0 * r / len(z))[:, None]


def _end2_loss(z, logp_mean_and_probs):
    logp_mean, probs = logp_mean_and_probs
    a = dirichlet_alpha(z)
    a0 = a.sum(axis=1, keepdims=True)
    nll = dirichlet_nll(a[None], probs).mean()
    da = -digamma(a0) + digamma(a) - logp_mean
    return float(nll), da * expit(z) / len(z)


def _fit(spec, params, Xd, targets, loss_fn, cfg: TrainConfig, momentum: float, take, optimizer="sgd"):
    """Mini-batch SGD with momentum (or Adam) on a distillation loss.

    Adam helps the Dirichlet head, whose gradients shrink like 1/alpha as the
    concentrations grow.
    """
    n = len(Xd)
    rng = np.random.default_rng(cfg.seed)
    batches = minibatches(n, cfg.batch_size, rng)
    spe = -(-n // cfg.batch_size)
    theta = params.theta.copy()
    vel = np.zeros_like(theta)
    sq = np.zeros_like(theta)
    decay = cfg.prior_precision / n
    t = 0

    def full_loss(th):
        return float(loss_fn(logits(spec, ParamSet.from_theta(spec, th), Xd), take(targets, slice(None)))[0])

    history = [full_loss(theta)]
    for epoch in range(cfg.epochs):
        for _ in range(spe):
            idx = next(batches)
            p = ParamSet.from_theta(spec, theta)
            z = logits(spec, p, Xd[idx])
            _, dz = loss_fn(z, take(targets, idx))
            g = backprop(spec, p, Xd[idx], dz) + decay * theta
            if optimizer == "adam":
                t += 1
                vel = 0.9 * vel + 0.1 * g
                sq = 0.999 * sq + 0.001 * g * g
                step = (vel / (1 - 0.9 ** t)) / (np.sqrt(sq / (1 - 0.999 ** t)) + 1e-8)
                theta = theta - cfg.learning_rate * step
            else:
                vel = momentum * vel - cfg.learning_rate * g
                theta = theta + vel
        if not np.isfinite(theta).all():
            raise NumericError(f"distillation diverged in epoch {epoch}")
        history.append(full_loss(theta))
    return ParamSet.from_theta(spec, theta), history


def _prepare(e: PosteriorEnsemble, X, cfg: DistillConfig):
    if cfg.student_spec.n_inputs != e.spec.n_inputs:
        raise ParameterError("student and teacher input widths differ")
    Xd = distill_inputs(X, cfg.jitter_copies, cfg.jitter_scale, cfg.train.seed)
    mp = batched_infer(e, Xd)  # (S, n, C)
    return Xd, mp


def _student_init(cfg: DistillConfig, init: Optional[ParamSet]):
    return init if init is not None else init_params(cfg.student_spec, cfg.train.seed)


def _provenance(e, cfg, history, **extra):
    return {"teacher_sampler": e.meta.get("sampler"), "teacher_size": e.size,
            "method": cfg.method, "train": asdict(cfg.train), "loss_history": history, **extra}


def bdk_distill(e: PosteriorEnsemble, X, cfg: DistillConfig, init: Optional[ParamSet] = None) -> Student:
    """Fit a softmax student to the ensemble's posterior predictive."""
    if cfg.method != BDK:
        raise ParameterError("config method must be 'bdk'")
    if cfg.student_spec.n_outputs != e.spec.n_outputs:
        raise ParameterError("student must output one probability per class")
    Xd, mp = _prepare(e, X, cfg)
    target = mp.mean(axis=0)
    params, hist = _fit(cfg.student_spec, _student_init(cfg, init), Xd, target, _bdk_loss,
                        cfg.train, cfg.momentum, lambda t, i: t[i], cfg.optimizer)
    return Student(cfg.student_spec, params, BDK, _provenance(e, cfg, hist))


def gped_distill(e: PosteriorEnsemble, X, cfg: DistillConfig, init: Optional[ParamSet] = None) -> Student:
    """Regress a named posterior expectation with squared error."""
    if cfg.method != GPED:
        raise ParameterError("config method must be 'gped'")
    Xd, mp = _prepare(e, X, cfg)
    target = np.asarray(GPED_TARGETS[cfg.gped_target](mp), dtype=np.float64)
    params, hist = _fit(cfg.student_spec, _student_init(cfg, init), Xd, target, _gped_loss,
                        cfg.train, cfg.momentum, lambda t, i: t[i], cfg.optimizer)
    prov = _provenance(e, cfg, hist, gped_target=cfg.gped_target,
                       target_range=[0.0, float(np.log(e.spec.n_outputs))])
    return Student(cfg.student_spec, params, GPED, prov)


def end2_distill(e: PosteriorEnsemble, X, cfg: DistillConfig, init: Optional[ParamSet] = None) -> Student:
    """Fit a Dirichlet-output student to the members' probability vectors."""
    if cfg.method != END2:
        raise ParameterError("config method must be 'end2'")
    if cfg.student_spec.n_outputs != e.spec.n_outputs:
        raise ParameterError("student must output one concentration per class")
    Xd, mp = _prepare(e, X, cfg)
    logp_mean = np.log(smooth_probs(mp)).mean(axis=0)  # (n, C)
    targets = (logp_mean, mp)
    params, hist = _fit(cfg.student_spec, _student_init(cfg, init), Xd, targets, _end2_loss,
                        cfg.train, cfg.momentum, lambda t, i: (t[0][i], t[1][:, i]), cfg.optimizer)
    return Student(cfg.student_spec, params, END2, _provenance(e, cfg, hist))


def distill(e: PosteriorEnsemble, X, cfg: DistillConfig, init: Optional[ParamSet] = None) -> Student:
    return {BDK: bdk_distill, GPED: gped_distill, END2: end2_distill}[cfg.method](e, X, cfg, init)
