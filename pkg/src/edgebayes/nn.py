"""Dense tensors, quantization and a small ReLU/softmax MLP with hand-written backprop.

Everything in memory is float64. The ``f32``/``f16``/``q8`` tags describe the
storage encoding a tensor round-trips through (see :mod:`edgebayes.archive`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import DataError, DimensionError, DomainError, NumericError, ParameterError

F32, F16, Q8 = "f32", "f16", "q8"
DTYPES = (F32, F16, Q8)
Q8_MAX = 127


@dataclass(frozen=True)
class QuantParams:
    scale: float
    mode: str = "symmetric-per-tensor"

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError(f"quantization scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class Tensor:
    data: np.ndarray
    dtype: str = F32
    quant: Optional[QuantParams] = None

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ParameterError(f"unknown dtype {self.dtype!r}")
        if (self.dtype == Q8) != (self.quant is not None):
            raise ParameterError("quant params are required for q8 and only for q8")
        if self.dtype == Q8 and self.data.size and np.abs(self.data.astype(np.int32)).max() > Q8_MAX:
            raise DomainError("q8 codes must lie in [-127, 127]")

    @classmethod
    def from_array(cls, a) -> "Tensor":
        return cls(np.asarray(a, dtype=np.float64))

    @property
    def shape(self):
        return self.data.shape

    def to_numpy(self) -> np.ndarray:
        """Dequantized float64 view of the data."""
        return dequantize(self).data


def _check_finite(a, what="input"):
    if np.isnan(a).any():
        raise NumericError(f"NaN in {what}")


def quantize(t: Tensor, target: str) -> Tensor:
    """Quantize a full-precision tensor to ``f16`` or symmetric per-tensor ``q8``.

    q8 uses ``scale = max|x| / 127`` (1 for an all-zero tensor) and rounds
    half away from zero, so the largest-magnitude entry lands on +-127.
    """
    if t.dtype != F32:
        raise ParameterError("only f32 tensors can be quantized")
    x = t.data
    _check_finite(x)
    if target == F32:
        return t
    if target == F16:
        return Tensor(x.astype(np.float16), F16)
    if target == Q8:
        amax = float(np.abs(x).max()) if x.size else 0.0
        scale = amax / Q8_MAX if amax > 0 else 1.0
        v = x / scale
        codes = np.sign(v) * np.floor(np.abs(v) + 0.5)
        codes = np.clip(codes, -Q8_MAX, Q8_MAX).astype(np.int8)
        return Tensor(codes, Q8, QuantParams(scale))
    raise ParameterError(f"unknown quantization target {target!r}")


def dequantize(t: Tensor) -> Tensor:
    if t.dtype == F32:
        return t
    if t.dtype == F16:
        return Tensor(t.data.astype(np.float64))
    return Tensor(t.data.astype(np.float64) * t.quant.scale)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Left-to-right accumulation over the inner axis; broadcasts leading axes.
    # Fixed order keeps results bit-reproducible and makes adding exact zeros
    # (pruned units) a no-op.
    k = a.shape[-1]
    acc = a[..., :, 0:1] * b[..., 0:1, :]
    for j in range(1, k):
        acc = acc + a[..., :, j:j + 1] * b[..., j:j + 1, :]
    return acc


def matmul(a, b):
    """Row-major matrix product with a deterministic summation order.

    Accepts ``Tensor`` (f32 only) or plain arrays and returns the same kind.
    """
    wrap = isinstance(a, Tensor) or isinstance(b, Tensor)
    arrs = []
    for t in (a, b):
        if isinstance(t, Tensor):
            if t.dtype != F32:
                raise ParameterError("dequantize tensors before matmul")
            t = t.data
        arrs.append(np.asarray(t, dtype=np.float64))
    a, b = arrs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    if a.shape[1] == 0:
        out = np.zeros((a.shape[0], b.shape[1]))
    else:
        out = _mm(a, b)
    return Tensor(out) if wrap else out


def softmax(logits, axis=-1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    _check_finite(z, "logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(p, axis=-1):
    """Shannon entropy in nats with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any():
        raise DomainError("probabilities must be non-negative")
    if np.abs(p.sum(axis=axis) - 1.0).max(initial=0.0) > 1e-6:
        raise DomainError("probabilities must sum to 1")
    safe = np.where(p > 0, p, 1.0)
    h = -(p * np.log(safe)).sum(axis=axis)
    return np.maximum(h, 0.0)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

class LayerSlice(NamedTuple):
    w_off: int
    b_off: int
    n_in: int
    n_out: int


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected net ``[D, H1, ..., HL, C]``: ReLU hidden layers, softmax head."""

    layer_widths: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ParameterError(f"invalid layer widths {self.layer_widths}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_inputs(self):
        return self.layer_widths[0]

    @property
    def n_outputs(self):
        return self.layer_widths[-1]

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def layout(self) -> tuple:
        # each layer stores its (out, in) weight matrix row-major, then its bias
        out, off = [], 0
        for n_in, n_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            out.append(LayerSlice(off, off + n_in * n_out, n_in, n_out))
            off += n_in * n_out + n_out
        return tuple(out)

    @property
    def n_params(self):
        return sum(i * o + o for i, o in zip(self.layer_widths[:-1], self.layer_widths[1:]))

    def weight_mask(self) -> np.ndarray:
        """Boolean vector over theta marking weight (non-bias) entries."""
        m = np.zeros(self.n_params, dtype=bool)
        for ls in self.layout:
            m[ls.w_off:ls.b_off] = True
        return m


@dataclass(frozen=True)
class ParamSet:
    theta: np.ndarray
    layout: tuple = field(repr=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "layout", tuple(LayerSlice(*ls) for ls in self.layout))
        k = 0
        for ls in self.layout:
            if ls.w_off != k or ls.b_off != k + ls.n_in * ls.n_out:
                raise DimensionError("layout offsets must tile theta contiguously")
            k = ls.b_off + ls.n_out
        if k != theta.size:
            raise DimensionError(f"layout covers {k} entries but theta has {theta.size}")

    @classmethod
    def from_theta(cls, spec: MlpSpec, theta) -> "ParamSet":
        return cls(theta, spec.layout)

    def __len__(self):
        return self.theta.size

    def weight(self, layer: int) -> np.ndarray:
        ls = self.layout[layer]
        return self.theta[ls.w_off:ls.b_off].reshape(ls.n_out, ls.n_in)

    def bias(self, layer: int) -> np.ndarray:
        ls = self.layout[layer]
        return self.theta[ls.b_off:ls.b_off + ls.n_out]

    def matches(self, spec: MlpSpec) -> bool:
        return self.layout == spec.layout


def init_params(spec: MlpSpec, seed) -> ParamSet:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.n_params)
    for ls in spec.layout:
        theta[ls.w_off:ls.b_off] = rng.normal(0.0, np.sqrt(2.0 / ls.n_in), ls.n_in * ls.n_out)
    return ParamSet.from_theta(spec, theta)


def _check(spec: MlpSpec, params: ParamSet, X) -> np.ndarray:
    if not params.matches(spec):
        raise DimensionError("parameter layout does not match the network spec")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != spec.n_inputs or X.ndim not in (1, 2):
        raise DimensionError(f"expected input width {spec.n_inputs}, got shape {X.shape}")
    return X


def _activations(spec, params, X):
    """Pre-activations of every layer for a 2-D batch."""
    zs, h = [], X
    for l in range(spec.n_layers):
        z = _mm(h, params.weight(l).T) + params.bias(l)
        zs.append(z)
        h = np.maximum(z, 0.0)
    return zs


def logits(spec: MlpSpec, params: ParamSet, X) -> np.ndarray:
    X = _check(spec, params, X)
    single = X.ndim == 1
    z = _activations(spec, params, np.atleast_2d(X))[-1]
    return z[0] if single else z


def forward(spec: MlpSpec, params: ParamSet, X) -> np.ndarray:
    """Class probabilities for one input vector or a batch of rows."""
    return softmax(logits(spec, params, X))


def backprop(spec: MlpSpec, params: ParamSet, X, dlogits) -> np.ndarray:
    """Pull a gradient w.r.t. the output logits back onto theta.

    ``dlogits`` has the shape of ``logits(spec, params, X)`` for a 2-D batch.
    """
    X = np.atleast_2d(_check(spec, params, X))
    zs = _activations(spec, params, X)
    grad = np.zeros(spec.n_params)
    dz = np.asarray(dlogits, dtype=np.float64)
    for l in range(spec.n_layers - 1, -1, -1):
        ls = spec.layout[l]
        h = X if l == 0 else np.maximum(zs[l - 1], 0.0)
        grad[ls.w_off:ls.b_off] = _mm(dz.T, h).ravel()
        grad[ls.b_off:ls.b_off + ls.n_out] = dz.sum(axis=0)
        if l > 0:
            dz = _mm(dz, params.weight(l)) * (zs[l - 1] > 0)
    return grad


def _check_labels(y, n_classes):
    y = np.asarray(y)
    if y.size == 0:
        raise DataError("batch must be non-empty")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must be integers in [0, {n_classes})")
    return y


def log_likelihood(spec, params, X, y) -> float:
    """Sum of ``log p(y_i | x_i, theta)`` over the batch."""
    y = _check_labels(y, spec.n_outputs)
    z = logits(spec, params, np.atleast_2d(X))
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(logp[np.arange(len(y)), y].sum())


def log_posterior(spec, params, X, y, prior_precision=1.0, data_scale=1.0) -> float:
    """Unnormalized log posterior with an isotropic Gaussian prior."""
    theta = params.theta
    return data_scale * log_likelihood(spec, params, X, y) - 0.5 * prior_precision * float(theta @ theta)


def grad_log_posterior(spec, params, X, y, prior_precision=1.0, data_scale=1.0) -> np.ndarray:
    """Gradient of ``data_scale * log p(y|X, theta) - (lambda/2)|theta|^2``.

    ``data_scale`` is ``N / batch_size`` when ``X, y`` is a mini-batch of a
    dataset of size ``N``.
    """
    X = np.atleast_2d(_check(spec, params, X))
    y = _check_labels(y, spec.n_outputs)
    if len(y) != len(X):
        raise DimensionError("X and y lengths differ")
    p = softmax(logits(spec, params, X))
    dz = -p
    dz[np.arange(len(y)), y] += 1.0
    g = backprop(spec, params, X, dz)
    return data_scale * g - prior_precision * params.theta


def count_macs(spec: MlpSpec) -> int:
    """Multiply-accumulates per prediction; bias additions are not counted."""
    w = spec.layer_widths
    return sum(a * b for a, b in zip(w[:-1], w[1:]))


def mc_dropout_final_layer(spec: MlpSpec, params: ParamSet, rate: float, n_samples: int,
                           seed) -> list:
    """Emulate last-layer MC dropout by pre-generating masked parameter copies.

    Each copy drops every input column of the final weight matrix with
    probability ``rate`` and scales survivors by ``1 / (1 - rate)``. All other
    entries are shared verbatim.
    """
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if n_samples < 1:
        raise ParameterError("need at least one sample")
    if not params.matches(spec):
        raise DimensionError("parameter layout does not match the network spec")
    rng = np.random.default_rng(seed)
    last = spec.layout[-1]
    W = params.weight(spec.n_layers - 1)
    out = []
    for _ in range(n_samples):
        keep = rng.random(last.n_in) >= rate
        scaled = np.where(keep, W / (1.0 - rate), 0.0)
        theta = params.theta.copy()
        theta[last.w_off:last.b_off] = scaled.ravel()
        out.append(ParamSet(theta, params.layout))
    return out
