import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from edgebayes.errors import DataError, DimensionError, DomainError, NumericError, ParameterError
from edgebayes.nn import (F16, F32, Q8, MlpSpec, ParamSet, Tensor, count_macs, dequantize, entropy, forward,
                          grad_log_posterior, init_params, log_posterior, matmul, mc_dropout_final_layer,
                          quantize, softmax)


# --- matmul ---

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), b), b)


def test_matmul_zero():
    out = matmul(np.zeros((3, 4)), np.random.default_rng(0).normal(size=(4, 5)))
    np.testing.assert_array_equal(out, np.zeros((3, 5)))


def test_matmul_hand_case():
    out = matmul(Tensor.from_array([[1, 2], [3, 4]]), Tensor.from_array([[5, 6], [7, 8]]))
    assert isinstance(out, Tensor)
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_quantized():
    with pytest.raises(ParameterError):
        matmul(quantize(Tensor.from_array(np.ones((2, 2))), Q8), np.ones((2, 2)))


def test_matmul_matches_numpy():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 11)), rng.normal(size=(11, 5))
    np.testing.assert_allclose(matmul(a, b), a @ b, rtol=1e-12, atol=1e-12)


def test_matmul_empty_inner():
    np.testing.assert_array_equal(matmul(np.ones((2, 0)), np.ones((0, 3))), np.zeros((2, 3)))


# --- softmax / entropy ---

def test_softmax_uniform():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=0, atol=1e-15)


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.7, 400.0])
def test_softmax_log2_offset(c):
    np.testing.assert_allclose(softmax([c, c + np.log(2.0)]), [1 / 3, 2 / 3], rtol=1e-12)


def test_softmax_no_overflow():
    p = softmax([1000.0, 0.0])
    assert np.isfinite(p).all()
    assert p[0] == pytest.approx(1.0) and p[1] < 1e-300


def test_softmax_nan():
    with pytest.raises(NumericError):
        softmax([0.0, np.nan])


def test_entropy_cases():
    assert entropy(np.full(5, 0.2)) == pytest.approx(np.log(5), abs=1e-14)
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    assert entropy([0.5, 0.5]) == pytest.approx(0.6931471805599453, abs=1e-15)


def test_entropy_domain():
    with pytest.raises(DomainError):
        entropy([-0.1, 1.1])
    with pytest.raises(DomainError):
        entropy([0.3, 0.3])


# --- quantization ---

def test_q8_extremes():
    q = quantize(Tensor.from_array([-1.0, 0.0, 1.0]), Q8)
    assert q.quant.scale == pytest.approx(1 / 127)
    np.testing.assert_array_equal(q.data, [-127, 0, 127])


def test_q8_all_zero():
    q = quantize(Tensor.from_array(np.zeros(4)), Q8)
    assert q.quant.scale == 1.0
    np.testing.assert_array_equal(q.data, 0)


def test_q8_nan():
    with pytest.raises(NumericError):
        quantize(Tensor.from_array([1.0, np.nan]), Q8)


def test_q8_round_trip_bound_sampled():
    rng = np.random.default_rng(2)
    for _ in range(200):
        x = rng.normal(size=rng.integers(1, 300)) * 10 ** rng.uniform(-3, 3)
        q = quantize(Tensor.from_array(x), Q8)
        err = np.abs(dequantize(q).data - x).max()
        assert err <= q.quant.scale / 2 * (1 + 1e-12)
        assert np.abs(q.data).max() == 127


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
def test_q8_round_trip_property(xs):
    x = np.array(xs)
    q = quantize(Tensor.from_array(x), Q8)
    assert np.abs(q.data.astype(int)).max() <= 127
    assert np.abs(dequantize(q).data - x).max() <= q.quant.scale / 2 * (1 + 1e-9)


def test_f16_is_round_to_nearest_even():
    x = np.array([1.0 + 2 ** -11, 1.0 + 3 * 2 ** -11])  # exact ties in half precision
    q = quantize(Tensor.from_array(x), F16)
    np.testing.assert_array_equal(q.to_numpy(), [1.0, 1.0 + 2 ** -9])


def test_quantize_f32_noop():
    t = Tensor.from_array([1.5])
    assert quantize(t, F32) is t


# --- forward ---

def test_forward_zero_params_uniform():
    spec = MlpSpec((3, 4, 5))
    p = ParamSet.from_theta(spec, np.zeros(spec.n_params))
    np.testing.assert_allclose(forward(spec, p, np.ones(3)), np.full(5, 0.2), atol=1e-15)


def test_forward_hand_softmax():
    spec = MlpSpec((2, 2))
    p = ParamSet.from_theta(spec, [1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    np.testing.assert_allclose(forward(spec, p, [np.log(2.0), 0.0]), [2 / 3, 1 / 3], rtol=1e-14)


def test_forward_normalized_and_batched():
    spec = MlpSpec((4, 8, 3))
    p = init_params(spec, 0)
    X = np.random.default_rng(0).normal(size=(20, 4))
    P = forward(spec, p, X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(P[7], forward(spec, p, X[7]))


def test_forward_dimension_error():
    spec = MlpSpec((2, 3, 2))
    with pytest.raises(DimensionError):
        forward(spec, init_params(spec, 0), np.ones(3))
    with pytest.raises(DimensionError):
        forward(MlpSpec((2, 4, 2)), init_params(spec, 0), np.ones(2))


def test_layout_row_major():
    spec = MlpSpec((2, 3, 1))
    assert spec.layout[0] == (0, 6, 2, 3)
    assert spec.layout[1] == (9, 12, 3, 1)
    assert spec.n_params == 13
    theta = np.arange(13.0)
    p = ParamSet.from_theta(spec, theta)
    np.testing.assert_array_equal(p.weight(0), [[0, 1], [2, 3], [4, 5]])
    np.testing.assert_array_equal(p.bias(0), [6, 7, 8])


def test_paramset_bad_length():
    with pytest.raises(DimensionError):
        ParamSet.from_theta(MlpSpec((2, 2)), np.zeros(5))


def test_spec_invalid():
    with pytest.raises(ParameterError):
        MlpSpec((3,))
    with pytest.raises(ParameterError):
        MlpSpec((3, 0, 2))


# --- gradient ---

def _fd_grad(spec, p, X, y, lam, scale, h=1e-6):
    g = np.zeros(len(p))
    for i in range(len(p)):
        tp, tm = p.theta.copy(), p.theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (log_posterior(spec, ParamSet(tp, p.layout), X, y, lam, scale)
                - log_posterior(spec, ParamSet(tm, p.layout), X, y, lam, scale)) / (2 * h)
    return g


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    spec = MlpSpec((2, 3, 2))
    p = ParamSet.from_theta(spec, rng.normal(size=spec.n_params))
    X, y = rng.normal(size=(8, 2)), rng.integers(0, 2, 8)
    g = grad_log_posterior(spec, p, X, y, 0.7, 3.0)
    fd = _fd_grad(spec, p, X, y, 0.7, 3.0)
    assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-4


def test_gradient_prior_only_limit():
    spec = MlpSpec((2, 3, 2))
    p = ParamSet.from_theta(spec, np.random.default_rng(4).normal(size=spec.n_params))
    X, y = np.ones((3, 2)), np.array([0, 1, 1])
    np.testing.assert_array_equal(grad_log_posterior(spec, p, X, y, 2.5, data_scale=0.0), -2.5 * p.theta)


def test_gradient_data_scale_linear():
    spec = MlpSpec((2, 4, 3))
    p = init_params(spec, 5)
    X, y = np.random.default_rng(5).normal(size=(6, 2)), np.array([0, 1, 2, 0, 1, 2])
    g1 = grad_log_posterior(spec, p, X, y, 0.0, 1.0)
    g2 = grad_log_posterior(spec, p, X, y, 0.0, 2.0)
    np.testing.assert_array_equal(g2, 2.0 * g1)


def test_gradient_label_errors():
    spec = MlpSpec((2, 2))
    p = init_params(spec, 0)
    with pytest.raises(DataError):
        grad_log_posterior(spec, p, np.ones((1, 2)), np.array([2]))
    with pytest.raises(DataError):
        grad_log_posterior(spec, p, np.ones((0, 2)), np.array([], dtype=int))


# --- MACs ---

def test_count_macs():
    assert count_macs(MlpSpec((2, 16, 16, 2))) == 320
    assert count_macs(MlpSpec((7, 3))) == 21
    assert count_macs(MlpSpec((2, 8, 2))) > count_macs(MlpSpec((2, 7, 2)))


# --- MC dropout ---

def test_mc_dropout_rate_zero_copies():
    spec = MlpSpec((2, 5, 3))
    p = init_params(spec, 0)
    for q in mc_dropout_final_layer(spec, p, 0.0, 4, seed=1):
        np.testing.assert_array_equal(q.theta, p.theta)


def test_mc_dropout_half_rate_fraction():
    # P(fraction of 1000 fair coin flips in [0.45, 0.55]) from the binomial CDF
    prob = binom.cdf(550, 1000, 0.5) - binom.cdf(449, 1000, 0.5)
    assert prob >= 0.99
    spec = MlpSpec((2, 1000, 2))
    p = ParamSet.from_theta(spec, np.ones(spec.n_params))
    for seed in range(5):
        (q,) = mc_dropout_final_layer(spec, p, 0.5, 1, seed)
        dropped = (q.weight(1) == 0).all(axis=0).mean()
        assert 0.45 <= dropped <= 0.55
        assert set(np.unique(q.weight(1))) <= {0.0, 2.0}


def test_mc_dropout_deterministic_and_bounds():
    spec = MlpSpec((2, 6, 2))
    p = init_params(spec, 0)
    a = mc_dropout_final_layer(spec, p, 0.3, 5, 9)
    b = mc_dropout_final_layer(spec, p, 0.3, 5, 9)
    for x, z in zip(a, b):
        np.testing.assert_array_equal(x.theta, z.theta)
        np.testing.assert_array_equal(x.theta[:spec.layout[-1].w_off], p.theta[:spec.layout[-1].w_off])
    with pytest.raises(ParameterError):
        mc_dropout_final_layer(spec, p, 1.0, 2, 0)
