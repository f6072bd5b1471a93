import numpy as np
import pytest

from edgebayes.data import gen_synthetic


def effective_sample_size(x) -> float:
    """Geyer initial-positive-sequence estimate for a 1-D chain."""
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    n = x.size
    f = np.fft.rfft(x, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    rho = acov / acov[0]
    s = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        s += pair
    tau = max(2.0 * s - 1.0, 1.0)
    return n / tau


def gaussian_moment_check(samples, mean, var):
    """Mean within 3 standard errors (using ESS) and variance within 15%."""
    s = np.asarray(samples).ravel()
    ess = effective_sample_size(s)
    ok_mean = abs(s.mean() - mean) <= 3.0 * np.sqrt(s.var(ddof=1) / ess)
    ok_var = abs(s.var(ddof=1) - var) <= 0.15 * var
    return ok_mean and ok_var


@pytest.fixture(scope="session")
def moons():
    Xtr, ytr = gen_synthetic("moons", 400, 0.2, 1)
    Xte, yte = gen_synthetic("moons", 400, 0.2, 2)
    Xood, _ = gen_synthetic("moons", 200, 0.2, 3, ood_shift=(0.5, 3.0, 3.0))
    return Xtr, ytr, Xte, yte, Xood


@pytest.fixture(scope="session")
def sgld_teacher(moons):
    """Reference 20-member SGLD ensemble on two moons."""
    from edgebayes.nn import MlpSpec
    from edgebayes.sampler import SgldConfig, sgld_ensemble

    Xtr, ytr = moons[:2]
    cfg = SgldConfig(learning_rate=3e-4, burn_in=2000, thinning=50, n_samples=20, seed=4)
    return sgld_ensemble(MlpSpec((2, 32, 32, 2)), Xtr, ytr, cfg)
