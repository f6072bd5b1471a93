import numpy as np
import pytest
from scipy.stats import norm

from edgebayes.data import UNLABELED, gen_synthetic, read_csv, shift, split, to_csv, write_csv
from edgebayes.errors import DataError, ParameterError


def test_noiseless_moons_on_curves():
    X, y = gen_synthetic("moons", 4, 0.0, 0)
    assert list(y) == [0, 0, 1, 1]
    a, b = X[y == 0], X[y == 1]
    np.testing.assert_allclose(a[:, 0] ** 2 + a[:, 1] ** 2, 1.0, atol=1e-15)
    np.testing.assert_allclose((1 - b[:, 0]) ** 2 + (0.5 - b[:, 1]) ** 2, 1.0, atol=1e-15)
    assert (a[:, 1] >= 0).all() and (b[:, 1] <= 0.5).all()


def test_same_seed_same_bytes(tmp_path):
    for i in range(2):
        write_csv(tmp_path / f"{i}.csv", *gen_synthetic("moons", 200, 0.2, 7))
    assert (tmp_path / "0.csv").read_bytes() == (tmp_path / "1.csv").read_bytes()
    assert to_csv(*gen_synthetic("moons", 50, 0.2, 8)) != to_csv(*gen_synthetic("moons", 50, 0.2, 7))


def test_blobs_bayes_optimal_accuracy():
    # centers at +-1.5 with unit sd: the optimal rule is x0 > 0 with accuracy Phi(1.5)
    oracle = norm.cdf(1.5)
    assert oracle >= 0.93
    X, y = gen_synthetic("blobs", 200000, 1.0, 0)
    acc = float(((X[:, 0] > 0).astype(int) == y).mean())
    assert abs(acc - oracle) <= 5 * np.sqrt(oracle * (1 - oracle) / len(y))
    assert acc >= 0.93


def test_ood_shift_rotation_and_labels():
    X, _ = gen_synthetic("moons", 30, 0.1, 1)
    Xo, yo = gen_synthetic("moons", 30, 0.1, 1, ood_shift=(np.pi / 2, 3.0, -1.0))
    assert (yo == UNLABELED).all()
    np.testing.assert_allclose(Xo, np.column_stack([-X[:, 1] + 3.0, X[:, 0] - 1.0]), atol=1e-14)
    np.testing.assert_allclose(shift(X), X)


def test_bad_arguments():
    with pytest.raises(ParameterError):
        gen_synthetic("spirals", 10, 0.1, 0)
    with pytest.raises(ParameterError):
        gen_synthetic("moons", 1, 0.1, 0)


def test_csv_round_trip_exact(tmp_path):
    X, y = gen_synthetic("blobs", 25, 0.7, 3)
    write_csv(tmp_path / "d.csv", X, y)
    X2, y2 = read_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(X2, X)
    np.testing.assert_array_equal(y2, y)


@pytest.mark.parametrize("text", ["", "a,b,label\n1,2,0\n", "x0,x1,label\n1,2\n", "x0,x1,label\n1,zz,0\n"])
def test_read_csv_errors(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError):
        read_csv(p)


def test_read_missing_file(tmp_path):
    with pytest.raises(DataError):
        read_csv(tmp_path / "nope.csv")


def test_split_partitions():
    X, y = gen_synthetic("moons", 100, 0.2, 0)
    Xtr, ytr, Xte, yte = split(X, y, 0.25, 0)
    assert len(Xte) == 25 and len(Xtr) == 75
    both = np.concatenate([Xtr, Xte])
    assert sorted(map(tuple, both)) == sorted(map(tuple, X))
