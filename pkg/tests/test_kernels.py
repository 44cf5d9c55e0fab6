"""Parity between the jitted kernels and their pure-numpy fallbacks."""
import numpy as np
import pytest

from shiftseg import _kernels
from shiftseg.rng import Stream


def random_cloud(seed, n=600, planar=False):
    s = Stream(seed, "kernel-test")
    pts = s.uniform(3 * n).reshape(n, 3) * 12.0
    if planar:
        pts[:, 2] = 0.0
    return pts


@pytest.mark.parametrize("planar", [False, True])
@pytest.mark.parametrize("k", [1, 8, 32])
def test_knn_paths_bitwise_identical(planar, k):
    pts = random_cloud(3, planar=planar)
    i_nb, d_nb = _kernels.knn(pts, k, use_numba=True)
    i_np, d_np = _kernels.knn(pts, k, use_numba=False)
    assert np.array_equal(i_nb, i_np)
    assert np.array_equal(d_nb, d_np)


def test_knn_with_duplicate_points():
    pts = random_cloud(5, n=100)
    pts[40] = pts[10]
    pts[41] = pts[10]
    i_nb, d_nb = _kernels.knn(pts, 4, use_numba=True)
    i_np, d_np = _kernels.knn(pts, 4, use_numba=False)
    assert np.array_equal(i_nb, i_np)
    assert d_nb[10, 0] == 0.0 and i_nb[10, 0] == 40  # lower index wins the tie


def test_knn_rejects_bad_k():
    pts = random_cloud(1, n=10)
    with pytest.raises(ValueError):
        _kernels.knn(pts, 10)
    with pytest.raises(ValueError):
        _kernels.knn(pts, 0)


@pytest.mark.parametrize("radius", [0.0, 0.8, 2.5])
def test_dilate_paths_identical(radius):
    pts = random_cloud(7)
    mask = Stream(8).uniform(pts.shape[0]) < 0.05
    out_nb = _kernels.dilate(pts, mask, radius, use_numba=True)
    out_np = _kernels.dilate(pts, mask, radius, use_numba=False)
    assert np.array_equal(out_nb, out_np)
    assert np.all(out_nb[mask])  # marked points stay marked


def test_fisher_yates_paths_identical():
    u = Stream(11).uniform(99)
    a = np.arange(100, dtype=np.int64)
    b = a.copy()
    _kernels.fisher_yates(a, u, use_numba=True)
    _kernels.fisher_yates(b, u, use_numba=False)
    assert np.array_equal(a, b)
    assert sorted(a.tolist()) == list(range(100))


def test_leaky_paths_identical():
    x = Stream(13).normal(1000).reshape(50, 20)
    g = Stream(14).normal(1000).reshape(50, 20)
    assert np.array_equal(_kernels.leaky_fwd(x, 0.01, use_numba=True),
                          _kernels.leaky_fwd(x, 0.01, use_numba=False))
    assert np.array_equal(_kernels.leaky_bwd(x, g, 0.01, use_numba=True),
                          _kernels.leaky_bwd(x, g, 0.01, use_numba=False))
