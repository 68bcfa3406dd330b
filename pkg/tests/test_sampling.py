import numpy as np
import pytest

from symphony.errors import DofTooSmall
from symphony.numeric import SpdMatrix
from symphony.sampling import RngStream, sample_trunc_normal, sample_wishart_bartlett


def test_streams_reproduce():
    a = RngStream(42, 7).gen.standard_normal(5)
    b = RngStream(42, 7).gen.standard_normal(5)
    c = RngStream(42, 8).gen.standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_streams_look_independent():
    a = RngStream(3, 1).gen.standard_normal(20000)
    b = RngStream(3, 2).gen.standard_normal(20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03


def test_wishart_scalar_moment():
    s, k = 0.7, 5.0
    draws = sample_wishart_bartlett(SpdMatrix([[s]]), k, RngStream(1, 0), size=100_000)
    assert abs(draws.mean() - k * s) < 0.02 * k * s


def test_wishart_matrix_moment_and_psd():
    scale = np.array([[1.0, 0.3, -0.2], [0.3, 2.0, 0.5], [-0.2, 0.5, 1.5]])
    dof = 6.0
    draws = sample_wishart_bartlett(SpdMatrix(scale), dof, RngStream(2, 0), size=100_000)
    mean = draws.mean(axis=0)
    target = dof * scale
    assert np.all(np.abs(mean - target) <= 0.03 * np.abs(target).max())
    assert np.allclose(draws, np.swapaxes(draws, 1, 2))
    assert np.linalg.eigvalsh(draws).min() > -1e-10


def test_wishart_single_draw_and_errors():
    w = sample_wishart_bartlett(SpdMatrix(np.eye(3)), 3.0, RngStream(0, 0))
    w.check()
    with pytest.raises(DofTooSmall):
        sample_wishart_bartlett(SpdMatrix(np.eye(3)), 2.5, RngStream(0, 0))


def test_wishart_reproducible():
    a = sample_wishart_bartlett(SpdMatrix(np.eye(2)), 4.0, RngStream(9, 1), size=3)
    b = sample_wishart_bartlett(SpdMatrix(np.eye(2)), 4.0, RngStream(9, 1), size=3)
    assert np.array_equal(a, b)


def test_trunc_normal_half_normal_mean():
    rng = RngStream(5, 0)
    draws = np.concatenate([sample_trunc_normal(np.zeros(1000), np.ones(1000), 0.0, rng) for _ in range(100)])
    assert draws.min() >= 0
    assert abs(draws.mean() - np.sqrt(2 / np.pi)) < 0.02 * np.sqrt(2 / np.pi)


def test_trunc_normal_far_above_bound():
    x = sample_trunc_normal(np.full(50, 10.0), np.full(50, 1e-6), 0.0, RngStream(0, 0))
    assert np.allclose(x, 10.0, atol=0.01)


def test_trunc_normal_deep_tail_uses_inverse_cdf():
    x = sample_trunc_normal(np.full(2000, -8.0), np.ones(2000), 0.0, RngStream(0, 1))
    assert x.min() >= 0
    assert np.all(np.isfinite(x))
    # the truncated law of N(-8, 1) on [0, inf) has mean close to 1/8
    assert abs(x.mean() - 0.1226) < 0.01


def test_trunc_normal_full_covariance_uses_diagonal():
    cov = np.array([[1.0, 0.9], [0.9, 4.0]])
    a = sample_trunc_normal([1.0, 2.0], cov, 0.0, RngStream(4, 0))
    b = sample_trunc_normal([1.0, 2.0], np.array([1.0, 4.0]), 0.0, RngStream(4, 0))
    assert np.array_equal(a, b)
