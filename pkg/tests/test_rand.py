import math

import numpy as np
import pytest
from scipy import integrate

from dsbmm.errors import InvalidParameter, NonFiniteParameter, NotASimplex, NotPositiveDefinite
from dsbmm.rand import (
    RngStream,
    polya_gamma_mean,
    sample_categorical,
    sample_dirichlet,
    sample_gig,
    sample_inverse_gamma,
    sample_mvn,
    sample_mvn_precision,
    sample_polya_gamma,
)

from conftest import mc_close

N_DRAWS = 100_000


def gig_moments(a, b):
    """First two moments of GIG(1/2, a, b) by quadrature of the density."""
    log_dens = lambda x: -0.5 * math.log(x) - 0.5 * (a * x + b / x)
    # rescale around the mode to keep the integrand O(1)
    mode = (-0.5 + math.sqrt(0.25 + a * b)) / a if b > 0 else 0.0
    shift = log_dens(max(mode, 1e-3))
    f = lambda x, k: x ** k * math.exp(log_dens(x) - shift)
    z = integrate.quad(f, 0, np.inf, args=(0,), limit=200)[0]
    m1 = integrate.quad(f, 0, np.inf, args=(1,), limit=200)[0] / z
    m2 = integrate.quad(f, 0, np.inf, args=(2,), limit=200)[0] / z
    return m1, m2


def test_streams_are_reproducible():
    a = sample_polya_gamma(np.linspace(-3, 3, 50), RngStream(5, 1))
    b = sample_polya_gamma(np.linspace(-3, 3, 50), RngStream(5, 1))
    c = sample_polya_gamma(np.linspace(-3, 3, 50), RngStream(5, 2))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_stream_state_roundtrip():
    s = RngStream(3)
    s.generator.random(10)
    state = s.get_state()
    x = s.generator.random(5)
    s.set_state(state)
    assert np.array_equal(x, s.generator.random(5))


@pytest.mark.parametrize("z", [0.0, 1.0, 2.0, 5.0, 10.0])
def test_polya_gamma_mean(z):
    draws = sample_polya_gamma(np.full(N_DRAWS, z), RngStream(11, int(z)))
    assert np.all(draws > 0)
    target = 0.25 if z == 0 else math.tanh(z / 2) / (2 * z)
    assert mc_close(draws, target)


def test_polya_gamma_examples():
    d0 = sample_polya_gamma(np.zeros(N_DRAWS), RngStream(1))
    assert abs(d0.mean() - 0.25) < 0.005
    d10 = sample_polya_gamma(np.full(N_DRAWS, 10.0), RngStream(2))
    assert abs(d10.mean() - math.tanh(5) / 20) < 0.002


def test_polya_gamma_variance():
    # Var PG(1, z) = (sinh z - z) / (4 z^3 cosh^2(z/2))
    z = 1.5
    draws = sample_polya_gamma(np.full(N_DRAWS, z), RngStream(4))
    var = (math.sinh(z) - z) / (4 * z ** 3 * math.cosh(z / 2) ** 2)
    sq = (draws - draws.mean()) ** 2
    assert mc_close(sq, var)


def test_polya_gamma_symmetric_and_scalar():
    x = sample_polya_gamma(-2.0, RngStream(9))
    assert isinstance(x, float) and x > 0
    assert np.isclose(polya_gamma_mean(-2.0), polya_gamma_mean(2.0))


def test_polya_gamma_rejects_nonfinite():
    with pytest.raises(NonFiniteParameter):
        sample_polya_gamma(np.inf, RngStream(0))


@pytest.mark.parametrize("a", [0.5, 2.0])
@pytest.mark.parametrize("b", [0.0, 1.0, 5.0])
def test_gig_moments_match_quadrature(a, b):
    draws = sample_gig(np.full(N_DRAWS, a), np.full(N_DRAWS, b), RngStream(17, int(10 * a + b)))
    assert np.all(draws > 0)
    m1, m2 = gig_moments(a, b)
    assert mc_close(draws, m1)
    assert mc_close(draws ** 2, m2)


def test_gig_gamma_reduction():
    draws = sample_gig(2.0, np.zeros(N_DRAWS), RngStream(21))
    assert abs(draws.mean() - 0.5) < 0.01


def test_gig_quadrature_example():
    draws = sample_gig(2.0, np.full(N_DRAWS, 3.0), RngStream(22))
    m1, _ = gig_moments(2.0, 3.0)
    assert abs(draws.mean() / m1 - 1) < 0.02


def test_gig_invalid():
    with pytest.raises(InvalidParameter):
        sample_gig(0.0, 1.0, RngStream(0))
    with pytest.raises(InvalidParameter):
        sample_gig(1.0, -1.0, RngStream(0))


def test_dirichlet():
    g = RngStream(3)
    draws = np.array([sample_dirichlet([1.0, 1.0], g) for _ in range(20_000)])
    assert np.allclose(draws.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.abs(draws.mean(axis=0) - 0.5) < 0.01)
    draws = np.array([sample_dirichlet([2.0, 2.0], g) for _ in range(20_000)])
    assert abs(draws[:, 0].var() - 1 / 20) < 0.005
    with pytest.raises(InvalidParameter):
        sample_dirichlet([1.0, 0.0], g)


def test_inverse_gamma():
    d = sample_inverse_gamma(np.full(N_DRAWS, 10.0), 1.0, RngStream(4))
    assert np.all(d > 0) and abs(d.mean() - 1 / 9) < 0.005
    d = sample_inverse_gamma(np.full(N_DRAWS, 3.0), 6.0, RngStream(5))
    assert abs(d.mean() - 3) < 0.1
    with pytest.raises(InvalidParameter):
        sample_inverse_gamma(0.0, 1.0, RngStream(0))


def test_mvn():
    g = RngStream(6)
    d = np.array([sample_mvn([0.0, 0.0], np.eye(2), g) for _ in range(N_DRAWS)])
    assert np.all(np.abs(np.cov(d.T) - np.eye(2)) < 0.02)
    d = np.array([sample_mvn([1.0, 2.0], np.diag([4.0, 9.0]), g) for _ in range(N_DRAWS)])
    assert np.all(np.abs(d.std(axis=0) - [2.0, 3.0]) < 0.05)
    with pytest.raises(NotPositiveDefinite):
        sample_mvn([0.0, 0.0], np.array([[1.0, 2.0], [2.0, 1.0]]), g)


def test_mvn_precision_form():
    g = RngStream(7)
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    h = np.array([1.0, -1.0])
    d = np.array([sample_mvn_precision(P, h, g) for _ in range(50_000)])
    cov = np.linalg.inv(P)
    assert np.allclose(d.mean(axis=0), cov @ h, atol=0.02)
    assert np.allclose(np.cov(d.T), cov, atol=0.02)


def test_categorical():
    g = RngStream(8)
    assert all(sample_categorical([1.0, 0.0, 0.0], g) == 0 for _ in range(100))
    d = np.array([sample_categorical([0.25, 0.75], g) for _ in range(N_DRAWS)])
    assert abs(np.mean(d == 0) - 0.25) < 0.01
    with pytest.raises(NotASimplex):
        sample_categorical([0.3, 0.3, 0.5], g)
