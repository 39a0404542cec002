import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from eggroll.scorefn import (
    Z_CLAMP,
    GaussianLimit,
    MeanFieldGauss,
    MeanFieldR1GGD,
    apply_score,
    bessel_k,
    bessel_k_quad,
    bessel_k_ratio,
    gaussian_score,
    mf_density_gauss,
    mf_density_r1_ggd,
    mf_score_gauss,
    mf_score_r1_ggd,
)

S2 = math.sqrt(2.0)


def phi(z):
    return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def central_diff_log(density, z, h=1e-6):
    return (math.log(density(z + h)) - math.log(density(z - h))) / (2 * h)


def test_gaussian_score_examples():
    assert np.array_equal(gaussian_score([[1.0, -2.0]], 1.0), [[-1.0, 2.0]])
    assert not gaussian_score(np.zeros((2, 2))).any()
    assert np.array_equal(gaussian_score([[16.0]], 2.0), [[-1.0]])
    with pytest.raises(ValueError):
        gaussian_score([[1.0]], 0.0)


def test_bessel_half_closed_form():
    expect = math.sqrt(math.pi / 2) * math.exp(-1)
    assert bessel_k(0.5, 1.0) == pytest.approx(expect, rel=1e-14)
    assert abs(bessel_k_quad(0.5, 1.0) - expect) < 1e-10
    assert expect == pytest.approx(0.46106850444789454, rel=1e-15)


def test_bessel_k0_value():
    # frozen from the quadrature oracle; scipy.special.kv agrees
    assert bessel_k(0, 1.0) == pytest.approx(0.4210244382407084, rel=1e-11)
    assert bessel_k(0, 1.0) == pytest.approx(special.kv(0, 1.0), rel=1e-11)


def test_bessel_ratio_large_argument():
    assert abs(bessel_k_ratio(0, 50.0) - 1.0) < 0.02


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5, 3.5, 4.5])
@pytest.mark.parametrize("z", [0.1, 0.7, 2.0, 7.5, 20.0])
def test_half_integer_recurrence_vs_quadrature(nu, z):
    assert bessel_k(nu, z) == pytest.approx(bessel_k_quad(nu, z), rel=1e-9)


@pytest.mark.parametrize("nu", [0, 1, 3])
def test_integer_orders_vs_scipy(nu):
    for z in (0.05, 1.0, 10.0, 60.0):
        assert bessel_k(nu, z) == pytest.approx(special.kv(nu, z), rel=1e-10)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_bessel_domain(bad):
    with pytest.raises(ValueError):
        bessel_k(0.5, bad)
    with pytest.raises(ValueError):
        bessel_k(0, bad)


def test_bessel_order_validation():
    with pytest.raises(ValueError):
        bessel_k(0.3, 1.0)
    with pytest.raises(ValueError):
        bessel_k(-1, 1.0)


def test_r1_density_examples():
    assert mf_density_r1_ggd(1.0, 1.0, 2.0) == pytest.approx(2 / math.pi * special.kv(0, 2.0), rel=1e-12)
    assert mf_density_r1_ggd(0.7, 1.3, 1.5) == mf_density_r1_ggd(-0.7, 1.3, 1.5)
    assert mf_density_r1_ggd(0.0, 1.0, 2.0) == math.inf


@pytest.mark.parametrize("s,p", [(1.0, 2.0), (S2, 2.0), (1.0, 1.0), (0.8, 3.0)])
def test_r1_density_normalised(s, p):
    f = lambda z: mf_density_r1_ggd(z, s, p)
    # integrate each side with the log singularity at the left endpoint
    half, _ = integrate.quad(f, 0.0, 20.0, limit=200, points=[1e-6, 1e-3, 0.1, 1.0])
    assert abs(2 * half - 1.0) < 1e-3


def test_r1_score_examples():
    assert mf_score_r1_ggd(1.0, 1.0, 2.0) == pytest.approx(-2 * special.kv(1, 2.0) / special.kv(0, 2.0), rel=1e-12)
    assert mf_score_r1_ggd(0.5, 1.0, 2.0) < 0 < mf_score_r1_ggd(-0.5, 1.0, 2.0)
    fd = central_diff_log(lambda z: mf_density_r1_ggd(z, 1.0, 2.0), 0.8)
    assert mf_score_r1_ggd(0.8, 1.0, 2.0) == pytest.approx(fd, rel=1e-5)


def test_r1_score_clamped_at_zero():
    v = mf_score_r1_ggd(0.0, 1.0, 2.0)
    assert math.isfinite(v)
    assert v == mf_score_r1_ggd(Z_CLAMP, 1.0, 2.0)


def test_gauss_density_reduces_to_r1():
    for z in (0.2, 1.0, 3.0):
        assert mf_density_gauss(z, 1.3, 1) == pytest.approx(mf_density_r1_ggd(z, 1.3, 2.0), rel=1e-10)


@pytest.mark.parametrize("r", [1, 2, 5, 10, 50])
def test_gauss_density_normalised(r):
    f = lambda z: mf_density_gauss(z, S2, r)
    half, _ = integrate.quad(f, 0.0, 20.0, limit=200, points=[1e-6, 1e-3, 0.1, 1.0])
    assert abs(2 * half - 1.0) < 1e-3


def test_gauss_density_zero_limit():
    assert mf_density_gauss(0.0, 1.0, 1) == math.inf
    for r in (2, 3, 7):
        assert mf_density_gauss(0.0, 1.1, r) == pytest.approx(mf_density_gauss(1e-7, 1.1, r), rel=1e-5)


def sup_gap(r, grid=np.linspace(-4, 4, 801)):
    return max(abs(z * mf_density_gauss(z, S2, r) - z * phi(z)) for z in grid if z != 0)


def test_gauss_density_rank50_near_limit():
    assert sup_gap(50) <= 0.02


def test_gauss_density_monotone_convergence():
    gaps = [sup_gap(r) for r in (1, 5, 10, 50)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


@pytest.mark.parametrize("r,z", [(4, 1.3), (1, 0.6), (3, 2.2), (7, 0.4), (12, 1.7)])
def test_gauss_score_matches_density(r, z):
    fd = central_diff_log(lambda v: mf_density_gauss(v, 1.2, r), z)
    assert mf_score_gauss(z, 1.2, r) == pytest.approx(fd, rel=1e-5)


def test_gauss_score_high_rank_limit():
    assert abs(mf_score_gauss(1.0, S2, 64) + 1.0) < 0.05


@settings(max_examples=40, deadline=None)
@given(z=st.floats(0.01, 6.0), r=st.integers(1, 20))
def test_gauss_score_odd(z, r):
    assert mf_score_gauss(-z, S2, r) == pytest.approx(-mf_score_gauss(z, S2, r), rel=1e-12)


def test_gauss_score_odd_example():
    assert mf_score_gauss(-0.4, 1.0, 3) == -mf_score_gauss(0.4, 1.0, 3)


def test_apply_score_variants():
    Z = np.array([[1.0, -2.0]])
    assert np.array_equal(apply_score(Z, GaussianLimit(1.0)), [[-1.0, 2.0]])
    Z = np.array([[0.3, -1.1, 2.0], [0.05, 1.7, -0.6]])
    for r in (3, 4):
        out = apply_score(Z, MeanFieldGauss(S2, r))
        ref = [[mf_score_gauss(v, S2, r) for v in row] for row in Z]
        assert np.allclose(out, ref, rtol=1e-12)
    out = apply_score(Z, MeanFieldR1GGD(1.0, 1.5))
    assert np.allclose(out, [[mf_score_r1_ggd(v, 1.0, 1.5) for v in row] for row in Z], rtol=1e-12)


@pytest.mark.parametrize("model", [GaussianLimit(1.0), MeanFieldGauss(1.0, 1), MeanFieldGauss(1.0, 4), MeanFieldR1GGD(1.0, 2.0)])
def test_apply_score_zero_matrix_finite(model):
    assert np.isfinite(apply_score(np.zeros((3, 2)), model)).all()


@pytest.mark.parametrize("ctor,args", [(GaussianLimit, (0.0,)), (MeanFieldR1GGD, (1.0, 0.0)), (MeanFieldGauss, (1.0, 0)), (MeanFieldGauss, (-1.0, 2))])
def test_score_model_validation(ctor, args):
    with pytest.raises(ValueError):
        ctor(*args)
