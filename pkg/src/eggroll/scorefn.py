"""Score-function approximators for low-rank perturbation entries.

Three models are provided:

* ``GaussianLimit(sigma0)``: the high-rank limit, S(Z) = -Z / sigma0**4.
* ``MeanFieldR1GGD(s, p)``: exact marginal score of one entry of a B^T for
  rank-1 factors with generalised-Gaussian entries (a K_0 density).
* ``MeanFieldGauss(s, r)``: exact marginal score of one entry of
  (1/sqrt(r)) A B^T for Gaussian factors (a K_{(r-1)/2} density).

The mean-field scores are applied entry by entry.  Both are singular at zero;
inputs with ``|z| < Z_CLAMP`` are evaluated at ``sign(z) * Z_CLAMP``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import integrate

__all__ = [
    "Z_CLAMP",
    "GaussianLimit",
    "MeanFieldR1GGD",
    "MeanFieldGauss",
    "ScoreModel",
    "gaussian_score",
    "bessel_k",
    "log_bessel_k",
    "bessel_k_ratio",
    "bessel_k_quad",
    "mf_density_r1_ggd",
    "mf_score_r1_ggd",
    "mf_density_gauss",
    "mf_score_gauss",
    "apply_score",
]

Z_CLAMP = 1e-8


@dataclass(frozen=True)
class GaussianLimit:
    sigma0: float = 1.0

    def __post_init__(self) -> None:
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")


@dataclass(frozen=True)
class MeanFieldR1GGD:
    s: float
    p: float

    def __post_init__(self) -> None:
        if not (self.s > 0 and self.p > 0):
            raise ValueError("s and p must be positive")


@dataclass(frozen=True)
class MeanFieldGauss:
    s: float
    r: int

    def __post_init__(self) -> None:
        if not self.s > 0 or int(self.r) != self.r or self.r < 1:
            raise ValueError("need s > 0 and integer r >= 1")


ScoreModel = Union[GaussianLimit, MeanFieldR1GGD, MeanFieldGauss]


def gaussian_score(Z, sigma0: float = 1.0) -> np.ndarray:
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")
    return -np.asarray(Z, dtype=np.float64) / sigma0**4


# -- modified Bessel functions of the second kind -----------------------------


def _check_order(nu: float) -> tuple[bool, int]:
    """Classify the order: (is_half_integer, integer part)."""
    if nu < 0:
        raise ValueError(f"order must be non-negative, got {nu}")
    twice = 2.0 * nu
    if twice != round(twice):
        raise ValueError(f"order must be an integer or half-integer, got {nu}")
    twice = int(round(twice))
    return twice % 2 == 1, twice // 2


def _scaled_quad(nu: float, z: float) -> float:
    """e^z K_nu(z) from  int_0^inf exp(-z (cosh t - 1)) cosh(nu t) dt."""

    def integrand(t: float) -> float:
        return math.exp(-z * (math.cosh(t) - 1.0) + nu * t) * 0.5 * (1.0 + math.exp(-2.0 * nu * t))

    # stop once the log-integrand is 60 below its running peak and still falling
    t = 1.0
    log_peak = 0.0
    while True:
        log_val = -z * (math.cosh(t) - 1.0) + nu * t
        log_peak = max(log_peak, log_val)
        if log_val < log_peak - 60.0 and z * math.sinh(t) > nu:
            break
        t *= 1.25
    val, _ = integrate.quad(integrand, 0.0, t, epsabs=0.0, epsrel=1e-13, limit=400)
    return val


def bessel_k_quad(nu: float, z: float) -> float:
    """K_nu(z) by adaptive quadrature of the integral representation (any real nu >= 0)."""
    if not z > 0:
        raise ValueError(f"K_nu(z) needs z > 0, got {z}")
    return _scaled_quad(float(nu), float(z)) * math.exp(-z)


def _half_integer_log_ratios(k: int, z):
    """log K_{1/2}(z) and the ratios K_{j+3/2}/K_{j+1/2}, j = 0..k-1 (upward recurrence)."""
    z = np.asarray(z, dtype=np.float64)
    log_k = 0.5 * np.log(np.pi / (2.0 * z)) - z
    ratios = []
    q = 1.0 + 1.0 / z  # K_{3/2}/K_{1/2}
    for j in range(k):
        if j > 0:
            nu = j + 0.5
            q = 1.0 / q + 2.0 * nu / z
        ratios.append(q)
    return log_k, ratios


def log_bessel_k(nu: float, z):
    """log K_nu(z) for integer or half-integer nu >= 0 and z > 0.

    Half-integer orders use K_{1/2}(z) = sqrt(pi / 2z) e^{-z} and the upward
    recurrence K_{v+1} = K_{v-1} + (2v/z) K_v, carried as ratios so that very
    large values do not overflow.  Integer orders use quadrature.
    """
    half, k = _check_order(nu)
    z_arr = np.asarray(z, dtype=np.float64)
    if np.any(z_arr <= 0):
        raise ValueError("K_nu(z) needs z > 0")
    if half:
        log_k, ratios = _half_integer_log_ratios(k, z_arr)
        for q in ratios:
            log_k = log_k + np.log(q)
        return log_k if z_arr.ndim else float(log_k)
    flat = np.array([math.log(_scaled_quad(k, float(v))) - float(v) for v in z_arr.ravel()])
    return flat.reshape(z_arr.shape) if z_arr.ndim else float(flat[0])


def bessel_k(nu: float, z):
    """Modified Bessel function of the second kind K_nu(z)."""
    return np.exp(log_bessel_k(nu, z))


def bessel_k_ratio(nu: float, z):
    """K_{nu+1}(z) / K_nu(z)."""
    half, k = _check_order(nu)
    z_arr = np.asarray(z, dtype=np.float64)
    if np.any(z_arr <= 0):
        raise ValueError("K_nu(z) needs z > 0")
    if half:
        _, ratios = _half_integer_log_ratios(k + 1, z_arr)
        out = ratios[-1]
    else:
        flat = np.array([_scaled_quad(k + 1, float(v)) / _scaled_quad(k, float(v)) for v in z_arr.ravel()])
        out = flat.reshape(z_arr.shape)
    return out if z_arr.ndim else float(out)


# -- mean-field marginals ------------------------------------------------------


def _r1_arg(z, s, p):
    return 2.0 * np.abs(z) ** (p / 2.0) / s**p


def mf_density_r1_ggd(z: float, s: float, p: float) -> float:
    """Density of a*b with a, b ~ GG(s, p) independent; +inf at z = 0."""
    if not (s > 0 and p > 0):
        raise ValueError("s and p must be positive")
    if z == 0:
        return math.inf
    const = p / (s * math.gamma(1.0 / p)) ** 2
    return const * float(bessel_k(0, _r1_arg(z, s, p)))


def mf_score_r1_ggd(z: float, s: float, p: float) -> float:
    """d/dz log of :func:`mf_density_r1_ggd`; odd in z."""
    if not (s > 0 and p > 0):
        raise ValueError("s and p must be positive")
    sign = -1.0 if z < 0 else 1.0
    az = max(abs(z), Z_CLAMP)
    x = float(_r1_arg(az, s, p))
    return -float(bessel_k_ratio(0, x)) * p * az ** (p / 2.0 - 1.0) * sign / s**p


def _gauss_log_density(z: float, s: float, r: int) -> float:
    nu = (r - 1) / 2.0
    az = abs(z)
    if az == 0:
        if r == 1:
            return math.inf
        # small-argument limit K_nu(x) ~ Gamma(nu)/2 (2/x)^nu
        return (
            0.5 * math.log(r)
            + math.lgamma(nu)
            - 2.0 * math.log(s)
            - 0.5 * math.log(math.pi)
            - math.lgamma(r / 2.0)
        )
    u = math.sqrt(r) * az
    x = 2.0 * u / s**2
    return (
        math.log(2.0 * math.sqrt(r))
        + nu * math.log(u)
        - (r + 1) * math.log(s)
        - 0.5 * math.log(math.pi)
        - math.lgamma(r / 2.0)
        + float(log_bessel_k(nu, x))
    )


def mf_density_gauss(z: float, s: float, r: int) -> float:
    """Marginal density of one entry of (1/sqrt(r)) A B^T, entries of A, B ~ GG(s, 2)."""
    if not s > 0 or r < 1 or int(r) != r:
        raise ValueError("need s > 0 and integer r >= 1")
    return math.exp(_gauss_log_density(z, s, int(r)))


def mf_score_gauss(z: float, s: float, r: int) -> float:
    """d/dz log of :func:`mf_density_gauss`; odd in z."""
    if not s > 0 or r < 1 or int(r) != r:
        raise ValueError("need s > 0 and integer r >= 1")
    sign = -1.0 if z < 0 else 1.0
    zc = sign * max(abs(z), Z_CLAMP)
    x = 2.0 * math.sqrt(r) * abs(zc) / s**2
    ratio = float(bessel_k_ratio((r - 1) / 2.0, x))
    return (r - 1) / zc - 2.0 * math.sqrt(r) * sign / s**2 * ratio


def apply_score(Z, model: ScoreModel) -> np.ndarray:
    """Apply the chosen score approximator entry by entry."""
    Z = np.asarray(Z, dtype=np.float64)
    if isinstance(model, GaussianLimit):
        return gaussian_score(Z, model.sigma0)
    if isinstance(model, MeanFieldR1GGD):
        fn = np.vectorize(lambda v: mf_score_r1_ggd(v, model.s, model.p), otypes=[np.float64])
        return fn(Z)
    if isinstance(model, MeanFieldGauss):
        r = int(model.r)
        if r % 2 == 0:
            # half-integer order: vectorised recurrence
            sign = np.where(Z < 0, -1.0, 1.0)
            zc = sign * np.maximum(np.abs(Z), Z_CLAMP)
            x = 2.0 * math.sqrt(r) * np.abs(zc) / model.s**2
            return (r - 1) / zc - 2.0 * math.sqrt(r) * sign / model.s**2 * bessel_k_ratio((r - 1) / 2.0, x)
        fn = np.vectorize(lambda v: mf_score_gauss(v, model.s, r), otypes=[np.float64])
        return fn(Z)
    raise TypeError(f"unknown score model {model!r}")
