"""Distribution functions used by the synthetic streams.

Standard normal CDF / inverse CDF, the regularized lower incomplete gamma
function for real shape parameters, and the chi-squared CDF / inverse CDF
built on it. The scalar kernels are numba-compiled so that ground-truth
tables over a full sine period can be computed quickly.

Sampling uses numpy's ``Generator`` on a ``PCG64`` bit generator. For a fixed
numpy version the sample sequence for a given seed is identical on every
platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)

_GAMMA_EPS = 1e-17
_GAMMA_MAX_ITER = 100_000
_TINY = 1e-300

# Acklam's rational approximation for the normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549671010931159e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


@njit(cache=True)
def _ncdf(z):
    return 0.5 * math.erfc(-z / SQRT2)


@njit(cache=True)
def _nppf(p):
    if p < _P_LOW:
        r = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5])
             / ((((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0))
    elif p <= 1.0 - _P_LOW:
        r = p - 0.5
        s = r * r
        x = ((((((_A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * r
             / (((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0))
    else:
        r = math.sqrt(-2.0 * math.log1p(-p))
        x = -((((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5])
              / ((((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0))
    # Newton refinement on the exact CDF; the approximation is only good to
    # about 1e-9 relative, so a second step is needed near the region seams
    for _ in range(2):
        dens = math.exp(-0.5 * x * x) / SQRT2PI
        if dens > 0.0:
            x -= (_ncdf(x) - p) / dens
    return x


@njit(cache=True)
def _gamma_series(s, x):
    # P(s, x) by the power series; converges fast for x < s + 1
    a = s
    term = 1.0 / s
    total = term
    for _ in range(_GAMMA_MAX_ITER):
        a += 1.0
        term *= x / a
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + s * math.log(x) - math.lgamma(s))


@njit(cache=True)
def _gamma_cfrac(s, x):
    # Q(s, x) by the Legendre continued fraction, modified Lentz
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAX_ITER):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return math.exp(-x + s * math.log(x) - math.lgamma(s)) * h


@njit(cache=True)
def _reg_lower_gamma(s, x):
    if x <= 0.0:
        return 0.0
    if x < s + 1.0:
        return min(_gamma_series(s, x), 1.0)
    return max(1.0 - _gamma_cfrac(s, x), 0.0)


@njit(cache=True)
def _chi2_cdf(x, dof):
    return _reg_lower_gamma(0.5 * dof, 0.5 * x)


@njit(cache=True)
def _chi2_pdf(x, dof):
    if x <= 0.0:
        return 0.0
    k = 0.5 * dof
    return math.exp((k - 1.0) * math.log(x) - 0.5 * x - k * math.log(2.0) - math.lgamma(k))


@njit(cache=True)
def _chi2_ppf(p, dof):
    # Wilson-Hilferty seed
    h = 2.0 / (9.0 * dof)
    g = 1.0 - h + _nppf(p) * math.sqrt(h)
    x = dof * g * g * g
    if not x > 0.0:
        x = dof * 1e-3
    # bracket [lo, hi] with cdf(lo) <= p <= cdf(hi)
    lo = 0.0
    hi = x
    while _chi2_cdf(hi, dof) < p:
        lo = hi
        hi *= 2.0
    probe = 0.5 * x
    while probe > 1e-300 and _chi2_cdf(probe, dof) > p:
        hi = probe
        probe *= 0.5
    if probe > lo and probe < hi:
        lo = probe
    # Newton steps, falling back to bisection whenever they leave the bracket
    for _ in range(400):
        f = _chi2_cdf(x, dof) - p
        if f == 0.0:
            return x
        if f < 0.0:
            lo = x
        else:
            hi = x
        if hi - lo <= 4e-16 * hi:
            break
        dens = _chi2_pdf(x, dof)
        nxt = x - f / dens if dens > 0.0 else -1.0
        if not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
        if nxt == x:
            break
        x = nxt
    return x


@njit(cache=True)
def _chi2_ppf_table(probs, dofs):
    out = np.empty((dofs.shape[0], probs.shape[0]))
    for i in range(dofs.shape[0]):
        for k in range(probs.shape[0]):
            out[i, k] = _chi2_ppf(probs[k], dofs[i])
    return out


def _check_prob(p: float) -> float:
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie strictly in (0, 1), got {p!r}")
    return p


def _check_dof(dof: float) -> float:
    dof = float(dof)
    if not (dof > 0.0 and math.isfinite(dof)):
        raise ValueError(f"degrees of freedom must be positive and finite, got {dof!r}")
    return dof


def normal_cdf(z: float) -> float:
    """Standard normal CDF."""
    return float(_ncdf(float(z)))


def normal_inv_cdf(p: float) -> float:
    """Standard normal quantile function."""
    return float(_nppf(_check_prob(p)))


def reg_lower_gamma(s: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(s, x).

    Power series for ``x < s + 1`` and a continued fraction for the
    complement otherwise.
    """
    s = float(s)
    x = float(x)
    if not (s > 0.0 and math.isfinite(s)):
        raise ValueError(f"shape must be positive and finite, got {s!r}")
    if not x >= 0.0:
        raise ValueError(f"x must be non-negative, got {x!r}")
    if math.isinf(x):
        return 1.0
    return float(_reg_lower_gamma(s, x))


def chi2_cdf(x: float, dof: float) -> float:
    dof = _check_dof(dof)
    x = float(x)
    if x <= 0.0:
        return 0.0
    return reg_lower_gamma(0.5 * dof, 0.5 * x)


def chi2_inv_cdf(p: float, dof: float) -> float:
    """Chi-squared quantile for real-valued ``dof``.

    Bracketed search seeded by the Wilson-Hilferty approximation; Newton
    steps are taken when they stay inside the bracket, bisection otherwise.
    """
    return float(_chi2_ppf(_check_prob(p), _check_dof(dof)))


def chi2_inv_cdf_table(probs, dofs) -> np.ndarray:
    """Quantile matrix with one row per entry of ``dofs``, one column per probability."""
    probs = np.asarray(probs, dtype=float)
    dofs = np.asarray(dofs, dtype=float)
    for p in probs:
        _check_prob(p)
    for d in dofs:
        _check_dof(d)
    return _chi2_ppf_table(probs, dofs)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_normal(rng: np.random.Generator, mean=0.0, sd=1.0, size=None):
    if np.any(np.asarray(sd) <= 0):
        raise ValueError("sd must be positive")
    return rng.normal(mean, sd, size)


def sample_chi2(rng: np.random.Generator, dof, size=None):
    """Chi-squared draws as Gamma(dof / 2, scale 2); ``dof`` may be non-integer or an array."""
    if np.any(np.asarray(dof) <= 0):
        raise ValueError("dof must be positive")
    return rng.gamma(np.asarray(dof, dtype=float) / 2.0, 2.0, size)


@dataclass(frozen=True)
class NormalSpec:
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError(f"sd must be positive, got {self.sd!r}")

    def cdf(self, x: float) -> float:
        return normal_cdf((x - self.mean) / self.sd)

    def inv_cdf(self, p: float) -> float:
        return self.mean + self.sd * normal_inv_cdf(p)

    def sample(self, rng: np.random.Generator, size=None):
        return sample_normal(rng, self.mean, self.sd, size)


@dataclass(frozen=True)
class ChiSquaredSpec:
    dof: float

    def __post_init__(self):
        _check_dof(self.dof)

    def cdf(self, x: float) -> float:
        return chi2_cdf(x, self.dof)

    def inv_cdf(self, p: float) -> float:
        return chi2_inv_cdf(p, self.dof)

    def sample(self, rng: np.random.Generator, size=None):
        return sample_chi2(rng, self.dof, size)


DistributionSpec = Union[NormalSpec, ChiSquaredSpec]
