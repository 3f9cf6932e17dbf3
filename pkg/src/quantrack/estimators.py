"""Incremental quantile estimators.

Three update rules share one state container, :class:`QuantileBank`:

* ``dumiqe``: independent multiplicative updates, one per target probability.
  Each estimate moves up by a factor ``1 + step*q`` when the sample is above
  it and down by ``1 - step*(1-q)`` otherwise.
* ``dumiqe-add``: the same comparison rule with additive moves.
* ``mdumiqe``: multiplicative updates whose per-quantile step is shrunk by the
  gap ratio to the neighbouring estimates, so the estimate vector never loses
  its ordering. ``step`` is the fraction ``beta`` in [0, 1) of a neighbouring
  gap that one update may consume.

Estimates live in *transformed* space. With the ``exp`` transform the bank
tracks quantiles of ``exp(X)``; since the map is strictly increasing,
:meth:`QuantileBank.quantiles` maps them back with ``log``.

A bank is a plain single-threaded state machine. Serialize updates externally;
distinct banks can be updated from different threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from numba import njit

EXP_SAFE_LIMIT = 700.0
TIE_EPS = 1e-9
DEFAULT_WARMUP_WINDOW = 100


class Variant(str, Enum):
    DUMIQE = "dumiqe"
    DUMIQE_ADD = "dumiqe-add"
    MDUMIQE = "mdumiqe"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        if value == "dumiqe-mult":
            return cls.DUMIQE
        return cls(value)

    @property
    def multiplicative(self) -> bool:
        return self is not Variant.DUMIQE_ADD

    @property
    def code(self) -> int:
        return _VARIANT_CODES[self]


_VARIANT_CODES = {Variant.DUMIQE: 0, Variant.DUMIQE_ADD: 1, Variant.MDUMIQE: 2}


class Transform(str, Enum):
    IDENTITY = "identity"
    EXP = "exp"


def apply_transform(x: float, transform: "Transform | str", *, require_positive: bool = False) -> float:
    """Map a raw sample into the space the estimator works in.

    ``require_positive`` is set for multiplicative banks, which cannot track a
    non-positive value under the identity transform.
    """
    transform = Transform(transform)
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"sample must be finite, got {x!r}")
    if transform is Transform.EXP:
        if abs(x) > EXP_SAFE_LIMIT:
            raise ValueError(f"|x| must be <= {EXP_SAFE_LIMIT} for the exp transform, got {x!r}")
        return math.exp(x)
    if require_positive and x <= 0.0:
        raise ValueError(
            f"multiplicative estimators require positive samples under the identity transform, got {x!r}; "
            "use the exp transform for data with non-positive values"
        )
    return x


def invert_transform(y: float, transform: "Transform | str") -> float:
    transform = Transform(transform)
    y = float(y)
    if transform is Transform.EXP:
        if not y > 0.0:
            raise ValueError(f"exp-transformed value must be positive, got {y!r}")
        return math.log(y)
    return y


def apply_transform_array(xs: np.ndarray, transform: "Transform | str", *, require_positive: bool = False) -> np.ndarray:
    transform = Transform(transform)
    xs = np.asarray(xs, dtype=float)
    if not np.all(np.isfinite(xs)):
        raise ValueError("samples must be finite")
    if transform is Transform.EXP:
        if xs.size and np.max(np.abs(xs)) > EXP_SAFE_LIMIT:
            raise ValueError(f"|x| must be <= {EXP_SAFE_LIMIT} for the exp transform")
        return np.exp(xs)
    if require_positive and xs.size and np.min(xs) <= 0.0:
        raise ValueError(
            "multiplicative estimators require positive samples under the identity transform; "
            "use the exp transform for data with non-positive values"
        )
    return xs.copy()


def invert_transform_array(ys: np.ndarray, transform: "Transform | str") -> np.ndarray:
    if Transform(transform) is Transform.EXP:
        return np.log(ys)
    return np.array(ys, dtype=float)


@dataclass(frozen=True)
class QuantileTargets:
    """Strictly increasing probabilities, each in (0, 1)."""

    probs: tuple[float, ...]
    placement: str | None = field(default=None, compare=False)

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if not probs:
            raise ValueError("at least one target probability is required")
        for p in probs:
            if not 0.0 < p < 1.0:
                raise ValueError(f"target probabilities must lie strictly in (0, 1), got {p!r}")
        if any(b <= a for a, b in zip(probs, probs[1:])):
            raise ValueError(f"target probabilities must be strictly increasing, got {probs}")

    def __len__(self) -> int:
        return len(self.probs)

    def as_array(self) -> np.ndarray:
        return np.array(self.probs, dtype=float)


@dataclass(frozen=True)
class EstimatorConfig:
    variant: Variant
    step: float
    transform: Transform = Transform.IDENTITY
    q_min: float = 1e-12
    gap_min: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "transform", Transform(self.transform))
        step = float(self.step)
        object.__setattr__(self, "step", step)
        if not (math.isfinite(step) and step >= 0.0):
            raise ValueError(f"step must be a non-negative finite number, got {self.step!r}")
        if self.variant is Variant.MDUMIQE and not step < 1.0:
            raise ValueError(f"beta must lie in [0, 1) for mdumiqe, got {step!r}")
        if not self.q_min > 0.0:
            raise ValueError(f"q_min must be positive, got {self.q_min!r}")
        if not self.gap_min >= 0.0:
            raise ValueError(f"gap_min must be non-negative, got {self.gap_min!r}")


# --- compiled update kernels -------------------------------------------------
#
# The bank methods and the batch drivers in ``evaluation`` both go through
# _update(), so there is exactly one implementation of each rule.

@njit(cache=True)
def _gap_ratio(lo, hi, q_lo, q_hi):
    return (hi - lo) / ((1.0 - q_hi) * hi + q_lo * lo)


@njit(cache=True)
def _h_factors(est, probs, out):
    # out[k] = H for estimate k, evaluated on the current (pre-update) vector
    K = est.shape[0]
    prev = _gap_ratio(est[0], est[1], probs[0], probs[1])
    out[0] = prev
    for k in range(1, K - 1):
        nxt = _gap_ratio(est[k], est[k + 1], probs[k], probs[k + 1])
        out[k] = prev if prev < nxt else nxt
        prev = nxt
    out[K - 1] = prev


@njit(cache=True)
def _dumiqe_update(est, probs, lam, x):
    for k in range(est.shape[0]):
        if est[k] < x:
            est[k] *= 1.0 + lam * probs[k]
        else:
            est[k] *= 1.0 - lam * (1.0 - probs[k])


@njit(cache=True)
def _dumiqe_add_update(est, probs, lam, x):
    for k in range(est.shape[0]):
        if est[k] < x:
            est[k] += lam * probs[k]
        else:
            est[k] -= lam * (1.0 - probs[k])


@njit(cache=True)
def _mdumiqe_update(est, probs, beta, x, q_min, gap_min, h):
    _h_factors(est, probs, h)
    for k in range(est.shape[0]):
        if est[k] < x:
            est[k] *= 1.0 + beta * h[k] * probs[k]
        else:
            est[k] *= 1.0 - beta * h[k] * (1.0 - probs[k])
        if est[k] < q_min:
            est[k] = q_min
    if gap_min > 0.0:
        for k in range(1, est.shape[0]):
            if est[k] <= est[k - 1]:
                est[k] = est[k - 1] + gap_min * est[k - 1]


@njit(cache=True)
def _update(code, est, probs, step, x, q_min, gap_min, h):
    if code == 0:
        _dumiqe_update(est, probs, step, x)
    elif code == 1:
        _dumiqe_add_update(est, probs, step, x)
    else:
        _mdumiqe_update(est, probs, step, x, q_min, gap_min, h)


# --- H functions -------------------------------------------------------------

def _check_ordered(est: np.ndarray) -> None:
    if np.any(est <= 0.0):
        raise ValueError("estimates must be positive")
    if np.any(np.diff(est) < 0.0):
        raise ValueError("estimates must be non-decreasing")


def h_interior(estimates: Sequence[float], targets: QuantileTargets, k: int) -> float:
    """Gap ratio for the interior estimate ``k`` (0-based, ``1 <= k <= K-2``).

    The smaller of the lower-pair and upper-pair ratios. Multiply by ``beta``
    to get the admissible step.
    """
    est = np.asarray(estimates, dtype=float)
    K = len(targets)
    if est.shape != (K,):
        raise ValueError(f"expected {K} estimates, got shape {est.shape}")
    if not 1 <= k <= K - 2:
        raise IndexError(f"interior index must satisfy 1 <= k <= {K - 2}, got {k}")
    _check_ordered(est)
    q = targets.probs
    lower = _gap_ratio(est[k - 1], est[k], q[k - 1], q[k])
    upper = _gap_ratio(est[k], est[k + 1], q[k], q[k + 1])
    return float(min(lower, upper))


def h_boundary(estimates: Sequence[float], targets: QuantileTargets, k: int) -> float:
    """Gap ratio for the lowest (``k == 0``) or highest (``k == K-1``) estimate."""
    est = np.asarray(estimates, dtype=float)
    K = len(targets)
    if K < 2:
        raise ValueError("the gap ratio needs at least two quantiles")
    if est.shape != (K,):
        raise ValueError(f"expected {K} estimates, got shape {est.shape}")
    if k not in (0, K - 1):
        raise IndexError(f"boundary index must be 0 or {K - 1}, got {k}")
    _check_ordered(est)
    q = targets.probs
    if k == 0:
        return float(_gap_ratio(est[0], est[1], q[0], q[1]))
    return float(_gap_ratio(est[K - 2], est[K - 1], q[K - 2], q[K - 1]))


# --- initialization ----------------------------------------------------------

def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    m = len(sorted_values)
    rank = max(1, math.ceil(q * m))
    return float(sorted_values[rank - 1])


def warmup_estimates(samples: Iterable[float], targets: QuantileTargets) -> np.ndarray:
    """Nearest-rank quantiles of a sample buffer, forced strictly increasing.

    Ties are broken by adding ``k * TIE_EPS * scale`` to the k-th value, where
    ``scale`` is the largest magnitude in the result.
    """
    data = np.sort(np.asarray(list(samples), dtype=float))
    if data.size == 0:
        raise ValueError("warm-up buffer is empty")
    est = np.array([nearest_rank(data, q) for q in targets.probs])
    if np.any(np.diff(est) <= 0.0):
        scale = float(np.max(np.abs(est))) or 1.0
        est = est + np.arange(len(est)) * TIE_EPS * scale
    return est


# --- the bank ----------------------------------------------------------------

class QuantileBank:
    """Current estimates for a set of target probabilities.

    ``estimates`` are in transformed space. Use :meth:`observe` to feed raw
    samples (the configured transform is applied) or :meth:`update` to feed
    samples that are already transformed.
    """

    def __init__(self, targets: QuantileTargets, estimates: Sequence[float], config: EstimatorConfig):
        est = np.array(estimates, dtype=float)
        if est.shape != (len(targets),):
            raise ValueError(f"expected {len(targets)} initial estimates, got shape {est.shape}")
        if not np.all(np.isfinite(est)):
            raise ValueError("initial estimates must be finite")
        if config.variant.multiplicative and np.any(est <= 0.0):
            raise ValueError("multiplicative estimators need positive initial estimates")
        if config.variant is Variant.DUMIQE and config.step * (1.0 - targets.probs[0]) >= 1.0:
            raise ValueError(
                f"lambda={config.step} makes the decrease factor 1 - lambda*(1-q) non-positive "
                f"for q={targets.probs[0]}; need lambda < {1.0 / (1.0 - targets.probs[0]):.6g}"
            )
        if config.variant is Variant.MDUMIQE:
            if len(targets) < 2:
                raise ValueError("mdumiqe needs at least two quantiles; use dumiqe for a single quantile")
            if np.any(np.diff(est) < 0.0):
                raise ValueError("mdumiqe initial estimates must be non-decreasing")
        self.targets = targets
        self.config = config
        self.n = 0
        self._est = est
        self._probs = targets.as_array()
        self._h = np.empty(len(targets))

    @classmethod
    def from_quantiles(cls, targets, values, config) -> "QuantileBank":
        """Build a bank from initial quantile values in original space."""
        ys = [apply_transform(v, config.transform, require_positive=config.variant.multiplicative) for v in values]
        return cls(targets, ys, config)

    @classmethod
    def from_warmup(cls, targets, samples, config) -> "QuantileBank":
        """Initialize from the nearest-rank quantiles of raw warm-up samples."""
        ys = apply_transform_array(
            list(samples), config.transform, require_positive=config.variant.multiplicative
        )
        return cls(targets, warmup_estimates(ys, targets), config)

    @property
    def estimates(self) -> np.ndarray:
        return self._est.copy()

    def quantiles(self) -> np.ndarray:
        """Estimates mapped back to the original sample space."""
        return invert_transform_array(self._est, self.config.transform)

    def update(self, y: float) -> "QuantileBank":
        """Apply one update with a sample already in transformed space."""
        y = float(y)
        if not math.isfinite(y):
            raise ValueError(f"sample must be finite, got {y!r}")
        cfg = self.config
        if cfg.variant is Variant.DUMIQE and np.any(self._est <= 0.0):
            raise ValueError("estimates must stay positive for multiplicative updates")
        _update(cfg.variant.code, self._est, self._probs, cfg.step, y, cfg.q_min, cfg.gap_min, self._h)
        self.n += 1
        return self

    def observe(self, x: float) -> "QuantileBank":
        """Transform a raw sample and update."""
        cfg = self.config
        return self.update(apply_transform(x, cfg.transform, require_positive=cfg.variant.multiplicative))

    def update_many(self, ys: Iterable[float]) -> np.ndarray:
        """Update with each transformed sample in turn; returns the trajectory (one row per step)."""
        rows = []
        for y in ys:
            self.update(y)
            rows.append(self._est.copy())
        return np.array(rows).reshape(-1, len(self.targets))

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self._est) >= 0.0))

    def copy(self) -> "QuantileBank":
        other = QuantileBank(self.targets, self._est, self.config)
        other.n = self.n
        return other

    def __repr__(self) -> str:
        return (
            f"QuantileBank(variant={self.config.variant.value}, step={self.config.step}, "
            f"n={self.n}, estimates={self._est.tolist()})"
        )


def _require(bank: QuantileBank, variant: Variant) -> None:
    if bank.config.variant is not variant:
        raise ValueError(f"expected a {variant.value} bank, got {bank.config.variant.value}")


def dumiqe_step(bank: QuantileBank, x: float) -> QuantileBank:
    _require(bank, Variant.DUMIQE)
    return bank.update(x)


def dumiqe_additive_step(bank: QuantileBank, x: float) -> QuantileBank:
    _require(bank, Variant.DUMIQE_ADD)
    return bank.update(x)


def mdumiqe_step(bank: QuantileBank, x: float) -> QuantileBank:
    _require(bank, Variant.MDUMIQE)
    return bank.update(x)
