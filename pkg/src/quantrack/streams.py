"""Synthetic drifting streams with analytic ground truth, plus file replay.

``sin-normal``: Normal(mu_n, sd) with mu_n = a*sin(2*pi*n/T).
``sin-chi2``:   chi-squared with nu_n = a*sin(2*pi*n/T) + b degrees of freedom.

The phase is taken as ``n mod T`` before evaluating the sine, so the
parameters (and the true quantiles) are exactly periodic in ``n``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .estimators import QuantileTargets
from .numerics import (
    chi2_cdf,
    chi2_inv_cdf_table,
    normal_cdf,
    normal_inv_cdf,
    sample_chi2,
    sample_normal,
)

SIN_NORMAL = "sin-normal"
SIN_CHI2 = "sin-chi2"
STATIC_NORMAL = "static-normal"
STATIC_CHI2 = "static-chi2"
STREAM_KINDS = (SIN_NORMAL, SIN_CHI2, STATIC_NORMAL, STATIC_CHI2)


@dataclass(frozen=True)
class OutlierConfig:
    """Synthetic stress: with probability ``rate`` a sample is corrupted.

    sin-chi2 samples are multiplied by ``scale``; normal samples are shifted
    up by ``scale * sd``. Ground truth is never affected.
    """

    rate: float = 0.0
    scale: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"outlier rate must lie in [0, 1), got {self.rate!r}")
        if not self.scale > 0.0:
            raise ValueError(f"outlier scale must be positive, got {self.scale!r}")


@dataclass(frozen=True)
class StreamConfig:
    """Parameters of a synthetic stream.

    For the static kinds ``a`` is ignored: ``static-normal`` is Normal(b, sd)
    and ``static-chi2`` is chi-squared with ``b`` degrees of freedom.
    """

    kind: str = SIN_NORMAL
    a: float = 2.0
    b: float = 6.0
    T: int = 800
    sd: float = 1.0
    seed: int = 0
    outlier: OutlierConfig = field(default_factory=OutlierConfig)

    def __post_init__(self):
        if self.kind not in STREAM_KINDS:
            raise ValueError(f"unknown stream kind {self.kind!r}; expected one of {STREAM_KINDS}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"period T must be a positive integer, got {self.T!r}")
        object.__setattr__(self, "T", int(self.T))
        if not self.sd > 0.0:
            raise ValueError(f"sd must be positive, got {self.sd!r}")
        if self.kind == SIN_CHI2 and not self.b > abs(self.a):
            raise ValueError(f"sin-chi2 needs b > |a| so the degrees of freedom stay positive, got a={self.a}, b={self.b}")
        if self.kind == STATIC_CHI2 and not self.b > 0:
            raise ValueError(f"static-chi2 needs b > 0 degrees of freedom, got {self.b}")

    @property
    def family(self) -> str:
        return "chi2" if self.kind in (SIN_CHI2, STATIC_CHI2) else "normal"

    @property
    def period(self) -> int:
        return self.T if self.kind in (SIN_NORMAL, SIN_CHI2) else 1

    def with_seed(self, seed: int) -> "StreamConfig":
        return StreamConfig(self.kind, self.a, self.b, self.T, self.sd, seed, self.outlier)


class StreamStep(NamedTuple):
    n: int
    x: float
    truth: tuple[float, ...] | None


def sine_phase(n, T: int):
    return np.sin(2.0 * np.pi * (np.asarray(n) % T) / T)


def location(config: StreamConfig, n):
    """mu_n (normal kinds) or nu_n (chi-squared kinds)."""
    if config.kind in (STATIC_NORMAL, STATIC_CHI2):
        return np.full(np.shape(n), float(config.b)) if np.ndim(n) else float(config.b)
    shift = config.b if config.kind == SIN_CHI2 else 0.0
    value = config.a * sine_phase(n, config.T) + shift
    return value if np.ndim(n) else float(value)


@lru_cache(maxsize=64)
def _truth_table(kind: str, a: float, b: float, T: int, sd: float, probs: tuple[float, ...]) -> np.ndarray:
    cfg = StreamConfig(kind, a, b, T, sd)
    phases = np.arange(cfg.period)
    loc = np.atleast_1d(location(cfg, phases)).astype(float)
    if cfg.family == "normal":
        z = np.array([normal_inv_cdf(q) for q in probs])
        table = loc[:, None] + sd * z[None, :]
    else:
        table = chi2_inv_cdf_table(probs, loc)
    table.setflags(write=False)
    return table


def truth_table(config: StreamConfig, targets: QuantileTargets) -> np.ndarray:
    """True quantiles for each phase ``n mod period``; shape (period, K)."""
    return _truth_table(config.kind, float(config.a), float(config.b), config.period, float(config.sd), targets.probs)


def true_quantiles(config: StreamConfig, n: int, targets: QuantileTargets) -> np.ndarray:
    table = truth_table(config, targets)
    return table[n % table.shape[0]].copy()


class SyntheticStream:
    """Sequential sample source for a :class:`StreamConfig`.

    Samples are produced in order starting at ``n = 1``. :meth:`draw` and
    :meth:`next_sample` can be mixed freely; the sequence depends only on the
    configuration and seed.
    """

    def __init__(self, config: StreamConfig):
        self.config = config
        base, noise = np.random.SeedSequence(config.seed).spawn(2)
        self._rng = np.random.Generator(np.random.PCG64(base))
        self._outlier_rng = np.random.Generator(np.random.PCG64(noise))
        self.n = 0

    def draw(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Next ``count`` samples as ``(n, x)`` arrays."""
        cfg = self.config
        ns = np.arange(self.n + 1, self.n + 1 + count)
        loc = location(cfg, ns)
        if cfg.family == "normal":
            xs = sample_normal(self._rng, loc, cfg.sd)
        else:
            xs = sample_chi2(self._rng, loc)
        if cfg.outlier.rate > 0.0:
            hit = self._outlier_rng.random(count) < cfg.outlier.rate
            if cfg.family == "normal":
                xs = np.where(hit, xs + cfg.outlier.scale * cfg.sd, xs)
            else:
                xs = np.where(hit, xs * cfg.outlier.scale, xs)
        self.n += count
        return ns, np.asarray(xs, dtype=float)

    def next_sample(self, targets: QuantileTargets | None = None) -> StreamStep:
        ns, xs = self.draw(1)
        n = int(ns[0])
        truth = None if targets is None else tuple(true_quantiles(self.config, n, targets).tolist())
        return StreamStep(n, float(xs[0]), truth)

    def __iter__(self) -> Iterator[StreamStep]:
        while True:
            yield self.next_sample()


# --- quantile target sets ----------------------------------------------------

_TARGET_GRIDS = {
    ("normal", "median"): (-0.8, 0.2),
    ("normal", "tail"): (0.8, 0.2),
    ("chi2", "median"): (4.2, 0.3),
    ("chi2", "tail"): (12.0, 0.4),
}
TARGET_DOF = 6.0


def build_targets(family: str, placement: str, count: int) -> QuantileTargets:
    """The nine-point target grids (or their 1st, 5th and 9th points when count == 3).

    Normal grids are Phi(start + step*(k-1)); chi-squared grids are the
    chi-squared(6) CDF at start + step*(k-1).
    """
    if (family, placement) not in _TARGET_GRIDS:
        raise ValueError(f"unknown target set ({family!r}, {placement!r})")
    if count not in (3, 9):
        raise ValueError(f"count must be 3 or 9, got {count!r}")
    start, step = _TARGET_GRIDS[family, placement]
    points = [start + step * k for k in range(9)]
    if family == "normal":
        probs = [normal_cdf(z) for z in points]
    else:
        probs = [chi2_cdf(x, TARGET_DOF) for x in points]
    if count == 3:
        probs = [probs[0], probs[4], probs[8]]
    return QuantileTargets(tuple(probs), placement=placement)


# --- replay ------------------------------------------------------------------

class ReplayError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


_SPLIT = re.compile(r"[,\s]+")


def _fields(line: str) -> list[str]:
    return [f for f in _SPLIT.split(line.strip()) if f]


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


class ReplayStream:
    """One pass over a numeric column of a text file.

    Fields are separated by commas and/or whitespace. A first row whose
    selected field is not numeric is treated as a header, which also lets
    ``column`` be given by name. Blank lines are skipped.
    """

    def __init__(self, path: str | Path, column: int | str = 0):
        self.path = Path(path)
        self.column = column
        try:
            self._fh = self.path.open("r", encoding="utf-8")
        except OSError as exc:
            raise ReplayError(f"cannot open {self.path}: {exc.strerror or exc}") from exc
        self._line = 0
        self._index: int | None = column if isinstance(column, int) else None
        self._first = True
        self.n = 0

    def _resolve(self, fields: list[str]) -> bool:
        """Handle the first non-blank row; returns True when it was a header."""
        self._first = False
        if self._index is None:
            if str(self.column).lstrip("-").isdigit():
                self._index = int(self.column)
            elif self.column in fields:
                self._index = fields.index(self.column)
                return True
            else:
                raise ReplayError(f"column {self.column!r} not found in header", self._line)
        if self._index >= len(fields):
            raise ReplayError(f"column {self._index} out of range ({len(fields)} fields)", self._line)
        return not _is_number(fields[self._index])

    def __iter__(self) -> Iterator[float]:
        return self

    def __next__(self) -> float:
        for raw in self._fh:
            self._line += 1
            fields = _fields(raw)
            if not fields:
                continue
            if self._first and self._resolve(fields):
                continue
            if self._index >= len(fields):
                raise ReplayError(f"column {self._index} missing ({len(fields)} fields)", self._line)
            text = fields[self._index]
            try:
                value = float(text)
            except ValueError:
                raise ReplayError(f"cannot parse {text!r} as a number", self._line) from None
            if not math.isfinite(value):
                raise ReplayError(f"non-finite value {text!r}", self._line)
            self.n += 1
            return value
        self._fh.close()
        raise StopIteration

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def replay_open(path: str | Path, column: int | str = 0) -> ReplayStream:
    return ReplayStream(path, column)
