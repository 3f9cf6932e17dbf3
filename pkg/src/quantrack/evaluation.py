"""Experiment harness: tracking error, ordering violations, sweeps, static convergence.

The tracking error of a run is the per-quantile root mean squared difference
between the analytic quantile and the estimate (in original space), averaged
over the K quantiles. A step counts as a violation when, right after the
update, some adjacent pair of estimates is strictly decreasing.
"""

from __future__ import annotations

import bisect
import hashlib
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from numba import njit

from .estimators import (
    DEFAULT_WARMUP_WINDOW,
    EstimatorConfig,
    QuantileBank,
    QuantileTargets,
    Transform,
    Variant,
    _update,
    apply_transform_array,
    invert_transform_array,
)
from .numerics import ChiSquaredSpec, DistributionSpec, NormalSpec
from .streams import (
    SIN_CHI2,
    SIN_NORMAL,
    STATIC_CHI2,
    STATIC_NORMAL,
    OutlierConfig,
    StreamConfig,
    SyntheticStream,
    build_targets,
    truth_table,
)

CHUNK = 1 << 16
MAX_K = 9

CSV_FIELDS = (
    ["variant", "step", "transform", "stream_kind", "T", "placement", "K", "N", "seed", "avg_rmse"]
    + [f"rmse_q{k}" for k in range(1, MAX_K + 1)]
    + ["violation_count", "violation_rate", "warmup"]
)
SWEEP_FIELDS = CSV_FIELDS + ["error"]


@njit(cache=True)
def _drive(code, est, probs, step, q_min, gap_min, ys, ns, truth, score_from, log_space, sq_sum, est_sum, trace):
    K = est.shape[0]
    h = np.empty(K)
    period = truth.shape[0]
    violations = 0
    scored = 0
    for i in range(ys.shape[0]):
        _update(code, est, probs, step, ys[i], q_min, gap_min, h)
        if trace.shape[0] > 0:
            for k in range(K):
                trace[i, k] = est[k]
        if ns[i] <= score_from:
            continue
        scored += 1
        for k in range(K - 1):
            if est[k + 1] < est[k]:
                violations += 1
                break
        for k in range(K):
            if log_space:
                v = math.log(est[k]) if est[k] > 0.0 else np.nan
            else:
                v = est[k]
            est_sum[k] += v
            if period > 0:
                d = truth[ns[i] % period, k] - v
                sq_sum[k] += d * d
    return violations, scored


def default_transform(variant: Variant | str, stream_kind: str) -> Transform:
    """exp for multiplicative estimators on normal data, identity otherwise."""
    variant = Variant.parse(variant)
    if variant.multiplicative and stream_kind in (SIN_NORMAL, STATIC_NORMAL):
        return Transform.EXP
    return Transform.IDENTITY


def default_warmup(stream: StreamConfig) -> int:
    if stream.kind in (SIN_NORMAL, SIN_CHI2):
        return max(1000, 2 * stream.T)
    return 1000


@dataclass
class EvalReport:
    variant: str
    step: float
    transform: str
    stream_kind: str
    T: int
    placement: str | None
    probs: tuple[float, ...]
    N: int
    seed: int
    warmup: int
    init_window: int
    per_quantile_rmse: tuple[float, ...] | None
    avg_rmse: float | None
    violation_count: int
    violation_rate: float
    final_estimates: tuple[float, ...]
    trace: dict[str, np.ndarray] | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.probs)

    def record(self) -> dict[str, Any]:
        """Flat row keyed by :data:`CSV_FIELDS`; missing RMSE slots are ``None``."""
        rmse = list(self.per_quantile_rmse or [])
        rmse += [None] * (MAX_K - len(rmse))
        row = {
            "variant": self.variant,
            "step": self.step,
            "transform": self.transform,
            "stream_kind": self.stream_kind,
            "T": self.T,
            "placement": self.placement,
            "K": self.K,
            "N": self.N,
            "seed": self.seed,
            "avg_rmse": self.avg_rmse,
        }
        row.update({f"rmse_q{k + 1}": v for k, v in enumerate(rmse[:MAX_K])})
        row.update(
            violation_count=self.violation_count,
            violation_rate=self.violation_rate,
            warmup=self.warmup,
        )
        return row

    def to_json(self) -> dict[str, Any]:
        out = self.record()
        out.update(
            probs=list(self.probs),
            init_window=self.init_window,
            per_quantile_rmse=None if self.per_quantile_rmse is None else list(self.per_quantile_rmse),
            final_estimates=list(self.final_estimates),
        )
        return out


class _Runner:
    """Feeds a synthetic stream through a bank chunk by chunk via the compiled driver."""

    def __init__(self, estimator: EstimatorConfig, stream: StreamConfig, targets: QuantileTargets,
                 init_window: int, initial: Sequence[float] | None):
        if estimator.variant.multiplicative and estimator.transform is Transform.IDENTITY and stream.family == "normal":
            raise ValueError(
                "multiplicative estimators require positive samples under the identity transform; "
                "normal streams need the exp transform"
            )
        self.cfg = estimator
        self.targets = targets
        self.source = SyntheticStream(stream)
        self.probs = targets.as_array()
        self.init_window = init_window
        self._initial = initial
        self.bank: QuantileBank | None = None
        self.log_space = estimator.transform is Transform.EXP

    def _transform(self, xs):
        return apply_transform_array(xs, self.cfg.transform, require_positive=self.cfg.variant.multiplicative)

    def run(self, total: int, score_from: int, truth: np.ndarray, *, trace: bool = False,
            segments: int = 1):
        K = len(self.targets)
        sq_sum = np.zeros(K)
        est_sums = np.zeros((segments, K))
        violations = scored = 0
        traces = []
        scored_total = total - score_from
        # cuts[i] is the last step of averaging segment i
        cuts = [score_from + ((i + 1) * scored_total + segments - 1) // segments for i in range(segments - 1)]
        done = 0
        while done < total:
            count = min(CHUNK, total - done)
            ns, xs = self.source.draw(count)
            ys = self._transform(xs)
            if self.bank is None:
                if self._initial is not None:
                    self.bank = QuantileBank.from_quantiles(self.targets, self._initial, self.cfg)
                else:
                    self.bank = QuantileBank.from_warmup(self.targets, xs[: self.init_window], self.cfg)
            # pieces never straddle a segment boundary of the scored region
            pieces = [0] + [int(c - ns[0] + 1) for c in cuts if ns[0] <= c < ns[-1]] + [count]
            for start, stop in zip(pieces, pieces[1:]):
                seg = bisect.bisect_left(cuts, ns[start])
                tr = np.empty((stop - start, K)) if trace else np.empty((0, K))
                v, s = _drive(self.cfg.variant.code, self.bank._est, self.probs, self.cfg.step, self.cfg.q_min,
                              self.cfg.gap_min, ys[start:stop], ns[start:stop], truth, score_from,
                              self.log_space, sq_sum, est_sums[seg], tr)
                violations += v
                scored += s
                if trace:
                    traces.append((ns[start:stop], xs[start:stop], tr))
            self.bank.n += count
            done += count
        return violations, scored, sq_sum, est_sums, traces


def run_experiment(
    estimator: EstimatorConfig,
    stream: StreamConfig,
    targets: QuantileTargets,
    n: int,
    warmup: int | None = None,
    *,
    init_window: int = DEFAULT_WARMUP_WINDOW,
    initial: Sequence[float] | None = None,
    trace: bool = False,
) -> EvalReport:
    """Run one estimator over one synthetic stream and score it.

    The stream is consumed for ``warmup + n`` steps. The bank is initialized
    from the first ``init_window`` samples (or from ``initial``, given in
    original space) and updated on every step; only the last ``n`` steps are
    scored.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"N must be a positive integer, got {n!r}")
    warm = default_warmup(stream) if warmup is None else int(warmup)
    if warm < 0:
        raise ValueError(f"warmup must be non-negative, got {warmup!r}")
    if init_window < 1:
        raise ValueError(f"init_window must be positive, got {init_window!r}")
    runner = _Runner(estimator, stream, targets, init_window, initial)
    truth = truth_table(stream, targets)
    violations, scored, sq_sum, _, traces = runner.run(warm + n, warm, truth, trace=trace)
    rmse = np.sqrt(sq_sum / scored)
    report = EvalReport(
        variant=estimator.variant.value,
        step=estimator.step,
        transform=estimator.transform.value,
        stream_kind=stream.kind,
        T=stream.T,
        placement=targets.placement,
        probs=targets.probs,
        N=int(n),
        seed=stream.seed,
        warmup=warm,
        init_window=init_window,
        per_quantile_rmse=tuple(float(r) for r in rmse),
        avg_rmse=float(np.mean(rmse)),
        violation_count=int(violations),
        violation_rate=violations / scored,
        final_estimates=tuple(runner.bank.quantiles().tolist()),
    )
    if trace:
        ns = np.concatenate([t[0] for t in traces])
        est = np.concatenate([t[2] for t in traces])
        report.trace = {
            "n": ns,
            "x": np.concatenate([t[1] for t in traces]),
            "truth": truth[ns % truth.shape[0]],
            "estimates": invert_transform_array(est, estimator.transform),
        }
    return report


def rmse_reference(truth: np.ndarray, estimates: np.ndarray) -> tuple[np.ndarray, float]:
    """Two-pass tracking error from stored (N, K) trajectories."""
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    per_q = np.sqrt(np.mean((truth - estimates) ** 2, axis=0))
    return per_q, float(np.mean(per_q))


def count_violations(trajectory: np.ndarray) -> int:
    """Number of rows with a strictly decreasing adjacent pair."""
    trajectory = np.asarray(trajectory)
    return int(np.count_nonzero(np.any(np.diff(trajectory, axis=1) < 0.0, axis=1)))


def violation_rate_check(
    lam: float,
    targets: QuantileTargets,
    stream: StreamConfig,
    n: int,
    warmup: int | None = None,
) -> float:
    """Fraction of steps on which independent multiplicative updates break the ordering."""
    if len(targets) < 2:
        raise ValueError("violation rates need at least two quantiles")
    cfg = EstimatorConfig(Variant.DUMIQE, lam, default_transform(Variant.DUMIQE, stream.kind))
    return run_experiment(cfg, stream, targets, n, warmup).violation_rate


# --- sweeps ------------------------------------------------------------------

def stable_hash(*parts: Any) -> int:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class SweepCell:
    variant: Variant
    step: float
    stream: StreamConfig
    placement: str
    K: int
    replicate: int

    @property
    def key(self) -> tuple:
        s = self.stream
        return (self.variant.value, self.step, s.kind, s.a, s.b, s.T, s.sd, self.placement, self.K, self.replicate)


@dataclass(frozen=True)
class SweepGrid:
    """Cross product of estimator settings, streams and target sets.

    Cell seeds depend only on the base seed, the stream parameters and the
    replicate index. Every estimator setting within a replicate sees the same
    samples, and adding grid points never changes an existing cell.
    """

    variants: tuple[Variant, ...]
    steps: Mapping[Variant, tuple[float, ...]]
    streams: tuple[StreamConfig, ...]
    placements: tuple[str, ...] = ("median",)
    counts: tuple[int, ...] = (3,)
    n: int = 100_000
    warmup: int | None = None
    base_seed: int = 0
    replicates: int = 1
    transform: Transform | None = None
    q_min: float = 1e-12
    gap_min: float = 0.0

    def __post_init__(self):
        if not self.variants or not self.streams or not self.placements or not self.counts:
            raise ValueError("sweep grid must be non-empty in every dimension")
        for v in self.variants:
            if not self.steps.get(v):
                raise ValueError(f"no step values for variant {v.value}")
        if self.n < 1 or self.replicates < 1:
            raise ValueError("n and replicates must be positive")

    def cells(self) -> list[SweepCell]:
        out = []
        for v in self.variants:
            for step, stream, placement, K, rep in itertools.product(
                self.steps[v], self.streams, self.placements, self.counts, range(self.replicates)
            ):
                out.append(SweepCell(v, float(step), stream, placement, int(K), rep))
        return out

    def cell_seed(self, cell: SweepCell) -> int:
        s = cell.stream
        return self.base_seed ^ stable_hash(s.kind, float(s.a), float(s.b), s.T, float(s.sd), cell.replicate)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SweepGrid":
        """Build a grid from a parsed JSON/YAML document.

        ``steps`` is either a list shared by all variants or a mapping from
        variant name to list. Each stream entry is a mapping with ``kind`` and
        optional ``a``, ``b``, ``T``, ``sd``, ``outlier_rate``, ``outlier_scale``.
        """
        known = {"variants", "steps", "streams", "placements", "counts", "k", "n", "warmup", "seed",
                 "replicates", "transform", "qmin", "gap_min"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        variants = tuple(Variant.parse(v) for v in data.get("variants", []))
        raw_steps = data.get("steps", [])
        if isinstance(raw_steps, Mapping):
            steps = {Variant.parse(k): tuple(float(s) for s in v) for k, v in raw_steps.items()}
        else:
            steps = {v: tuple(float(s) for s in raw_steps) for v in variants}
        streams = []
        for entry in data.get("streams", []):
            entry = dict(entry)
            outlier = OutlierConfig(float(entry.pop("outlier_rate", 0.0)), float(entry.pop("outlier_scale", 10.0)))
            extra = set(entry) - {"kind", "a", "b", "T", "sd"}
            if extra:
                raise ValueError(f"unknown stream keys: {sorted(extra)}")
            streams.append(StreamConfig(outlier=outlier, **entry))
        counts = data.get("counts", data.get("k", [3]))
        counts = tuple(counts) if isinstance(counts, (list, tuple)) else (counts,)
        placements = data.get("placements", ["median"])
        placements = tuple(placements) if isinstance(placements, (list, tuple)) else (placements,)
        transform = data.get("transform")
        return cls(
            variants=variants,
            steps=steps,
            streams=tuple(streams),
            placements=placements,
            counts=tuple(int(c) for c in counts),
            n=int(data.get("n", 100_000)),
            warmup=data.get("warmup"),
            base_seed=int(data.get("seed", 0)),
            replicates=int(data.get("replicates", 1)),
            transform=None if transform is None else Transform(transform),
            q_min=float(data.get("qmin", 1e-12)),
            gap_min=float(data.get("gap_min", 0.0)),
        )


def run_cell(grid: SweepGrid, cell: SweepCell) -> dict[str, Any]:
    """Run one grid cell; failures are reported in the ``error`` field."""
    seed = grid.cell_seed(cell)
    stream = cell.stream.with_seed(seed)
    try:
        targets = build_targets(stream.family, cell.placement, cell.K)
        transform = grid.transform or default_transform(cell.variant, stream.kind)
        cfg = EstimatorConfig(cell.variant, cell.step, transform, grid.q_min, grid.gap_min)
        row = run_experiment(cfg, stream, targets, grid.n, grid.warmup).record()
        row["error"] = None
        return row
    except Exception as exc:  # one bad cell must not sink the sweep
        row = {name: None for name in CSV_FIELDS}
        row.update(
            variant=cell.variant.value, step=cell.step, stream_kind=stream.kind, T=stream.T,
            placement=cell.placement, K=cell.K, N=grid.n, seed=seed,
            error=f"{type(exc).__name__}: {exc}",
        )
        return row


def _run_cell_args(args):
    return run_cell(*args)


def sweep(
    grid: SweepGrid,
    jobs: int = 1,
    progress: Callable[[int, int, dict[str, Any]], None] | None = None,
) -> list[dict[str, Any]]:
    """Run every cell of ``grid``; rows come back in grid order regardless of ``jobs``."""
    cells = grid.cells()
    args = [(grid, c) for c in cells]
    rows: list[dict[str, Any]] = []
    if jobs <= 1 or len(cells) == 1:
        results: Iterable = map(_run_cell_args, args)
        for i, row in enumerate(results):
            rows.append(row)
            if progress:
                progress(i + 1, len(cells), row)
        return rows
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for i, row in enumerate(pool.map(_run_cell_args, args)):
            rows.append(row)
            if progress:
                progress(i + 1, len(cells), row)
    return rows


def available_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


# --- static convergence ------------------------------------------------------

@dataclass
class ConvergenceRow:
    beta: float
    n: int
    truth: tuple[float, ...]
    mean_estimate: tuple[float, ...]
    bias: tuple[float, ...]
    stderr: tuple[float, ...]
    per_seed: tuple[tuple[float, ...], ...]

    def abs_bias(self) -> np.ndarray:
        """Mean absolute error of the per-seed time averages, per quantile."""
        return np.mean(np.abs(np.array(self.per_seed) - np.array(self.truth)), axis=0)


def static_stream(dist: DistributionSpec, seed: int) -> StreamConfig:
    if isinstance(dist, ChiSquaredSpec):
        return StreamConfig(STATIC_CHI2, b=dist.dof, seed=seed)
    if isinstance(dist, NormalSpec):
        return StreamConfig(STATIC_NORMAL, b=dist.mean, sd=dist.sd, seed=seed)
    raise TypeError(f"unsupported distribution {dist!r}")


def static_convergence(
    targets: QuantileTargets,
    dist: DistributionSpec,
    betas: Sequence[float],
    n: int,
    seeds: Sequence[int] = (0,),
    *,
    init_window: int = DEFAULT_WARMUP_WINDOW,
    batches: int = 20,
    min_batch: int = 100,
) -> list[ConvergenceRow]:
    """Time-averaged mdumiqe estimates over the final half of static-stream runs.

    ``bias`` is the seed-averaged time average minus the true quantile. With
    several seeds ``stderr`` is the standard error across seeds; with one seed
    it comes from batch means over the averaged half, using at most
    ``batches`` batches of at least ``min_batch`` steps; a run too short for
    two batches reports an infinite stderr.
    """
    if not betas:
        raise ValueError("at least one beta is required")
    if int(n) != n or n < 2:
        raise ValueError(f"n must be an integer >= 2, got {n!r}")
    if not seeds:
        raise ValueError("at least one seed is required")
    truth = np.array([dist.inv_cdf(q) for q in targets.probs])
    transform = Transform.EXP if isinstance(dist, NormalSpec) else Transform.IDENTITY
    score_from = n // 2
    averaged = n - score_from
    nb = max(1, min(batches, averaged // min_batch))
    rows = []
    for beta in betas:
        cfg = EstimatorConfig(Variant.MDUMIQE, beta, transform)
        per_seed = []
        batch_se = None
        for seed in seeds:
            runner = _Runner(cfg, static_stream(dist, seed), targets, init_window, None)
            _, scored, _, est_sums, _ = runner.run(n, score_from, np.empty((0, len(targets))), segments=nb)
            per_seed.append(est_sums.sum(axis=0) / scored)
            if len(seeds) == 1:
                sizes = np.array([_segment_size(averaged, nb, i) for i in range(nb)], dtype=float)
                means = est_sums / sizes[:, None]
                batch_se = (np.std(means, axis=0, ddof=1) / math.sqrt(nb)) if nb > 1 else np.full(len(targets), np.inf)
        per_seed_arr = np.array(per_seed)
        mean_est = per_seed_arr.mean(axis=0)
        if len(seeds) > 1:
            se = per_seed_arr.std(axis=0, ddof=1) / math.sqrt(len(seeds))
        else:
            se = batch_se
        rows.append(
            ConvergenceRow(
                beta=float(beta),
                n=int(n),
                truth=tuple(truth.tolist()),
                mean_estimate=tuple(mean_est.tolist()),
                bias=tuple((mean_est - truth).tolist()),
                stderr=tuple(float(s) for s in se),
                per_seed=tuple(tuple(r.tolist()) for r in per_seed_arr),
            )
        )
    return rows


def _segment_size(total: int, segments: int, i: int) -> int:
    lo = (i * total + segments - 1) // segments
    hi = ((i + 1) * total + segments - 1) // segments
    return hi - lo
