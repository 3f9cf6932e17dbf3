"""Command-line entry point: ``quantrack {simulate,sweep,replay,converge}``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on invalid flags. All
flags are validated before any output file is created.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, Iterable, Sequence

import yaml

from .estimators import DEFAULT_WARMUP_WINDOW, EstimatorConfig, QuantileBank, QuantileTargets, Transform, Variant
from .evaluation import (
    CSV_FIELDS,
    SWEEP_FIELDS,
    SweepGrid,
    available_jobs,
    default_transform,
    run_experiment,
    static_convergence,
    sweep,
)
from .numerics import ChiSquaredSpec
from .oracle import WindowOracle
from .streams import SIN_CHI2, SIN_NORMAL, OutlierConfig, StreamConfig, build_targets, replay_open

DEFAULT_STEP = {Variant.DUMIQE: 0.05, Variant.DUMIQE_ADD: 0.05, Variant.MDUMIQE: 0.5}
CONFIG_ALIASES = {"lambda": "lam", "config": None}


class UsageError(Exception):
    """Raised for invalid flag combinations; mapped to exit code 2."""


# --- output ------------------------------------------------------------------

def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    return value


def render(rows: Sequence[dict[str, Any]], fields: Sequence[str], fmt: str) -> str:
    if fmt == "json":
        return json.dumps([_json_safe(r) for r in rows], indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_cell(row.get(f)) for f in fields])
    return buf.getvalue()


def emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _floats(text: str, name: str) -> list[float]:
    items = [t for t in str(text).replace(" ", "").split(",") if t]
    try:
        return [float(t) for t in items]
    except ValueError:
        raise UsageError(f"--{name} must be a comma-separated list of numbers, got {text!r}") from None


# --- parser ------------------------------------------------------------------

def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML/JSON file whose keys mirror the flags; flags win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: available CPUs)")


def _estimator_flags(p: argparse.ArgumentParser, variant_default: str) -> None:
    p.add_argument("--variant", choices=("dumiqe", "dumiqe-mult", "dumiqe-add", "mdumiqe"), default=variant_default)
    p.add_argument("--lambda", dest="lam", type=float, help="step size for dumiqe / dumiqe-add")
    p.add_argument("--beta", type=float, help="step fraction for mdumiqe, in [0, 1)")
    p.add_argument("--transform", choices=("identity", "exp"))
    p.add_argument("--qmin", type=float, default=1e-12)
    p.add_argument("--gap-min", type=float, default=0.0)
    p.add_argument("--init-window", type=int, default=DEFAULT_WARMUP_WINDOW)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one estimator on one synthetic stream")
    _shared(sim)
    _estimator_flags(sim, "mdumiqe")
    sim.add_argument("--stream", choices=(SIN_NORMAL, SIN_CHI2), default=SIN_NORMAL)
    sim.add_argument("--a", type=float, default=2.0)
    sim.add_argument("--b", type=float, default=6.0)
    sim.add_argument("--T", type=int, default=800)
    sim.add_argument("--sd", type=float, default=1.0)
    sim.add_argument("--placement", choices=("median", "tail"), default="median")
    sim.add_argument("--k", type=int, choices=(3, 9), default=9)
    sim.add_argument("--n", type=int, default=100_000)
    sim.add_argument("--warmup", type=int, default=None)
    sim.add_argument("--outlier-rate", type=float, default=0.0)
    sim.add_argument("--outlier-scale", type=float, default=10.0)
    sim.add_argument("--trace", metavar="PATH", help="write per-step n, x, truth and estimates")

    sw = sub.add_parser("sweep", help="run a grid of experiments")
    _shared(sw)
    sw.add_argument("--grid", metavar="PATH", required=True, help="YAML/JSON grid description")
    sw.add_argument("--n", type=int, default=None, help="override the grid's samples per cell")
    sw.set_defaults(seed=None)

    rp = sub.add_parser("replay", help="track quantiles of a numeric column in a file")
    _shared(rp)
    _estimator_flags(rp, "mdumiqe")
    rp.add_argument("--input", metavar="PATH", required=True)
    rp.add_argument("--column", default="0", help="0-based index or header name")
    rp.add_argument("--quantiles", default="0.2,0.5,0.8")
    rp.add_argument("--oracle-window", type=int, default=None)

    cv = sub.add_parser("converge", help="static chi-squared convergence diagnostics")
    _shared(cv)
    cv.add_argument("--betas", required=True, help="comma-separated beta values")
    cv.add_argument("--dof", type=float, default=6.0)
    cv.add_argument("--n", type=int, default=200_000)
    cv.add_argument("--quantiles", default="0.25,0.5,0.75")
    cv.add_argument("--replicates", type=int, default=1, help="seeds seed, seed+1, ...")
    cv.add_argument("--init-window", type=int, default=DEFAULT_WARMUP_WINDOW)
    parser.subcommands = {"simulate": sim, "sweep": sw, "replay": rp, "converge": cv}
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        data = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config file {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must contain a mapping of flag names to values")
    subparser = parser.subcommands[args.command]
    known = {a.dest for a in subparser._actions}
    defaults = {}
    for key, value in data.items():
        dest = CONFIG_ALIASES.get(key, key.replace("-", "_"))
        if dest is None:
            continue
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _estimator(args) -> EstimatorConfig:
    variant = Variant.parse(args.variant)
    if variant is Variant.MDUMIQE and args.lam is not None:
        raise UsageError("mdumiqe is tuned with --beta, not --lambda")
    if variant is not Variant.MDUMIQE and args.beta is not None:
        raise UsageError(f"{variant.value} is tuned with --lambda, not --beta")
    step = args.beta if variant is Variant.MDUMIQE else args.lam
    if step is None:
        step = DEFAULT_STEP[variant]
    transform = args.transform or default_transform(variant, getattr(args, "stream", "replay"))
    return EstimatorConfig(variant, step, transform, args.qmin, args.gap_min)


# --- subcommands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        cfg = _estimator(args)
        stream = StreamConfig(args.stream, args.a, args.b, args.T, args.sd, args.seed,
                              OutlierConfig(args.outlier_rate, args.outlier_scale))
        family = "normal" if args.stream == SIN_NORMAL else "chi2"
        targets = build_targets(family, args.placement, args.k)
        if args.n < 1:
            raise ValueError("--n must be positive")
        if args.warmup is not None and args.warmup < 0:
            raise ValueError("--warmup must be non-negative")
        if args.init_window < 1:
            raise ValueError("--init-window must be positive")
        if cfg.variant.multiplicative and cfg.transform is Transform.IDENTITY and family == "normal":
            raise ValueError("multiplicative estimators on sin-normal need --transform exp")
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    report = run_experiment(cfg, stream, targets, args.n, args.warmup,
                            init_window=args.init_window, trace=bool(args.trace))
    if args.format == "json":
        emit(render([report.to_json()], CSV_FIELDS, "json"), args.out)
    else:
        emit(render([report.record()], CSV_FIELDS, "csv"), args.out)
    if args.trace:
        tr = report.trace
        K = len(targets)
        fields = ["n", "x"] + [f"truth_q{k}" for k in range(1, K + 1)] + [f"est_q{k}" for k in range(1, K + 1)]
        with open(args.trace, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(fields)
            for n, x, truth, est in zip(tr["n"].tolist(), tr["x"].tolist(), tr["truth"].tolist(),
                                        tr["estimates"].tolist()):
                writer.writerow([n, repr(x)] + [repr(v) for v in truth] + [repr(v) for v in est])
    return 0


def load_grid(path: str) -> SweepGrid:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read grid file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("grid file must contain a mapping")
    try:
        return SweepGrid.from_mapping(data)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid grid: {exc}") from None


def cmd_sweep(args) -> int:
    grid = load_grid(args.grid)
    overrides = {}
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.n is not None:
        if args.n < 1:
            raise UsageError("--n must be positive")
        overrides["n"] = args.n
    if overrides:
        grid = SweepGrid(**{**grid.__dict__, **overrides})
    jobs = args.jobs or available_jobs()
    if jobs < 1:
        raise UsageError("--jobs must be positive")

    def progress(i, total, row):
        status = "ok" if not row.get("error") else f"error ({row['error']})"
        print(f"[{i}/{total}] {row['variant']} step={row['step']} {row['stream_kind']} T={row['T']} "
              f"{row['placement']} K={row['K']}: {status}", file=sys.stderr)

    rows = sweep(grid, jobs=jobs, progress=progress)
    emit(render(rows, SWEEP_FIELDS, args.format), args.out)
    return 1 if all(r.get("error") for r in rows) else 0


def cmd_replay(args) -> int:
    try:
        probs = _floats(args.quantiles, "quantiles")
        targets = QuantileTargets(tuple(probs))
        cfg = _estimator(args)
        if cfg.variant is Variant.MDUMIQE and len(targets) < 2:
            raise ValueError("mdumiqe needs at least two --quantiles")
        if args.oracle_window is not None and args.oracle_window < 1:
            raise ValueError("--oracle-window must be positive")
        if args.init_window < 1:
            raise ValueError("--init-window must be positive")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    column: int | str = int(args.column) if str(args.column).isdigit() else args.column

    K = len(targets)
    oracle = WindowOracle(args.oracle_window) if args.oracle_window is not None else None
    fields = ["n", "x"] + [f"est_q{k}" for k in range(1, K + 1)]
    if oracle is not None:
        fields += [f"oracle_q{k}" for k in range(1, K + 1)]
    rows = []
    with replay_open(args.input, column) as stream:
        buffer: list[float] = []
        bank = None
        samples: Iterable[float] = stream
        for x in samples:
            if bank is None:
                buffer.append(x)
                if len(buffer) < args.init_window:
                    continue
                bank = QuantileBank.from_warmup(targets, buffer, cfg)
                pending, buffer = buffer, []
            else:
                pending = [x]
            for value in pending:
                rows.append(_replay_row(bank, oracle, value, targets))
        if bank is None and buffer:
            bank = QuantileBank.from_warmup(targets, buffer, cfg)
            for value in buffer:
                rows.append(_replay_row(bank, oracle, value, targets))
    emit(render(rows, fields, args.format), args.out)
    return 0


def _replay_row(bank: QuantileBank, oracle: WindowOracle | None, x: float, targets: QuantileTargets) -> dict:
    bank.observe(x)
    row: dict[str, Any] = {"n": bank.n, "x": x}
    for k, v in enumerate(bank.quantiles().tolist(), start=1):
        row[f"est_q{k}"] = v
    if oracle is not None:
        oracle.update(x)
        for k, v in enumerate(oracle.quantiles(targets.probs), start=1):
            row[f"oracle_q{k}"] = v
    return row


def cmd_converge(args) -> int:
    try:
        betas = _floats(args.betas, "betas")
        if not betas:
            raise ValueError("--betas needs at least one value")
        for b in betas:
            EstimatorConfig(Variant.MDUMIQE, b)
        targets = QuantileTargets(tuple(_floats(args.quantiles, "quantiles")))
        if len(targets) < 2:
            raise ValueError("mdumiqe needs at least two --quantiles")
        dist = ChiSquaredSpec(args.dof)
        if args.n < 2:
            raise ValueError("--n must be at least 2")
        if args.replicates < 1:
            raise ValueError("--replicates must be positive")
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    seeds = [args.seed + r for r in range(args.replicates)]
    results = static_convergence(targets, dist, betas, args.n, seeds, init_window=args.init_window)
    K = len(targets)
    fields = ["beta", "n"] + [f"bias_q{k}" for k in range(1, K + 1)] + [f"stderr_q{k}" for k in range(1, K + 1)]
    rows = []
    for r in results:
        row: dict[str, Any] = {"beta": r.beta, "n": r.n}
        row.update({f"bias_q{k}": v for k, v in enumerate(r.bias, start=1)})
        row.update({f"stderr_q{k}": v for k, v in enumerate(r.stderr, start=1)})
        if args.format == "json":
            row.update(probs=list(targets.probs), truth=list(r.truth), mean_estimate=list(r.mean_estimate),
                       seeds=seeds)
        rows.append(row)
    emit(render(rows, fields, args.format), args.out)
    return 0


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "replay": cmd_replay, "converge": cmd_converge}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = _apply_config(parser, argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"quantrack {argv[0] if argv else ''}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:  # pragma: no cover
        return 130
    except Exception as exc:
        print(f"quantrack: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
