"""Command-line front end: problem/scheme selection and CSV emission.

All data commands echo their full configuration (including every
defaulted assumption) as '#'-prefixed comment lines above the CSV header.
Non-comment output is byte-identical across reruns with the same flags
and seed, at any worker count; wall-clock measurements therefore live in
comments unless ``--record-runtime`` is given.
"""

from __future__ import annotations

import argparse
import math
import os
import re
import sys
from contextlib import contextmanager
from datetime import datetime, timezone

import numpy as np

from . import experiment, problems, schemes
from .brownian import BrownianPath, derive_key
from .coefficients import AdaptiveConfig, GrowthEnvelope
from .errors import InvalidArgumentError
from .experiment import ReferenceSpec

CSV_HEADER = ("scheme,problem,delta_max,delta_min,gamma,K,paths,horizon,seed,"
              "rmse,rmse_stderr,mean_step,backstop_fraction,diverged_fraction,"
              "runtime_seconds")

_DYADIC = re.compile(r"^2\^(-?\d+)$")


def parse_step(text: str) -> float:
    """A step size: '2^-11' parsed exactly as a power of two, or a decimal."""
    m = _DYADIC.match(text.strip())
    if m:
        return 2.0 ** int(m.group(1))
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse step size {text!r}") from None
    if not (value > 0.0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"step size must be positive, got {text!r}")
    return value


def parse_ladder(text: str) -> list[float]:
    """A step ladder: 'A..B' over dyadic endpoints, a comma list, or one value.

    The result is sorted in decreasing order.
    """
    text = text.strip()
    if ".." in text:
        lo_txt, hi_txt = text.split("..", 1)
        mlo, mhi = _DYADIC.match(lo_txt.strip()), _DYADIC.match(hi_txt.strip())
        if not (mlo and mhi):
            raise argparse.ArgumentTypeError(
                f"ladder ranges need dyadic endpoints like 2^-11..2^-7, got {text!r}"
            )
        a, b = int(mlo.group(1)), int(mhi.group(1))
        exps = range(a, b + 1) if a <= b else range(b, a + 1)
        return [2.0**e for e in sorted(exps, reverse=True)]
    values = [parse_step(part) for part in text.split(",") if part.strip()]
    if not values:
        raise argparse.ArgumentTypeError("empty step ladder")
    ladder = sorted(set(values), reverse=True)
    if len(ladder) != len(values):
        raise argparse.ArgumentTypeError("ladder entries must be distinct")
    return ladder


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return format(value, ".17g")
    return str(value)


def emit_csv(rows, fh, metadata: list[str], fit=None, record_runtime: bool = False):
    """Write RMSE rows with '#' metadata comments and an exact header line.

    Data fields use 17 significant digits so they round-trip losslessly.
    Wall-clock runtimes are always reported in trailing comments; the
    ``runtime_seconds`` column is filled only when ``record_runtime`` is
    set, since measured times would break byte-identical reruns.
    """
    for line in metadata:
        fh.write(f"# {line}\n")
    fh.write(CSV_HEADER + "\n")
    for row in rows:
        fields = [
            row.scheme, row.problem, _fmt(row.delta_max), _fmt(row.delta_min),
            _fmt(row.gamma), _fmt(row.K), str(row.paths), _fmt(row.horizon),
            str(row.seed), _fmt(row.rmse), _fmt(row.rmse_stderr),
            _fmt(row.mean_step), _fmt(row.backstop_fraction),
            _fmt(row.diverged_fraction),
            _fmt(row.runtime_seconds) if record_runtime else "",
        ]
        fh.write(",".join(fields) + "\n")
    for i, row in enumerate(rows):
        fh.write(f"# runtime row={i} scheme_seconds={row.runtime_seconds:.3f} "
                 f"total_seconds={row.runtime_total_seconds:.3f} "
                 f"mean_steps_per_path={_fmt(row.mean_steps_per_path)}\n")
    if fit is not None and fit[0] is not None:
        slope, intercept, r2 = fit
        fh.write(f"# slope = {_fmt(slope)}\n")
        fh.write(f"# intercept = {_fmt(intercept)}\n")
        fh.write(f"# r_squared = {_fmt(r2)}\n")


@contextmanager
def _open_out(path: str | None):
    if path in (None, "-"):
        yield sys.stdout
        return
    try:
        fh = open(path, "w", encoding="utf-8", newline="")
    except OSError as exc:
        raise _IoFailure(str(exc)) from exc
    try:
        yield fh
    finally:
        fh.close()


class _IoFailure(Exception):
    pass


def _resolve_threads(args) -> int:
    env = os.environ.get("SDE_ADAPT_THREADS")
    raw = env if env else getattr(args, "threads", None)
    if raw in (None, "auto"):
        return min(os.cpu_count() or 1, 8)
    try:
        n = int(raw)
    except ValueError:
        raise InvalidArgumentError(f"threads must be an int or 'auto', got {raw!r}") from None
    if n < 1:
        raise InvalidArgumentError("threads must be >= 1")
    return n


def _add_common(p: argparse.ArgumentParser, with_scheme=True):
    p.add_argument("--problem", choices=problems.PROBLEM_NAMES, help="benchmark system")
    if with_scheme:
        p.add_argument("--scheme", choices=schemes.SCHEMES, help="numerical scheme")
    p.add_argument("--delta-min", type=parse_step, default=None,
                   help="minimal adaptive step (dyadic '2^-k' or decimal)")
    p.add_argument("--gamma", type=float, default=None, help="truncation exponent override")
    p.add_argument("--K", type=float, default=None, help="truncation constant override")
    p.add_argument("--x0", type=float, default=None, help="initial state override (scalar problems)")
    p.add_argument("--paths", type=int, default=None, help="number of Monte Carlo paths")
    p.add_argument("--horizon", type=float, default=None, help="time horizon T")
    p.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    p.add_argument("--threads", default=None,
                   help="worker count or 'auto'; SDE_ADAPT_THREADS overrides")
    p.add_argument("--out", default=None, help="output CSV path (default stdout)")
    p.add_argument("--record-runtime", action="store_true",
                   help="fill the runtime_seconds column (breaks byte-identical reruns)")


def _entry_for(args):
    name = args.problem
    if name is None:
        raise InvalidArgumentError("--problem is required")
    kwargs = {}
    if getattr(args, "x0", None) is not None:
        if name == "lorenz":
            raise InvalidArgumentError("--x0 applies to scalar problems only")
        kwargs["initial_state"] = args.x0
    return problems.get(name, **kwargs)


def _env_for(entry, args) -> GrowthEnvelope:
    env = entry.default_env
    changes = {}
    if getattr(args, "K", None) is not None:
        changes["K"] = args.K
    if getattr(args, "gamma", None) is not None:
        changes["gamma"] = args.gamma
    if changes:
        from dataclasses import replace
        env = replace(env, **changes)
    return env


def _metadata(args, entry, assumed: dict, extra: dict | None = None) -> list[str]:
    lines = [
        "sde-adapt v0.1.0",
        f"generated = {datetime.now(timezone.utc).isoformat()}",
        f"command = {args.command}",
    ]
    echo = dict(extra or {})
    for key, value in sorted(echo.items()):
        tag = " (assumed)" if key in assumed else ""
        lines.append(f"{key} = {value}{tag}")
    return lines


def _reference_for(args, entry) -> ReferenceSpec:
    kind = getattr(args, "reference", None) or (
        "closed-form" if entry.system.exact_solution is not None else "as-bem"
    )
    return ReferenceSpec(
        kind=kind,
        ref_delta_max=getattr(args, "ref_delta_max", None) or 2.0**-12,
        quad_step=getattr(args, "quad_step", None) or 2.0**-14,
    )


def _cmd_simulate(args) -> int:
    entry = _entry_for(args)
    env = _env_for(entry, args)
    assumed = {}
    horizon = args.horizon
    if horizon is None:
        horizon = entry.default_horizon
        assumed["horizon"] = True
    scheme = args.scheme or "ats-tem"
    dmin = args.delta_min if args.delta_min is not None else entry.default_cfg.delta_min
    dmax = args.delta_max if args.delta_max is not None else entry.default_cfg.delta_max
    if scheme in schemes.ADAPTIVE_SCHEMES:
        cfg_or_h = AdaptiveConfig(delta_min=dmin, delta_max=dmax)
    else:
        cfg_or_h = dmax
    path = BrownianPath(derive_key(args.seed, 0), entry.system.dimension_noise)
    traj = schemes.simulate(scheme, entry.system, env, cfg_or_h, path, horizon)
    meta = _metadata(args, entry, assumed, {
        "problem": entry.name, "scheme": scheme, "delta_min": _fmt(dmin),
        "delta_max": _fmt(dmax), "horizon": _fmt(float(horizon)),
        "seed": args.seed, "diverged": traj.diverged,
        "mean_step": _fmt(experiment.mean_step(traj)),
        "backstop_fraction": _fmt(experiment.backstop_fraction(traj)),
    })
    d = entry.system.dimension_state
    with _open_out(args.out) as fh:
        for line in meta:
            fh.write(f"# {line}\n")
        cols = ",".join(f"x{i+1}" for i in range(d))
        fh.write(f"t,{cols},step,backstop\n")
        for n in range(len(traj.times)):
            state = ",".join(_fmt(float(v)) for v in traj.states[n])
            if n == 0:
                fh.write(f"{_fmt(float(traj.times[0]))},{state},,\n")
            else:
                fh.write(f"{_fmt(float(traj.times[n]))},{state},"
                         f"{_fmt(float(traj.steps[n-1]))},{int(traj.backstop_flags[n-1])}\n")
    return 0


def _study_flags(args, entry):
    assumed = {}
    horizon = args.horizon
    if horizon is None:
        horizon = entry.default_horizon
        assumed["horizon"] = True
    paths = args.paths
    if paths is None:
        paths = 1000
        assumed["paths"] = True
    dmin = args.delta_min
    if dmin is None:
        dmin = entry.default_cfg.delta_min
        assumed["delta_min"] = True
    return float(horizon), int(paths), float(dmin), assumed


def _cmd_rmse(args) -> int:
    entry = _entry_for(args)
    env = _env_for(entry, args)
    scheme = args.scheme or "ats-tem"
    horizon, paths, dmin, assumed = _study_flags(args, entry)
    ladder = args.delta_max or [entry.default_cfg.delta_max]
    if len(ladder) != 1:
        raise InvalidArgumentError("rmse takes a single --delta-max; use convergence for ladders")
    dmax = ladder[0]
    ref = _reference_for(args, entry)
    workers = _resolve_threads(args)
    if scheme in schemes.ADAPTIVE_SCHEMES:
        cfg_or_h = AdaptiveConfig(delta_min=dmin, delta_max=dmax)
    else:
        cfg_or_h = dmax
    if args.comparability:
        if scheme in schemes.ADAPTIVE_SCHEMES:
            raise InvalidArgumentError("--comparability applies to fixed-step schemes")
        paired = AdaptiveConfig(delta_min=dmin, delta_max=dmax)
        rows = list(experiment.comparability_study(
            scheme, entry, env, paired, paths, horizon, args.seed, ref,
            workers=workers, fs_gamma=args.gamma))
    else:
        rows = [experiment.rmse_study(scheme, entry, env, cfg_or_h, paths, horizon,
                                      args.seed, ref, workers=workers,
                                      fs_gamma=args.gamma)]
    meta = _metadata(args, entry, assumed, {
        "problem": entry.name, "scheme": scheme, "delta_min": _fmt(dmin),
        "delta_max": _fmt(dmax), "horizon": _fmt(horizon), "paths": paths,
        "seed": args.seed, "reference": ref.kind,
        "ref_delta_max": _fmt(ref.ref_delta_max), "quad_step": _fmt(ref.quad_step),
        "threads": workers, "comparability": bool(args.comparability),
    })
    with _open_out(args.out) as fh:
        emit_csv(rows, fh, meta, record_runtime=args.record_runtime)
    return 0


def _cmd_convergence(args) -> int:
    entry = _entry_for(args)
    env = _env_for(entry, args)
    scheme = args.scheme or "ats-tem"
    horizon, paths, dmin, assumed = _study_flags(args, entry)
    if not args.delta_max:
        raise InvalidArgumentError("convergence requires --delta-max ladder")
    ref = _reference_for(args, entry)
    workers = _resolve_threads(args)
    report = experiment.convergence_study(
        scheme, entry, env, args.delta_max, dmin, paths, horizon, args.seed, ref,
        workers=workers, fs_gamma=args.gamma)
    meta = _metadata(args, entry, assumed, {
        "problem": entry.name, "scheme": scheme, "delta_min": _fmt(dmin),
        "delta_max_ladder": ",".join(_fmt(v) for v in args.delta_max),
        "horizon": _fmt(horizon), "paths": paths, "seed": args.seed,
        "reference": ref.kind, "ref_delta_max": _fmt(ref.ref_delta_max),
        "quad_step": _fmt(ref.quad_step), "threads": workers,
    })
    with _open_out(args.out) as fh:
        emit_csv(report.rows, fh, meta,
                 fit=(report.slope, report.intercept, report.r_squared),
                 record_runtime=args.record_runtime)
    return 0


def _cmd_table1(args) -> int:
    # volatility-model strong-error ladder with its benchmark defaults
    args.problem = "heston-3-2"
    args.scheme = "ats-tem"
    if args.delta_max is None:
        args.delta_max = [2.0**-k for k in range(2, 12)]
        args.delta_max.sort(reverse=True)
    if args.delta_min is None:
        args.delta_min = 2.0**-18
    if args.reference is None:
        args.reference = "as-bem"
    return _cmd_convergence(args)


def _cmd_probe_divergence(args) -> int:
    entry = _entry_for(args) if args.problem else problems.get(
        "ginzburg-landau", initial_state=(args.x0 if args.x0 is not None else 2.0))
    assumed = {}
    horizon = args.horizon
    if horizon is None:
        horizon = 10.0
        assumed["horizon"] = True
    paths = args.paths
    if paths is None:
        paths = 500
        assumed["paths"] = True
    h = args.step
    ats_cfg = AdaptiveConfig(delta_min=args.ats_delta_min, delta_max=args.ats_delta_max)
    contrast = experiment.divergence_contrast(entry, h, ats_cfg, paths, horizon,
                                              args.seed, guard=args.guard)
    meta = _metadata(args, entry, assumed, {
        "problem": entry.name, "x0": _fmt(float(entry.system.initial_state[0])),
        "em_step": _fmt(h), "ats_delta_max": _fmt(args.ats_delta_max),
        "ats_delta_min": _fmt(args.ats_delta_min), "horizon": _fmt(float(horizon)),
        "paths": paths, "seed": args.seed, "guard": _fmt(args.guard),
        "em_diverged_fraction": _fmt(contrast.em_fraction),
        "ats_diverged_fraction": _fmt(contrast.ats_fraction),
    })
    nan = math.nan
    mk = lambda scheme, dmax, dmin, frac: experiment.RmseRow(
        scheme=scheme, problem=entry.name, delta_max=dmax, delta_min=dmin,
        gamma=entry.default_env.gamma, K=entry.default_env.K, paths=paths,
        horizon=float(horizon), seed=args.seed, rmse=nan, rmse_stderr=nan,
        mean_step=nan, mean_steps_per_path=nan, backstop_fraction=nan,
        diverged_fraction=frac, runtime_seconds=0.0, runtime_total_seconds=0.0)
    rows = [mk("em", h, h, contrast.em_fraction),
            mk("ats-tem", args.ats_delta_max, args.ats_delta_min, contrast.ats_fraction)]
    with _open_out(args.out) as fh:
        emit_csv(rows, fh, meta, record_runtime=args.record_runtime)
    return 0


def _cmd_selftest(args) -> int:
    from . import selftest
    return selftest.run()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sde-adapt",
        description="Adaptive time-stepping SDE solvers and strong-error benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one trajectory as CSV")
    _add_common(p)
    p.add_argument("--delta-max", type=parse_step, default=None,
                   help="maximal adaptive step, or the step of a fixed-step scheme")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("rmse", help="single strong-error measurement")
    _add_common(p)
    p.add_argument("--delta-max", type=parse_ladder, default=None)
    p.add_argument("--reference", choices=("closed-form", "as-bem"), default=None)
    p.add_argument("--ref-delta-max", type=parse_step, default=None)
    p.add_argument("--quad-step", type=parse_step, default=None)
    p.add_argument("--comparability", action="store_true",
                   help="pair a fixed-step scheme with the adaptive run's mean step")
    p.set_defaults(func=_cmd_rmse)

    p = sub.add_parser("convergence", help="strong-error ladder with rate fit")
    _add_common(p)
    p.add_argument("--delta-max", type=parse_ladder, default=None,
                   help="ladder like 2^-11..2^-7 or comma list")
    p.add_argument("--reference", choices=("closed-form", "as-bem"), default=None)
    p.add_argument("--ref-delta-max", type=parse_step, default=None)
    p.add_argument("--quad-step", type=parse_step, default=None)
    p.set_defaults(func=_cmd_convergence)

    p = sub.add_parser("table1", help="volatility-model error ladder (preset defaults)")
    _add_common(p, with_scheme=False)
    p.add_argument("--delta-max", type=parse_ladder, default=None)
    p.add_argument("--reference", choices=("closed-form", "as-bem"), default=None)
    p.add_argument("--ref-delta-max", type=parse_step, default=None)
    p.add_argument("--quad-step", type=parse_step, default=None)
    p.set_defaults(func=_cmd_table1, scheme="ats-tem")

    p = sub.add_parser("probe-divergence", help="classical EM blow-up contrast")
    _add_common(p, with_scheme=False)
    p.add_argument("--step", type=parse_step, default=0.3704,
                   help="classical EM step size (default 0.3704)")
    p.add_argument("--ats-delta-max", type=parse_step, default=0.4)
    p.add_argument("--ats-delta-min", type=parse_step, default=2.0**-12)
    p.add_argument("--guard", type=float, default=schemes.OVERFLOW_GUARD)
    p.set_defaults(func=_cmd_probe_divergence)

    p = sub.add_parser("selftest", help="fast invariant checks")
    p.set_defaults(func=_cmd_selftest, command="selftest")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except _IoFailure as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
