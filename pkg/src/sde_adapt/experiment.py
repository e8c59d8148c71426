"""Monte Carlo error measurement, convergence-rate fitting and probes.

The central protocol: for path index ``i`` the driving noise is a
:class:`~sde_adapt.brownian.BrownianPath` seeded with
``derive_key(base_seed, i)``.  The reference solution (closed form or a
fine-step implicit solve) is evaluated on the *fresh* path first, so its
value depends only on the seed; every scheme run then refines the same
realization.  Because each path's work is a pure function of
``(base_seed, i)`` and results are reduced in path order, a study returns
bitwise-identical numbers for any worker count.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import problems
from .brownian import BrownianPath, derive_key
from .coefficients import AdaptiveConfig, GrowthEnvelope, SdeSystem
from .errors import ImplicitSolveError, InvalidArgumentError, NumericError
from .problems import ProblemCatalogEntry, reference_solution
from .schemes import (
    OVERFLOW_GUARD,
    ADAPTIVE_SCHEMES,
    NewtonConfig,
    SCHEMES,
    Trajectory,
    simulate,
    simulate_ensemble,
)


@dataclass(frozen=True)
class ReferenceSpec:
    """How the stand-in exact solution is produced on each path.

    ``kind`` is ``"closed-form"`` (the system's exact evaluator) or
    ``"as-bem"`` (adaptive-step backward EM with maximal step
    ``ref_delta_max``).  ``ref_delta_min`` defaults to the study's own
    minimal step.
    """

    kind: str = "as-bem"
    ref_delta_max: float = 2.0**-12
    quad_step: float = 2.0**-14
    ref_delta_min: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("closed-form", "as-bem"):
            raise InvalidArgumentError(f"unknown reference kind {self.kind!r}")


@dataclass
class RmseRow:
    """One strong-error measurement at a fixed step-size configuration."""

    scheme: str
    problem: str
    delta_max: float
    delta_min: float
    gamma: float
    K: float
    paths: int
    horizon: float
    seed: int
    rmse: float
    rmse_stderr: float
    mean_step: float
    mean_steps_per_path: float
    backstop_fraction: float
    diverged_fraction: float
    runtime_seconds: float
    runtime_total_seconds: float


@dataclass
class ConvergenceReport:
    """RMSE rows over a step-size ladder with a fitted log-log line."""

    rows: list[RmseRow]
    slope: Optional[float]
    intercept: Optional[float]
    r_squared: Optional[float]


@dataclass
class MomentEstimate:
    """Monte Carlo estimate of ``max_t E|Y(t)|^p`` over a monitor grid."""

    value: float
    stderr: float
    diverged_fraction: float
    argmax_time: float

    def __float__(self) -> float:
        return self.value


Problem = Union[ProblemCatalogEntry, SdeSystem]


def mean_step(traj: Trajectory) -> float:
    """Average step size: trajectory horizon divided by its step count."""
    if traj.n_steps == 0:
        raise InvalidArgumentError("trajectory has no steps")
    return traj.horizon / traj.n_steps


def backstop_fraction(traj: Trajectory) -> float:
    """Fraction of steps on which the backstop indicator was active."""
    if traj.n_steps == 0:
        raise InvalidArgumentError("trajectory has no steps")
    return float(np.mean(traj.backstop_flags))


# -- study core -------------------------------------------------------------


def _resolve(problem: Problem, env: GrowthEnvelope | None):
    if isinstance(problem, ProblemCatalogEntry):
        system = problem.system
        return system, env or problem.default_env, problem.name
    if isinstance(problem, SdeSystem):
        return problem, env or problem.envelope, "custom"
    raise InvalidArgumentError("problem must be a catalog entry or an SdeSystem")


def _row_token(spec) -> tuple:
    if isinstance(spec, AdaptiveConfig):
        return ("adaptive", spec.delta_min, spec.delta_max, spec.backstop)
    h = float(spec)
    return ("fixed", h)


def _row_from_token(tok) -> Union[AdaptiveConfig, float]:
    if tok[0] == "adaptive":
        return AdaptiveConfig(delta_min=tok[1], delta_max=tok[2], backstop=tok[3])
    return tok[1]


def _run_path_rows(system: SdeSystem, env: GrowthEnvelope, scheme: str,
                   row_tokens: Sequence[tuple], horizon: float, base_seed: int,
                   index: int, ref: ReferenceSpec, ref_delta_min: float,
                   newton: NewtonConfig, guard: float, fs_gamma: float | None):
    """All rows of the study on path ``index``; the reference runs first."""
    key = derive_key(base_seed, index)
    m = system.dimension_noise
    path = BrownianPath(key, m)

    t0 = time.perf_counter()
    ref_failed = False
    ref_value = None
    try:
        if ref.kind == "closed-form":
            if system.exact_solution is None:
                raise InvalidArgumentError(
                    "closed-form reference requested but the system has no exact evaluator"
                )
            ref_value = np.asarray(system.exact_solution(path, horizon), float)
        else:
            ref_value = reference_solution(
                system, env, path, horizon,
                ref_delta_max=ref.ref_delta_max,
                delta_min=ref_delta_min, newton=newton,
            )
        if not np.all(np.isfinite(ref_value)):
            ref_failed = True
    except (ImplicitSolveError, NumericError):
        ref_failed = True
    ref_seconds = time.perf_counter() - t0

    snap = path.snapshot() if len(row_tokens) > 1 else None
    records = []
    for j, tok in enumerate(row_tokens):
        rpath = path if snap is None else BrownianPath.from_knots(key, m, *snap)
        cfg_or_h = _row_from_token(tok)
        t1 = time.perf_counter()
        traj = simulate(scheme, system, env, cfg_or_h, rpath, horizon,
                        newton=newton, fs_gamma=fs_gamma, guard=guard)
        secs = time.perf_counter() - t1
        err_sq = math.nan
        if not traj.diverged and not ref_failed:
            diff = traj.terminal_state - ref_value
            err_sq = float(np.dot(diff, diff))
        records.append((err_sq, traj.n_steps, int(np.sum(traj.backstop_flags)),
                        traj.diverged, ref_failed, secs))
    return records, ref_seconds


_WORKER_CACHE: dict = {}


def _worker(task):
    (name, kwargs, env_over, scheme, row_tokens, horizon, base_seed,
     ref_tuple, ref_delta_min, newton_tuple, guard, fs_gamma, indices) = task
    cache_key = (name, tuple(sorted(kwargs.items())), env_over)
    cached = _WORKER_CACHE.get(cache_key)
    if cached is None:
        entry = problems.get(name, **dict(kwargs))
        env = entry.default_env
        if env_over is not None:
            env = replace(env, K=env_over[0], gamma=env_over[1])
        cached = (entry.system, env)
        _WORKER_CACHE[cache_key] = cached
    system, env = cached
    ref = ReferenceSpec(*ref_tuple)
    newton = NewtonConfig(*newton_tuple)
    out = []
    for i in indices:
        out.append((i, _run_path_rows(system, env, scheme, row_tokens, horizon,
                                      base_seed, i, ref, ref_delta_min, newton,
                                      guard, fs_gamma)))
    return out


def _study(problem: Problem, scheme: str, row_specs: Sequence, n_paths: int,
           horizon: float, seed: int, ref: ReferenceSpec,
           env: GrowthEnvelope | None = None, newton: NewtonConfig | None = None,
           workers: int = 1, guard: float = OVERFLOW_GUARD,
           fs_gamma: float | None = None) -> list[RmseRow]:
    if scheme not in SCHEMES:
        raise InvalidArgumentError(f"unknown scheme {scheme!r}")
    if n_paths < 1:
        raise InvalidArgumentError("path count must be >= 1")
    system, env, problem_name = _resolve(problem, env)
    newton = newton or NewtonConfig()
    row_tokens = [_row_token(s) for s in row_specs]
    adaptive_mins = [t[1] for t in row_tokens if t[0] == "adaptive"]
    ref_delta_min = ref.ref_delta_min
    if ref_delta_min is None:
        ref_delta_min = min(adaptive_mins) if adaptive_mins else 2.0**-20

    n_rows = len(row_tokens)
    err_sq = np.full((n_rows, n_paths), np.nan)
    n_steps = np.zeros((n_rows, n_paths), dtype=np.int64)
    n_back = np.zeros((n_rows, n_paths), dtype=np.int64)
    div = np.zeros((n_rows, n_paths), dtype=bool)
    reffail = np.zeros(n_paths, dtype=bool)
    scheme_secs = np.zeros(n_rows)
    ref_secs_total = 0.0

    # warm-up run, discarded, so first-call overheads stay out of timings
    _run_path_rows(system, env, scheme, row_tokens, horizon, seed, 0, ref,
                   ref_delta_min, newton, guard, fs_gamma)

    def _absorb(i, result):
        nonlocal ref_secs_total
        records, ref_seconds = result
        ref_secs_total += ref_seconds
        for j, rec in enumerate(records):
            e2, ns, nb, d, rf, secs = rec
            err_sq[j, i] = e2
            n_steps[j, i] = ns
            n_back[j, i] = nb
            div[j, i] = d
            reffail[i] = rf
            scheme_secs[j] += secs

    parallel = (workers > 1 and isinstance(problem, ProblemCatalogEntry)
                and env.phi is problem.default_env.phi)
    if workers > 1 and not parallel:
        warnings.warn("parallel execution needs a catalog problem with its own "
                      "envelope shape; running sequentially")
    if parallel:
        kwargs = dict(problem.ctor_kwargs)
        env_over = None
        default_env = problem.default_env
        if env.K != default_env.K or env.gamma != default_env.gamma:
            env_over = (env.K, env.gamma)
        ref_tuple = (ref.kind, ref.ref_delta_max, ref.quad_step, ref.ref_delta_min)
        newton_tuple = (newton.tolerance, newton.max_iterations, newton.damping)
        chunk = max(1, -(-n_paths // (workers * 4)))
        tasks = []
        for start in range(0, n_paths, chunk):
            idx = tuple(range(start, min(start + chunk, n_paths)))
            tasks.append((problem.name, tuple(kwargs.items()), env_over, scheme,
                          tuple(row_tokens), horizon, seed, ref_tuple,
                          ref_delta_min, newton_tuple, guard, fs_gamma, idx))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result_chunk in pool.map(_worker, tasks):
                for i, result in result_chunk:
                    _absorb(i, result)
    else:
        for i in range(n_paths):
            _absorb(i, _run_path_rows(system, env, scheme, row_tokens, horizon,
                                      seed, i, ref, ref_delta_min, newton,
                                      guard, fs_gamma))

    if reffail.any():
        warnings.warn(
            f"reference solution failed on {int(reffail.sum())} of {n_paths} paths; "
            "those paths are excluded and counted as diverged"
        )

    rows = []
    for j, tok in enumerate(row_tokens):
        valid = ~(div[j] | reffail)
        n_valid = int(valid.sum())
        if n_valid > 0:
            errs = err_sq[j, valid]
            msq = float(np.mean(errs))
            rmse = math.sqrt(msq)
            if n_valid > 1 and rmse > 0.0:
                stderr = math.sqrt(float(np.var(errs, ddof=1)) / n_valid) / (2.0 * rmse)
            else:
                stderr = 0.0
            steps_mean = float(np.mean(n_steps[j, valid]))
            step_total = int(np.sum(n_steps[j, valid]))
            back_total = int(np.sum(n_back[j, valid]))
            bf = back_total / step_total if step_total else 0.0
        else:
            rmse = math.nan
            stderr = math.nan
            steps_mean = math.nan
            bf = math.nan
        if tok[0] == "adaptive":
            dmin, dmax = tok[1], tok[2]
            gamma = env.gamma
        else:
            dmin = dmax = tok[1]
            gamma = (0.5 if fs_gamma is None else fs_gamma) if scheme == "fs-taem" else env.gamma
        rows.append(RmseRow(
            scheme=scheme, problem=problem_name, delta_max=dmax, delta_min=dmin,
            gamma=gamma, K=env.K, paths=n_paths, horizon=horizon, seed=seed,
            rmse=rmse, rmse_stderr=stderr,
            mean_step=(horizon / steps_mean) if steps_mean and not math.isnan(steps_mean) else math.nan,
            mean_steps_per_path=steps_mean,
            backstop_fraction=bf,
            diverged_fraction=1.0 - (n_valid / n_paths),
            runtime_seconds=float(scheme_secs[j]),
            runtime_total_seconds=float(scheme_secs[j] + ref_secs_total),
        ))
    return rows


def rmse_study(scheme: str, problem: Problem, env: GrowthEnvelope | None,
               cfg_or_h, n_paths: int, horizon: float, seed: int,
               reference: ReferenceSpec, newton: NewtonConfig | None = None,
               workers: int = 1, fs_gamma: float | None = None,
               guard: float = OVERFLOW_GUARD) -> RmseRow:
    """Strong terminal error of one scheme configuration over ``n_paths``.

    Scheme and reference run on the same path per index; paths where the
    scheme diverges or the reference fails are excluded from the error and
    reported in ``diverged_fraction``.
    """
    return _study(problem, scheme, [cfg_or_h], n_paths, horizon, seed, reference,
                  env=env, newton=newton, workers=workers, guard=guard,
                  fs_gamma=fs_gamma)[0]


def convergence_study(scheme: str, problem: Problem, env: GrowthEnvelope | None,
                      delta_max_ladder: Sequence[float], delta_min: float,
                      n_paths: int, horizon: float, seed: int,
                      reference: ReferenceSpec, newton: NewtonConfig | None = None,
                      workers: int = 1, fs_gamma: float | None = None,
                      backstop: str | None = None,
                      guard: float = OVERFLOW_GUARD) -> ConvergenceReport:
    """RMSE over a decreasing step ladder plus a least-squares rate fit.

    The fit is ordinary least squares on ``(log2 delta_max, log2 rmse)``.
    Rows with zero RMSE, or with more than 1% of paths diverged, are
    excluded from the fit with a warning; fewer than two usable rows
    leaves the fit undefined.
    """
    ladder = [float(v) for v in delta_max_ladder]
    if not ladder:
        raise InvalidArgumentError("step ladder must be nonempty")
    if any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise InvalidArgumentError("step ladder must be strictly decreasing")
    if scheme in ADAPTIVE_SCHEMES:
        if any(v < delta_min for v in ladder):
            raise InvalidArgumentError("every ladder step must be >= delta_min")
        kind = backstop
        specs = [AdaptiveConfig(delta_min=delta_min, delta_max=v,
                                **({"backstop": kind} if kind else {}))
                 for v in ladder]
    else:
        specs = ladder
    rows = _study(problem, scheme, specs, n_paths, horizon, seed, reference,
                  env=env, newton=newton, workers=workers, guard=guard,
                  fs_gamma=fs_gamma)

    usable = [r for r in rows
              if math.isfinite(r.rmse) and r.rmse > 0.0 and r.diverged_fraction <= 0.01]
    if len(usable) < len(rows):
        warnings.warn(f"{len(rows) - len(usable)} ladder row(s) excluded from the rate fit")
    if len(usable) < 2:
        warnings.warn("fewer than two usable rows; rate fit refused")
        return ConvergenceReport(rows=rows, slope=None, intercept=None, r_squared=None)
    slope, intercept, r2 = fit_convergence([r.delta_max for r in usable],
                                           [r.rmse for r in usable])
    return ConvergenceReport(rows=rows, slope=slope, intercept=intercept, r_squared=r2)


def fit_convergence(step_sizes: Sequence[float], rmses: Sequence[float]) -> tuple[float, float, float]:
    """Least squares of ``log2 rmse`` against ``log2 step``; returns
    ``(slope, intercept, r_squared)``."""
    x = np.log2(np.asarray(step_sizes, float))
    y = np.log2(np.asarray(rmses, float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res < 1e-24 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def comparability_study(fixed_scheme: str, problem: Problem, env: GrowthEnvelope | None,
                        paired_cfg: AdaptiveConfig, n_paths: int, horizon: float,
                        seed: int, reference: ReferenceSpec,
                        newton: NewtonConfig | None = None, workers: int = 1,
                        fs_gamma: float | None = None) -> tuple[RmseRow, RmseRow]:
    """Cost-fair comparison: run the adaptive scheme, then the fixed-step
    scheme with its step set to exactly the adaptive run's mean step."""
    ats_row = rmse_study("ats-tem", problem, env, paired_cfg, n_paths, horizon,
                         seed, reference, newton=newton, workers=workers)
    fixed_row = rmse_study(fixed_scheme, problem, env, ats_row.mean_step, n_paths,
                           horizon, seed, reference, newton=newton, workers=workers,
                           fs_gamma=fs_gamma)
    return ats_row, fixed_row


# -- probes -----------------------------------------------------------------


def moment_probe(scheme: str, problem: Problem, env: GrowthEnvelope | None,
                 cfg_or_h, n_paths: int, horizon: float, seed: int, p: float,
                 monitor_points: int = 33) -> MomentEstimate:
    """Estimate ``max_t E|Y(t)|^p`` on a uniform monitor grid.

    Diverged paths are excluded from the estimate and reported in
    ``diverged_fraction``.
    """
    if p < 2.0:
        raise InvalidArgumentError("moment order p must be >= 2")
    system, env, _ = _resolve(problem, env)
    grid = np.linspace(0.0, horizon, monitor_points)
    ens = simulate_ensemble(scheme, system, env, cfg_or_h, n_paths, horizon, seed,
                            monitor_times=grid)
    valid = ~ens.diverged
    if not valid.any():
        return MomentEstimate(math.nan, math.nan, 1.0, math.nan)
    vals = ens.monitor_norms[valid] ** p
    means = np.nanmean(vals, axis=0)
    j = int(np.nanargmax(means))
    col = vals[:, j]
    col = col[np.isfinite(col)]
    stderr = float(np.std(col, ddof=1) / math.sqrt(col.size)) if col.size > 1 else 0.0
    return MomentEstimate(
        value=float(means[j]),
        stderr=stderr,
        diverged_fraction=float(np.mean(ens.diverged)),
        argmax_time=float(grid[j]),
    )


def divergence_probe(problem: Problem, h: float, n_paths: int, horizon: float,
                     seed: int, guard: float = OVERFLOW_GUARD) -> float:
    """Fraction of classical-EM paths whose norm passes the guard before T."""
    system, env, _ = _resolve(problem, None)
    count = 0
    for i in range(n_paths):
        path = BrownianPath(derive_key(seed, i), system.dimension_noise)
        traj = simulate("em", system, env, h, path, horizon, guard=guard)
        count += traj.diverged
    return count / n_paths


@dataclass
class DivergenceContrast:
    em_fraction: float
    ats_fraction: float


def divergence_contrast(problem: Problem, em_h: float, ats_cfg: AdaptiveConfig,
                        n_paths: int, horizon: float, seed: int,
                        guard: float = OVERFLOW_GUARD) -> DivergenceContrast:
    """Classical EM versus the adaptive scheme on identical driving noise."""
    system, env, _ = _resolve(problem, None)
    em_count = 0
    ats_count = 0
    for i in range(n_paths):
        path = BrownianPath(derive_key(seed, i), system.dimension_noise)
        em_count += simulate("em", system, env, em_h, path, horizon, guard=guard).diverged
        ats_count += simulate("ats-tem", system, env, ats_cfg, path, horizon,
                              guard=guard).diverged
    return DivergenceContrast(em_fraction=em_count / n_paths,
                              ats_fraction=ats_count / n_paths)
