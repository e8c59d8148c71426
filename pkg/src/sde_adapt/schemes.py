"""One-step maps and trajectory drivers for the adaptive scheme and baselines.

Scheme names used throughout the package and the CLI:

====================  ====================================================
``ats-tem``           adaptive steps, truncated-EM backstop
``ats-tamed2``        adaptive steps, tamed backstop (state-power divisor)
``ats-tamed1``        adaptive steps, tamed backstop (coefficient divisor)
``em``                classical fixed-step Euler-Maruyama
``fs-tem``            fixed-step truncated EM (projects the predicted state)
``fs-taem``           fixed-step tamed EM
``fs-bem``            fixed-step backward (drift-implicit) EM
``as-bem``            backward EM driven by the adaptive step sequence
====================  ====================================================

All drivers consume a shared :class:`~sde_adapt.brownian.BrownianPath`, so
different schemes evaluated on the same path see one consistent noise
realization.  A trajectory never raises on blow-up: it is returned with
``diverged=True`` as soon as a state goes non-finite or its norm passes
the overflow guard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .brownian import (
    BrownianPath,
    _GOLDEN,
    _MASK64,
    _mix64,
    _mix64_array,
    _normals_from_bases,
)
from .coefficients import (
    TAMED_MODEL1,
    TAMED_MODEL2,
    TRUNCATED_EM,
    AdaptiveConfig,
    GrowthEnvelope,
    MAX_GAMMA_FIXED,
    SdeSystem,
    _state_norm,
    radial_clip,
    truncation_radius,
)
from .errors import ConfigurationError, ImplicitSolveError, InvalidArgumentError

#: States with norm beyond this are treated as diverged instead of waiting
#: for IEEE overflow, which keeps blow-up probabilities well defined.
OVERFLOW_GUARD = 1e300

ADAPTIVE_SCHEMES = ("ats-tem", "ats-tamed2", "ats-tamed1", "as-bem")
FIXED_SCHEMES = ("em", "fs-tem", "fs-taem", "fs-bem")
SCHEMES = ADAPTIVE_SCHEMES + FIXED_SCHEMES

_ATS_BACKSTOP = {
    "ats-tem": TRUNCATED_EM,
    "ats-tamed2": TAMED_MODEL2,
    "ats-tamed1": TAMED_MODEL1,
}


@dataclass(frozen=True)
class NewtonConfig:
    """Controls the implicit solve of the backward EM update."""

    tolerance: float = 1e-12
    max_iterations: int = 50
    damping: float = 1.0

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ConfigurationError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if not (0.0 < self.damping <= 1.0):
            raise ConfigurationError("damping must lie in (0, 1]")


@dataclass
class Trajectory:
    """A realized discrete trajectory plus its continuous-extension endpoint.

    ``times[n+1] - times[n] == steps[n]``; every step lies in
    ``[delta_min, delta_max]`` except possibly the final one, which is
    clamped so the trajectory lands exactly on the horizon.
    """

    times: np.ndarray
    states: np.ndarray
    steps: np.ndarray
    backstop_flags: np.ndarray
    diverged: bool
    residuals: Optional[np.ndarray] = None

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return len(self.steps)


def _raw(sys: SdeSystem, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(sys.drift(x), float), np.asarray(sys.diffusion(x), float)


def _effective_fast(sys: SdeSystem, env: GrowthEnvelope, backstop_kind: str,
                    delta_min: float, trunc_radius: float, x: np.ndarray,
                    backstop: bool) -> tuple[np.ndarray, np.ndarray]:
    """Effective (F, G) given a precomputed backstop flag and radius."""
    if not backstop:
        return _raw(sys, x)
    if backstop_kind == TRUNCATED_EM:
        return _raw(sys, radial_clip(x, trunc_radius))
    f, g = _raw(sys, x)
    if backstop_kind == TAMED_MODEL2:
        div = 1.0 + math.sqrt(delta_min) * _state_norm(x) ** sys.poly_degree
    else:
        div = 1.0 + math.sqrt(delta_min) * (
            math.sqrt(float(np.sum(f * f))) + float(np.sum(g * g))
        )
    return f / div, g / div


# -- implicit solve -------------------------------------------------------


def _implicit_residual(sys: SdeSystem, h: float, rhs: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y - h * np.asarray(sys.drift(y), float) - rhs


def _solve_implicit(sys: SdeSystem, h: float, rhs: np.ndarray,
                    newton: NewtonConfig) -> tuple[np.ndarray, float]:
    """Solve ``y = rhs + h f(y)`` by damped Newton with a finite-difference
    Jacobian, falling back to fixed-point iteration from the explicit
    predictor.  Returns ``(y, residual_norm)``.
    """
    d = sys.dimension_state
    sqrt_eps = math.sqrt(np.finfo(float).eps)
    y = rhs + h * np.asarray(sys.drift(rhs), float)  # explicit predictor
    r = _implicit_residual(sys, h, rhs, y)
    rn = _state_norm(r)
    best_rn = rn
    for _ in range(newton.max_iterations):
        if rn <= newton.tolerance:
            return y, rn
        if not math.isfinite(rn):
            break
        # central finite-difference Jacobian of y - h f(y)
        if d == 1:
            e = sqrt_eps * (1.0 + abs(float(y[0])))
            fp = float(sys.drift(y + e)[0])
            fm = float(sys.drift(y - e)[0])
            jac = 1.0 - h * (fp - fm) / (2.0 * e)
            if jac == 0.0 or not math.isfinite(jac):
                break
            step = r / jac
        else:
            J = np.eye(d)
            for k in range(d):
                e = sqrt_eps * (1.0 + abs(float(y[k])))
                yp = y.copy()
                ym = y.copy()
                yp[k] += e
                ym[k] -= e
                J[:, k] -= h * (np.asarray(sys.drift(yp), float)
                                - np.asarray(sys.drift(ym), float)) / (2.0 * e)
            try:
                step = np.linalg.solve(J, r)
            except np.linalg.LinAlgError:
                break
        lam = newton.damping
        accepted = False
        while lam >= 2.0**-20:
            y_try = y - lam * step
            r_try = _implicit_residual(sys, h, rhs, y_try)
            rn_try = _state_norm(r_try)
            if rn_try < rn:
                y, r, rn = y_try, r_try, rn_try
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        best_rn = min(best_rn, rn)
    if rn <= newton.tolerance:
        return y, rn
    # fixed-point fallback from the explicit predictor
    y = rhs + h * np.asarray(sys.drift(rhs), float)
    for _ in range(newton.max_iterations):
        y = rhs + h * np.asarray(sys.drift(y), float)
        r = _implicit_residual(sys, h, rhs, y)
        rn = _state_norm(r)
        if rn <= newton.tolerance:
            return y, rn
        if not math.isfinite(rn):
            break
    raise ImplicitSolveError("implicit step did not converge", min(best_rn, rn))


# -- one-step maps --------------------------------------------------------


def ats_step(sys: SdeSystem, env: GrowthEnvelope, cfg: AdaptiveConfig, x, t: float,
             path: BrownianPath) -> tuple[np.ndarray, float, bool]:
    """One step of the adaptive scheme; returns ``(x', t', used_backstop)``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("state contains non-finite entries")
    if t < 0.0:
        raise InvalidArgumentError("time must be >= 0")
    s = cfg.delta_max / float(env.phi(_state_norm(x)))
    backstop = s <= cfg.delta_min
    delta = cfg.delta_min if backstop else s
    radius = truncation_radius(env, cfg.delta_min) if cfg.backstop == TRUNCATED_EM else 0.0
    F, G = _effective_fast(sys, env, cfg.backstop, cfg.delta_min, radius, x, backstop)
    t_next = t + delta
    dw = path.increment(t, t_next)
    return x + delta * F + G @ dw, t_next, backstop


def em_step(sys: SdeSystem, x, t: float, h: float,
            path: BrownianPath) -> tuple[np.ndarray, float]:
    """Classical Euler-Maruyama step."""
    if h <= 0.0:
        raise InvalidArgumentError("step size must be positive")
    x = np.asarray(x, dtype=float)
    f, g = _raw(sys, x)
    t_next = t + h
    return x + h * f + g @ path.increment(t, t_next), t_next


def fs_tem_step(sys: SdeSystem, env_fs: GrowthEnvelope, x, t: float, h: float,
                path: BrownianPath, gamma: float | None = None) -> tuple[np.ndarray, float]:
    """Fixed-step truncated EM: predict with raw coefficients, then project
    the predicted state onto the ball of radius ``phi^{-1}(K h^-gamma)``.

    Note the contrast with the adaptive scheme's backstop, which truncates
    the argument of the coefficients rather than the state.
    """
    g = env_fs.gamma if gamma is None else gamma
    if not (0.0 < g <= MAX_GAMMA_FIXED):
        raise ConfigurationError(f"fixed-step truncation needs gamma in (0, 1/2], got {g!r}")
    if not (0.0 < h <= 1.0):
        raise InvalidArgumentError("step size must lie in (0, 1]")
    radius = truncation_radius(env_fs, h, gamma=g)
    x = np.asarray(x, dtype=float)
    f, gm = _raw(sys, x)
    t_next = t + h
    pred = x + h * f + gm @ path.increment(t, t_next)
    return radial_clip(pred, radius), t_next


def fs_taem_step(sys: SdeSystem, x, t: float, h: float, gamma: float,
                 path: BrownianPath) -> tuple[np.ndarray, float]:
    """Fixed-step tamed EM: the whole increment is divided by
    ``1 + h^gamma |f(x)| + h^gamma |g(x)|^2``."""
    if not (0.0 < h <= 1.0):
        raise InvalidArgumentError("step size must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    f, g = _raw(sys, x)
    hg = h**gamma
    div = 1.0 + hg * math.sqrt(float(np.sum(f * f))) + hg * float(np.sum(g * g))
    t_next = t + h
    return x + (h * f + g @ path.increment(t, t_next)) / div, t_next


def bem_step(sys: SdeSystem, x, t: float, h: float, path: BrownianPath,
             newton: NewtonConfig | None = None) -> tuple[np.ndarray, float]:
    """Backward EM step: solves ``x' = x + f(x') h + g(x) dW``."""
    if not (0.0 < h <= 1.0):
        raise InvalidArgumentError("step size must lie in (0, 1]")
    newton = newton or NewtonConfig()
    x = np.asarray(x, dtype=float)
    _, g = _raw(sys, x)
    t_next = t + h
    rhs = x + g @ path.increment(t, t_next)
    y, _ = _solve_implicit(sys, h, rhs, newton)
    return y, t_next


# -- trajectory driver ----------------------------------------------------


def _is_bad(x: np.ndarray, guard: float) -> bool:
    return (not np.all(np.isfinite(x))) or _state_norm(x) > guard


def simulate(scheme: str, sys: SdeSystem, env: GrowthEnvelope | None, cfg_or_h,
             path: BrownianPath, horizon: float, newton: NewtonConfig | None = None,
             fs_gamma: float | None = None, guard: float = OVERFLOW_GUARD) -> Trajectory:
    """Run ``scheme`` from the system's initial state up to the horizon.

    The final step is clamped to land exactly on the horizon while keeping
    the coefficients (and backstop flag) selected by the unclamped step,
    which realizes the scheme's continuous-time extension at ``T``.
    Divergence is data, not an error: the trajectory is flagged and
    truncated at the first non-finite or guard-exceeding state.
    """
    if scheme not in SCHEMES:
        raise InvalidArgumentError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    if not (horizon > 0.0 and math.isfinite(horizon)):
        raise InvalidArgumentError("horizon must be positive and finite")
    if env is None:
        env = sys.envelope
    newton = newton or NewtonConfig()

    adaptive = scheme in ADAPTIVE_SCHEMES
    if adaptive:
        if not isinstance(cfg_or_h, AdaptiveConfig):
            raise InvalidArgumentError(f"{scheme} needs an AdaptiveConfig")
        cfg: AdaptiveConfig = cfg_or_h
        if scheme in _ATS_BACKSTOP and cfg.backstop != _ATS_BACKSTOP[scheme]:
            cfg = replace(cfg, backstop=_ATS_BACKSTOP[scheme])
    else:
        h = float(cfg_or_h)
        if scheme == "em":
            if h <= 0.0:
                raise InvalidArgumentError("step size must be positive")
        elif not (0.0 < h <= 1.0):
            raise InvalidArgumentError(f"{scheme} needs a step size in (0, 1]")

    implicit = scheme in ("fs-bem", "as-bem")
    gamma_taem = MAX_GAMMA_FIXED if fs_gamma is None else float(fs_gamma)
    radius_ats = 0.0
    radius_fs = 0.0
    if adaptive and scheme == "ats-tem":
        radius_ats = truncation_radius(env, cfg.delta_min)
    if scheme == "fs-tem":
        g = env.gamma if fs_gamma is None else float(fs_gamma)
        if not (0.0 < g <= MAX_GAMMA_FIXED):
            raise ConfigurationError(f"fs-tem needs gamma in (0, 1/2], got {g!r}")
        radius_fs = truncation_radius(env, h, gamma=g)

    x = np.array(sys.initial_state, dtype=float)
    t = 0.0
    times = [0.0]
    states = [x.copy()]
    steps: list[float] = []
    flags: list[bool] = []
    residuals: list[float] = []
    diverged = False

    phi = env.phi
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        while t < horizon:
            if adaptive:
                s = cfg.delta_max / float(phi(_state_norm(x)))
                backstop = s <= cfg.delta_min
                delta_un = cfg.delta_min if backstop else s
            else:
                backstop = False
                delta_un = h
            remaining = horizon - t
            if remaining <= delta_un:
                delta, t_next = remaining, horizon
            else:
                delta, t_next = delta_un, t + delta_un

            dw = path.increment(t, t_next)

            if scheme in ("fs-bem", "as-bem"):
                _, gmat = _raw(sys, x)
                rhs = x + gmat @ dw
                if _is_bad(rhs, guard):
                    x_new = rhs
                    res = math.inf
                else:
                    x_new, res = _solve_implicit(sys, delta, rhs, newton)
                residuals.append(res)
            elif scheme in _ATS_BACKSTOP:
                F, G = _effective_fast(sys, env, cfg.backstop, cfg.delta_min,
                                       radius_ats, x, backstop)
                x_new = x + delta * F + G @ dw
            elif scheme == "em":
                f, gmat = _raw(sys, x)
                x_new = x + delta * f + gmat @ dw
            elif scheme == "fs-tem":
                f, gmat = _raw(sys, x)
                x_new = radial_clip(x + delta * f + gmat @ dw, radius_fs)
            else:  # fs-taem
                f, gmat = _raw(sys, x)
                hg = h**gamma_taem
                div = 1.0 + hg * math.sqrt(float(np.sum(f * f))) + hg * float(np.sum(gmat * gmat))
                x_new = x + (delta * f + gmat @ dw) / div

            times.append(t_next)
            states.append(np.array(x_new, dtype=float))
            steps.append(delta)
            flags.append(backstop)
            if _is_bad(x_new, guard):
                diverged = True
                break
            x = x_new
            t = t_next

    return Trajectory(
        times=np.array(times),
        states=np.array(states),
        steps=np.array(steps),
        backstop_flags=np.array(flags, dtype=bool),
        diverged=diverged,
        residuals=np.array(residuals) if implicit else None,
    )


# -- vectorized ensemble driver -------------------------------------------


@dataclass
class EnsembleResult:
    """Terminal statistics of many independent paths stepped in lockstep."""

    terminal_states: np.ndarray      # (n_paths, d)
    diverged: np.ndarray             # (n_paths,) bool
    steps_per_path: np.ndarray       # (n_paths,) int
    backstop_steps: np.ndarray       # (n_paths,) int
    monitor_times: Optional[np.ndarray] = None
    monitor_norms: Optional[np.ndarray] = None  # (n_paths, len(monitor_times))


def _ensemble_path_keys(seed: int, n_paths: int) -> np.ndarray:
    """Per-path noise keys, matching derive_key(seed, i) bitwise."""
    h0 = _mix64((int(seed) + _GOLDEN) & _MASK64)
    idx = np.arange(n_paths, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64_array((np.uint64(h0) ^ idx) + np.uint64(_GOLDEN))


def _block_normals(keys: np.ndarray, counter0: int, block: int, m: int) -> np.ndarray:
    """Noise block of shape ``(n_paths, block, m)`` for counters
    ``counter0 .. counter0+block-1``, bitwise equal to per-counter calls of
    :func:`sde_adapt.brownian.batch_counter_normals`."""
    n = keys.size
    counters = np.arange(counter0, counter0 + block, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h1 = _mix64_array(keys + np.uint64(_GOLDEN))            # (n,)
        bases = _mix64_array((h1[:, None] ^ counters[None, :]) + np.uint64(_GOLDEN))
        flat = bases.reshape(-1)
        xi = _normals_from_bases(flat, m)
    return xi.reshape(n, block, m)


def simulate_ensemble(scheme: str, sys: SdeSystem, env: GrowthEnvelope | None,
                      cfg_or_h, n_paths: int, horizon: float, seed: int,
                      monitor_times=None, guard: float = OVERFLOW_GUARD,
                      noise_block: int = 64) -> EnsembleResult:
    """Step ``n_paths`` independent realizations of an explicit scheme.

    Supports the explicit schemes (``ats-tem``, ``ats-tamed2``,
    ``ats-tamed1``, ``em``); each path's noise is addressed by
    ``(derive_key(seed, i), step_counter)``, so results do not depend on
    how the work is scheduled.  Paths are frozen as soon as they reach the
    horizon or diverge.  When ``monitor_times`` is given, ``|Y(t)|`` of the
    piecewise-constant extension is recorded at those times.
    """
    if scheme not in ("ats-tem", "ats-tamed2", "ats-tamed1", "em"):
        raise InvalidArgumentError(f"ensemble driver does not support scheme {scheme!r}")
    if n_paths < 1:
        raise InvalidArgumentError("n_paths must be >= 1")
    if not (horizon > 0.0 and math.isfinite(horizon)):
        raise InvalidArgumentError("horizon must be positive and finite")
    if env is None:
        env = sys.envelope

    adaptive = scheme != "em"
    if adaptive:
        cfg: AdaptiveConfig = cfg_or_h
        if scheme in _ATS_BACKSTOP and cfg.backstop != _ATS_BACKSTOP[scheme]:
            cfg = replace(cfg, backstop=_ATS_BACKSTOP[scheme])
        radius = truncation_radius(env, cfg.delta_min) if cfg.backstop == TRUNCATED_EM else 0.0
        sqrt_dmin = math.sqrt(cfg.delta_min)
    else:
        h = float(cfg_or_h)
        if h <= 0.0:
            raise InvalidArgumentError("step size must be positive")

    d, m = sys.dimension_state, sys.dimension_noise
    M = int(n_paths)
    keys = _ensemble_path_keys(seed, M)

    X = np.tile(np.asarray(sys.initial_state, float), (M, 1))
    t = np.zeros(M)
    active = np.ones(M, dtype=bool)
    diverged = np.zeros(M, dtype=bool)
    n_steps = np.zeros(M, dtype=np.int64)
    n_back = np.zeros(M, dtype=np.int64)

    monitor = monitor_times is not None
    if monitor:
        grid = np.asarray(monitor_times, dtype=float)
        if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0):
            raise InvalidArgumentError("monitor times must be strictly increasing")
        nG = grid.size
        norms_rec = np.full((M, nG), np.nan)
        ptr = np.zeros(M, dtype=np.int64)
        r0 = math.sqrt(float(np.dot(sys.initial_state, sys.initial_state)))
        if grid[0] == 0.0:
            norms_rec[:, 0] = r0
            ptr[:] = 1

    k = 0
    block = None
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        while active.any():
            if block is None or k % noise_block == 0:
                block = _block_normals(keys, k, noise_block, m)
            xi = block[:, k % noise_block, :]
            k += 1

            r = np.sqrt(np.einsum("ij,ij->i", X, X))
            if adaptive:
                s = cfg.delta_max / env.phi(r)
                backstop = s <= cfg.delta_min
                delta_un = np.where(backstop, cfg.delta_min, s)
            else:
                backstop = np.zeros(M, dtype=bool)
                delta_un = np.full(M, h)
            remaining = horizon - t
            final = remaining <= delta_un
            delta = np.where(final, remaining, delta_un)
            delta = np.where(active, delta, 0.0)

            if adaptive and cfg.backstop == TRUNCATED_EM:
                scale = np.where(backstop & (r > radius), radius / np.maximum(r, 1e-300), 1.0)
                Xe = X * scale[:, None]
                F = np.asarray(sys.drift(Xe), float)
                G = np.asarray(sys.diffusion(Xe), float)
            else:
                F = np.asarray(sys.drift(X), float)
                G = np.asarray(sys.diffusion(X), float)
                if adaptive:
                    if cfg.backstop == TAMED_MODEL2:
                        div = 1.0 + sqrt_dmin * r**sys.poly_degree
                    else:
                        fn = np.sqrt(np.einsum("ij,ij->i", F, F))
                        gn2 = np.einsum("ijk,ijk->i", G, G)
                        div = 1.0 + sqrt_dmin * (fn + gn2)
                    div = np.where(backstop, div, 1.0)
                    F = F / div[:, None]
                    G = G / div[:, None, None]

            dW = np.sqrt(delta)[:, None] * xi
            X_new = X + delta[:, None] * F + np.einsum("ijk,ik->ij", G, dW)
            X = np.where(active[:, None], X_new, X)

            r_new = np.sqrt(np.einsum("ij,ij->i", X, X))
            bad = active & (~np.all(np.isfinite(X), axis=1) | (r_new > guard))
            t_next = np.where(active, np.where(final, horizon, t + delta), t)

            if monitor:
                stepped = active.copy()
                while True:
                    p = np.minimum(ptr, nG - 1)
                    g = grid[p]
                    can = stepped & (ptr < nG)
                    hit_mid = can & (g < t_next)
                    hit_end = can & (g == t_next)
                    if not (hit_mid.any() or hit_end.any()):
                        break
                    rows = np.where(hit_mid)[0]
                    norms_rec[rows, ptr[rows]] = r[rows]
                    rows = np.where(hit_end)[0]
                    norms_rec[rows, ptr[rows]] = r_new[rows]
                    ptr[hit_mid | hit_end] += 1

            n_steps += active
            n_back += active & backstop
            diverged |= bad
            active &= ~bad
            reached = active & final
            t = np.where(reached, horizon, t_next)
            active &= ~reached

    return EnsembleResult(
        terminal_states=X,
        diverged=diverged,
        steps_per_path=n_steps,
        backstop_steps=n_back,
        monitor_times=np.asarray(monitor_times, float) if monitor else None,
        monitor_norms=norms_rec if monitor else None,
    )
