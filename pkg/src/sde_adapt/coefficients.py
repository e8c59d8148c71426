"""Growth envelopes, adaptive step sizes, truncation and taming transforms.

The adaptive step is ``delta(x) = delta_min ∨ (delta_max / phi(|x|))`` for
a strictly increasing envelope ``phi`` that dominates the growth ratios of
the drift and diffusion.  When the step hits its floor the scheme switches
to a backstop update built either from coefficients evaluated at a
radially truncated state or from tamed (divided) coefficients.  This
module holds those ingredients as pure functions; trajectory drivers live
in :mod:`sde_adapt.schemes`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConfigurationError,
    EnvelopeDomainError,
    InvalidArgumentError,
    NumericError,
)

TRUNCATED_EM = "truncated-em"
TAMED_MODEL2 = "tamed-model2"
TAMED_MODEL1 = "tamed-model1"
BACKSTOPS = (TRUNCATED_EM, TAMED_MODEL2, TAMED_MODEL1)

#: gamma ranges differ by use: the radial truncation of the adaptive
#: scheme's backstop requires gamma in (0, 1/3], while the fixed-step
#: truncated scheme admits (0, 1/2].
MAX_GAMMA_TRUNCATE = 1.0 / 3.0
MAX_GAMMA_FIXED = 0.5


def invert_envelope_numeric(phi: Callable[[float], float], v: float,
                            rel_tol: float = 1e-10) -> float:
    """Invert a strictly increasing envelope by bracketing and bisection.

    Returns ``r >= 0`` with ``|phi(r) - v| <= rel_tol * max(1, v)``.

    Raises
    ------
    EnvelopeDomainError
        If ``v`` lies below ``phi(0)``.
    NumericError
        If no bracket is found within 2**10 doublings, or bisection
        cannot meet the tolerance.
    """
    v = float(v)
    tol = rel_tol * max(1.0, abs(v))
    lo = 0.0
    flo = float(phi(lo))
    if v < flo - tol:
        raise EnvelopeDomainError(f"{v!r} is below phi(0) = {flo!r}")
    if abs(flo - v) <= tol:
        return lo
    hi = 1.0
    for _ in range(1024):
        fhi = float(phi(hi))
        if fhi >= v:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise NumericError(f"no bracket for phi inverse of {v!r} within 2^10 doublings")
    mid = hi
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        fm = float(phi(mid))
        if abs(fm - v) <= tol:
            return mid
        if fm < v:
            lo = mid
        else:
            hi = mid
        if hi - lo <= math.ulp(hi):
            break
    fm = float(phi(mid))
    if abs(fm - v) <= tol:
        return mid
    raise NumericError(f"bisection stalled inverting envelope at {v!r} (residual {fm - v:.3e})")


@dataclass(frozen=True)
class GrowthEnvelope:
    """A strictly increasing function ``phi >= 1`` dominating coefficient growth.

    ``phi`` (and, if supplied, ``phi_inverse``) must accept both floats and
    numpy arrays, since vectorized drivers evaluate the envelope on whole
    batches of state norms.  ``K`` is the truncation constant (at least
    ``phi(1)``) and ``gamma`` the truncation exponent.
    """

    phi: Callable
    K: float
    phi_inverse: Optional[Callable] = None
    gamma: float = 1.0 / 3.0

    def __post_init__(self):
        if not (0.0 < self.gamma <= MAX_GAMMA_FIXED):
            raise ConfigurationError(f"gamma must lie in (0, 1/2], got {self.gamma!r}")
        phi0 = float(self.phi(0.0))
        if not phi0 >= 1.0:
            raise ConfigurationError(f"phi(0) must be >= 1, got {phi0!r}")
        phi1 = float(self.phi(1.0))
        if not self.K >= phi1:
            raise ConfigurationError(f"K must be >= phi(1) = {phi1!r}, got {self.K!r}")

    def inverse(self, v: float) -> float:
        """phi^{-1}(v) for v >= phi(0), closed-form when available."""
        v = float(v)
        phi0 = float(self.phi(0.0))
        if v < phi0:
            raise EnvelopeDomainError(f"{v!r} is below phi(0) = {phi0!r}")
        if self.phi_inverse is not None:
            return float(self.phi_inverse(v))
        return invert_envelope_numeric(self.phi, v)


@dataclass(frozen=True)
class AdaptiveConfig:
    """Step-size window and backstop selection for the adaptive scheme."""

    delta_min: float
    delta_max: float
    backstop: str = TRUNCATED_EM

    def __post_init__(self):
        if not (0.0 < self.delta_min <= self.delta_max <= 1.0):
            raise ConfigurationError(
                f"need 0 < delta_min <= delta_max <= 1, got "
                f"({self.delta_min!r}, {self.delta_max!r})"
            )
        if self.backstop not in BACKSTOPS:
            raise ConfigurationError(f"unknown backstop {self.backstop!r}")

    @property
    def rho(self) -> float:
        """Step-size ratio delta_max / delta_min (>= 1)."""
        return self.delta_max / self.delta_min


@dataclass
class SdeSystem:
    """A d-dimensional SDE ``dX = f(X) dt + g(X) dW`` with metadata.

    ``drift`` maps ``(..., d) -> (..., d)`` and ``diffusion`` maps
    ``(..., d) -> (..., d, m)``; both must broadcast over leading axes so
    that ensemble drivers can evaluate whole batches of states.
    ``poly_degree`` is the growth exponent l of the drift's local
    Lipschitz bound; ``khasminskii_p``/``khasminskii_alpha``, when set,
    assert the one-sided growth condition
    ``<x, f(x)> + (p-1)/2 |g(x)|^2 <= alpha (1 + |x|^2)``.
    """

    dimension_state: int
    dimension_noise: int
    drift: Callable
    diffusion: Callable
    initial_state: np.ndarray
    poly_degree: float
    envelope: GrowthEnvelope
    exact_solution: Optional[Callable] = None
    khasminskii_p: Optional[float] = None
    khasminskii_alpha: Optional[float] = None

    def __post_init__(self):
        d, m = self.dimension_state, self.dimension_noise
        if d < 1 or m < 1:
            raise ConfigurationError("state and noise dimensions must be >= 1")
        x0 = np.asarray(self.initial_state, dtype=float).reshape(-1)
        if x0.shape != (d,):
            raise ConfigurationError(f"initial state must have shape ({d},)")
        self.initial_state = x0
        f0 = np.asarray(self.drift(x0), dtype=float)
        g0 = np.asarray(self.diffusion(x0), dtype=float)
        if f0.shape != (d,):
            raise ConfigurationError(f"drift must return shape ({d},), got {f0.shape}")
        if g0.shape != (d, m):
            raise ConfigurationError(f"diffusion must return shape ({d}, {m}), got {g0.shape}")
        if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(g0))):
            raise ConfigurationError("coefficients are not finite at the initial state")
        if self.poly_degree < 0:
            raise ConfigurationError("poly_degree must be >= 0")


def _state_norm(x: np.ndarray) -> float:
    return math.sqrt(float(np.dot(x, x)))


def _check_state(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("state contains non-finite entries")
    return x


def adaptive_step(env: GrowthEnvelope, cfg: AdaptiveConfig, x) -> float:
    """delta(x) = max(delta_min, delta_max / phi(|x|)); always in [delta_min, delta_max]."""
    x = _check_state(x)
    s = cfg.delta_max / float(env.phi(_state_norm(x)))
    return cfg.delta_min if s <= cfg.delta_min else s


def is_backstop(env: GrowthEnvelope, cfg: AdaptiveConfig, x) -> bool:
    """True iff the adaptive step hits its floor at ``x``.

    Uses the comparison ``delta_max / phi(|x|) <= delta_min`` directly, so
    it agrees with ``adaptive_step(x) == delta_min`` exactly.
    """
    x = _check_state(x)
    return cfg.delta_max / float(env.phi(_state_norm(x))) <= cfg.delta_min


def truncation_radius(env: GrowthEnvelope, delta: float, gamma: float | None = None) -> float:
    """Radius ``phi^{-1}(K * delta**-gamma)`` of the truncation ball."""
    g = env.gamma if gamma is None else gamma
    v = env.K * float(delta) ** (-g)
    try:
        return env.inverse(v)
    except EnvelopeDomainError as exc:
        raise ConfigurationError(
            f"K * delta^-gamma = {v!r} lies below the envelope's range"
        ) from exc


def radial_clip(x: np.ndarray, radius: float) -> np.ndarray:
    """Project ``x`` onto the closed ball of the given radius (0 maps to 0)."""
    r = _state_norm(x)
    if r <= radius or r == 0.0:
        return x
    return (radius / r) * x


def truncate(env: GrowthEnvelope, delta_min: float, x) -> np.ndarray:
    """Truncation map: clip ``|x|`` at ``phi^{-1}(K * delta_min**-gamma)``.

    Requires the envelope's gamma to lie in (0, 1/3].
    """
    x = _check_state(x)
    if env.gamma > MAX_GAMMA_TRUNCATE:
        raise ConfigurationError(
            f"truncation requires gamma <= 1/3, envelope has {env.gamma!r}"
        )
    return radial_clip(x, truncation_radius(env, delta_min))


def tame_model2(sys: SdeSystem, delta_min: float, x) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients divided by ``1 + delta_min**0.5 * |x|**l``."""
    x = _check_state(x)
    div = 1.0 + math.sqrt(delta_min) * _state_norm(x) ** sys.poly_degree
    return np.asarray(sys.drift(x), float) / div, np.asarray(sys.diffusion(x), float) / div


def tame_model1(sys: SdeSystem, delta_min: float, x) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients divided by ``1 + delta_min**0.5 * (|f(x)| + |g(x)|^2)``."""
    x = _check_state(x)
    f = np.asarray(sys.drift(x), float)
    g = np.asarray(sys.diffusion(x), float)
    div = 1.0 + math.sqrt(delta_min) * (
        math.sqrt(float(np.sum(f * f))) + float(np.sum(g * g))
    )
    return f / div, g / div


def effective_coefficients(sys: SdeSystem, env: GrowthEnvelope, cfg: AdaptiveConfig,
                           x) -> tuple[np.ndarray, np.ndarray]:
    """The drift/diffusion pair (F, G) actually used by the adaptive scheme.

    Outside the backstop region these are the raw coefficients; inside it
    they are the backstop's modified coefficients.
    """
    x = _check_state(x)
    if not is_backstop(env, cfg, x):
        return np.asarray(sys.drift(x), float), np.asarray(sys.diffusion(x), float)
    if cfg.backstop == TRUNCATED_EM:
        xt = truncate(env, cfg.delta_min, x)
        return np.asarray(sys.drift(xt), float), np.asarray(sys.diffusion(xt), float)
    if cfg.backstop == TAMED_MODEL2:
        return tame_model2(sys, cfg.delta_min, x)
    return tame_model1(sys, cfg.delta_min, x)
