"""Deterministic, refinable Brownian paths.

A :class:`BrownianPath` remembers the value of an m-dimensional Wiener
process at every time it has ever returned, so that adaptive schemes,
fixed-step schemes, reference solvers and closed-form evaluators can all
consume one consistent realization of the driving noise even though they
query it on different time grids.  Queries beyond the last stored knot
extend the path with a fresh Gaussian increment; queries between two
stored knots draw from the Brownian bridge conditional law.  Either way
the joint law of everything the path ever returns is exactly Wiener.

The randomness behind the value at time ``t`` is derived from the path
seed, the bit pattern of ``t`` and the component index with a
counter-based generator (SplitMix64 finalizer + inverse normal CDF), not
from a sequential stream.  Re-querying a time always returns the stored
value bitwise, and a path is fully determined by ``(seed, dimension,
query sequence)``.

One path must not be queried from two threads at once (single-writer
contract); distinct paths are completely independent.
"""

from __future__ import annotations

import math
import struct
from bisect import bisect_left

import numpy as np
from scipy.special import ndtri

from .errors import InvalidArgumentError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB

# Knots closer than this relative distance are treated as the same time,
# so a bridge interval can never have zero width.
_KNOT_MERGE_REL = 2.0**-52


def _mix64(z: int) -> int:
    """SplitMix64 finalizer: a bijective 64-bit mixing function."""
    z &= _MASK64
    z ^= z >> 30
    z = (z * _MIX_A) & _MASK64
    z ^= z >> 27
    z = (z * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, *words: int) -> int:
    """Fold integer ``words`` into ``seed`` and return a mixed 64-bit key.

    Used for per-path seeds (``derive_key(base, path_index)``) and for
    keying noise by time bits; collisions behave like collisions of a
    high-quality 64-bit hash.
    """
    h = _mix64((int(seed) + _GOLDEN) & _MASK64)
    for w in words:
        h = _mix64(((h ^ (int(w) & _MASK64)) + _GOLDEN) & _MASK64)
    return h


def _time_bits(t: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", t))[0]


def _uniform_from_u64(u: int) -> float:
    # 53 mantissa bits, strictly inside (0, 1)
    return (u >> 11) * 2.0**-53 + 2.0**-54


def counter_normals(key: int, counter: int, n: int) -> np.ndarray:
    """``n`` standard normals addressed by ``(key, counter)``.

    The draw is a pure function of its arguments, so callers may request
    counters in any order or from any worker and see identical values.
    """
    base = derive_key(key, counter)
    out = np.empty(n)
    for j in range(n):
        u = _mix64((base + (j + 1) * _GOLDEN) & _MASK64)
        out[j] = ndtri(_uniform_from_u64(u))
    return out


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= np.uint64(_MIX_A)
        z ^= z >> np.uint64(27)
        z *= np.uint64(_MIX_B)
        z ^= z >> np.uint64(31)
    return z


def _derive_array(seeds: np.ndarray, *words: int) -> np.ndarray:
    """Vectorized :func:`derive_key` over an array of seeds."""
    with np.errstate(over="ignore"):
        h = _mix64_array(seeds.astype(np.uint64) + np.uint64(_GOLDEN))
        for w in words:
            h = _mix64_array((h ^ np.uint64(int(w) & _MASK64)) + np.uint64(_GOLDEN))
    return h


def _normals_from_bases(bases: np.ndarray, n: int) -> np.ndarray:
    """Standard normals of shape ``(len(bases), n)`` from 64-bit base keys.

    Row ``i`` matches the scalar stream ``mix64(bases[i] + (j+1)*GOLDEN)``.
    """
    cols = []
    with np.errstate(over="ignore"):
        for j in range(n):
            cols.append(_mix64_array(bases + np.uint64(((j + 1) * _GOLDEN) & _MASK64)))
    u64 = np.stack(cols, axis=1)
    uni = (u64 >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54
    return ndtri(uni)


def batch_counter_normals(keys: np.ndarray, counter: int, n: int) -> np.ndarray:
    """Vectorized :func:`counter_normals` over an array of path keys.

    Returns shape ``(len(keys), n)``; row ``i`` equals
    ``counter_normals(keys[i], counter, n)`` bitwise.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    return _normals_from_bases(_derive_array(keys, int(counter)), n)


class BrownianPath:
    """One refinable realization of an m-dimensional Wiener process.

    Parameters
    ----------
    seed : int
        Deterministic seed material; two paths with equal seeds and
        dimensions return identical values for identical query sequences.
    dimension : int
        Number of independent components m (>= 1).
    """

    __slots__ = ("dimension", "_key", "_times", "_values")

    def __init__(self, seed: int, dimension: int):
        if not isinstance(dimension, (int, np.integer)) or dimension < 1:
            raise InvalidArgumentError(f"dimension must be a positive int, got {dimension!r}")
        self.dimension = int(dimension)
        self._key = derive_key(int(seed))
        zero = np.zeros(self.dimension)
        zero.setflags(write=False)
        self._times: list[float] = [0.0]
        self._values: list[np.ndarray] = [zero]

    @classmethod
    def from_knots(cls, seed: int, dimension: int, times, values) -> "BrownianPath":
        """Rebuild a path pre-seeded with knots from :meth:`snapshot`.

        ``seed`` must be the one that produced the knots; later queries
        then refine the same underlying realization.
        """
        path = cls(seed, dimension)
        times = [float(t) for t in times]
        if not times or times[0] != 0.0:
            raise InvalidArgumentError("knot snapshot must start at t=0")
        vals = []
        for v in np.asarray(values, dtype=float):
            v = np.array(v, dtype=float)
            v.setflags(write=False)
            vals.append(v)
        path._times = times
        path._values = vals
        return path

    def snapshot(self) -> tuple[list[float], np.ndarray]:
        """Return ``(times, values)`` of all stored knots."""
        return list(self._times), np.array(self._values)

    @property
    def last_time(self) -> float:
        return self._times[-1]

    @property
    def knot_count(self) -> int:
        return len(self._times)

    # -- sampling ---------------------------------------------------------

    def _noise(self, t: float) -> np.ndarray:
        base = derive_key(self._key, _time_bits(t))
        out = np.empty(self.dimension)
        for j in range(self.dimension):
            u = _mix64((base + (j + 1) * _GOLDEN) & _MASK64)
            out[j] = ndtri(_uniform_from_u64(u))
        return out

    def _match_index(self, t: float, i: int) -> int:
        """Index of a stored knot indistinguishable from ``t``, else -1."""
        times = self._times
        n = len(times)
        for k in (i, i - 1):
            if 0 <= k < n:
                tk = times[k]
                if t == tk or abs(t - tk) < _KNOT_MERGE_REL * max(abs(t), abs(tk)):
                    return k
        return -1

    def value_at(self, t: float) -> np.ndarray:
        """W(t), sampling and storing a new knot if needed.

        The returned array is read-only (it is the cached knot).

        Raises
        ------
        InvalidArgumentError
            If ``t`` is negative or not finite.
        """
        t = float(t)
        if not math.isfinite(t) or t < 0.0:
            raise InvalidArgumentError(f"time must be finite and >= 0, got {t!r}")
        times = self._times
        i = bisect_left(times, t)
        k = self._match_index(t, i)
        if k >= 0:
            return self._values[k]
        if i == len(times):
            # extend beyond the last knot
            a = times[-1]
            w = self._values[-1] + math.sqrt(t - a) * self._noise(t)
        else:
            # bridge between neighbours times[i-1] < t < times[i]
            a, b = times[i - 1], times[i]
            wa, wb = self._values[i - 1], self._values[i]
            frac = (t - a) / (b - a)
            sd = math.sqrt((t - a) * (b - t) / (b - a))
            w = wa + frac * (wb - wa) + sd * self._noise(t)
        w.setflags(write=False)
        times.insert(i, t)
        self._values.insert(i, w)
        return w

    def increment(self, s: float, t: float) -> np.ndarray:
        """W(t) - W(s) componentwise, for 0 <= s <= t."""
        s = float(s)
        t = float(t)
        if not (math.isfinite(s) and math.isfinite(t)):
            raise InvalidArgumentError("increment endpoints must be finite")
        if s < 0.0 or s > t:
            raise InvalidArgumentError(f"need 0 <= s <= t, got s={s!r}, t={t!r}")
        ws = self.value_at(s)
        return self.value_at(t) - ws

    def values_on_grid(self, times) -> np.ndarray:
        """W at strictly increasing times, as a read-only ``(n, m)`` array.

        When the whole grid lies beyond the last knot the samples are
        generated in one vectorized pass; otherwise it falls back to
        point-by-point refinement.
        """
        ts = np.asarray(times, dtype=float)
        if ts.ndim != 1 or ts.size == 0:
            raise InvalidArgumentError("grid must be a non-empty 1-d array")
        if not np.all(np.isfinite(ts)) or ts[0] < 0.0:
            raise InvalidArgumentError("grid times must be finite and >= 0")
        if np.any(np.diff(ts) <= 0.0):
            raise InvalidArgumentError("grid times must be strictly increasing")
        if ts[0] > self.last_time:
            return self._extend_grid(ts)
        out = np.array([self.value_at(t) for t in ts])
        out.setflags(write=False)
        return out

    def _extend_grid(self, ts: np.ndarray) -> np.ndarray:
        a = self._times[-1]
        wa = self._values[-1]
        ts = np.ascontiguousarray(ts)
        tbits = ts.view(np.uint64)
        # per-time base keys, matching the scalar chain derive_key(key, bits(t))
        with np.errstate(over="ignore"):
            h = _mix64_array(np.full(ts.size, self._key, dtype=np.uint64) + np.uint64(_GOLDEN))
            h = _mix64_array((h ^ tbits) + np.uint64(_GOLDEN))
        xi = _normals_from_bases(h, self.dimension)
        dts = np.diff(ts, prepend=a)
        w = wa + np.cumsum(np.sqrt(dts)[:, None] * xi, axis=0)
        w.setflags(write=False)
        for t, row in zip(ts.tolist(), w):
            self._times.append(t)
            self._values.append(row)
        return w
