"""Counter-based latent draws.

Every uniform in a run is a pure function of ``(seed, id, t, tag, index)``.
There is no sequential generator state, so results do not depend on how the
population is split between workers, and two runs that share a seed see the
same randomness for the same individual, step and consumer.

The mixing function is the SplitMix64 finalizer applied twice: once to bind
the individual id to the (seed, tag) key and once to bind the step/index
counter.
"""

from __future__ import annotations

import hashlib
import threading
import weakref
from dataclasses import dataclass
from typing import Union

import numba
import numpy as np
from scipy.special import ndtri

MASK64 = (1 << 64) - 1
_STEP_MUL = 0xD1B54A32D192ED03
_INDEX_MUL = 0xAEF17502108EF2D9
_SEED_SALT = 0x5851F42D4C957F2D
# reserved individual id for draws that belong to an event rather than a row
EVENT_ID = MASK64
_TO_UNIT = 1.0 / 9007199254740992.0  # 2**-53


def _mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def tag_hash(tag: str) -> int:
    """Stable 64-bit hash of a consumer tag (independent of PYTHONHASHSEED)."""
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


def _keys(seed: int, t: int, tag: str, index: int) -> tuple[int, int]:
    key = _mix64(_mix64((seed & MASK64) ^ _SEED_SALT) ^ tag_hash(tag))
    tkey = _mix64(_mix64(key ^ (((t & MASK64) * _STEP_MUL) & MASK64)) + ((index & MASK64) * _INDEX_MUL))
    return key, tkey & MASK64


@numba.njit(inline="always")
def _nb_mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, nogil=True)
def _bits_kernel(ids, key, tkey, out):
    for i in range(ids.shape[0]):
        out[i] = _nb_mix64(_nb_mix64(ids[i] ^ key) + tkey)


@numba.njit(cache=True, nogil=True)
def _uniform_kernel(ids, key, tkey, out):
    for i in range(ids.shape[0]):
        h = _nb_mix64(_nb_mix64(ids[i] ^ key) + tkey)
        out[i] = np.float64(h >> np.uint64(11)) * 1.1102230246251565e-16


@numba.njit(cache=True, nogil=True)
def _below_kernel(ids, key, tkey, bound, out_idx, out_u):
    k = 0
    for i in range(ids.shape[0]):
        h = _nb_mix64(_nb_mix64(ids[i] ^ key) + tkey)
        u = np.float64(h >> np.uint64(11)) * 1.1102230246251565e-16
        if u < bound:
            out_idx[k] = i
            out_u[k] = u
            k += 1
    return k


@numba.njit(cache=True, nogil=True)
def _prefix_kernel(ids, key, out):
    for i in range(ids.shape[0]):
        out[i] = _nb_mix64(ids[i] ^ key)


@numba.njit(cache=True, nogil=True)
def _uniform_from_prefix(pre, tkey, out):
    for i in range(pre.shape[0]):
        h = _nb_mix64(pre[i] + tkey)
        out[i] = np.float64(h >> np.uint64(11)) * 1.1102230246251565e-16


@numba.njit(cache=True, nogil=True)
def _below_from_prefix(pre, tkey, bound, out_idx, out_u):
    k = 0
    for i in range(pre.shape[0]):
        h = _nb_mix64(pre[i] + tkey)
        u = np.float64(h >> np.uint64(11)) * 1.1102230246251565e-16
        if u < bound:
            out_idx[k] = i
            out_u[k] = u
            k += 1
    return k


def bits64(seed: int, ids, t: int, tag: str, index: int = 0) -> np.ndarray:
    """Raw 64-bit outputs for each id."""
    ids = np.ascontiguousarray(ids, dtype=np.uint64)
    key, tkey = _keys(seed, t, tag, index)
    out = np.empty(ids.shape[0], dtype=np.uint64)
    _bits_kernel(ids, np.uint64(key), np.uint64(tkey), out)
    return out


def uniform_draws(seed: int, ids, t: int, tag: str, index: int = 0) -> np.ndarray:
    """Uniforms in [0, 1) for every id at step ``t``; 53-bit resolution."""
    ids = np.ascontiguousarray(ids, dtype=np.uint64)
    key, tkey = _keys(seed, t, tag, index)
    out = np.empty(ids.shape[0], dtype=np.float64)
    _uniform_kernel(ids, np.uint64(key), np.uint64(tkey), out)
    return out


def draws_below(seed: int, ids, t: int, tag: str, bound: float, index: int = 0):
    """Positions and values of the draws that fall below ``bound``.

    Equal to filtering :func:`uniform_draws`, without materialising every draw.
    """
    ids = np.ascontiguousarray(ids, dtype=np.uint64)
    key, tkey = _keys(seed, t, tag, index)
    out_idx = np.empty(ids.shape[0], dtype=np.intp)
    out_u = np.empty(ids.shape[0], dtype=np.float64)
    k = _below_kernel(ids, np.uint64(key), np.uint64(tkey), float(bound), out_idx, out_u)
    return out_idx[:k].copy(), out_u[:k].copy()


def uniform_draw(seed: int, id: int, t: int, tag: str, index: int = 0) -> float:
    """Scalar reference path; bit-identical to :func:`uniform_draws`."""
    key, tkey = _keys(seed, t, tag, index)
    h = _mix64(_mix64((id & MASK64) ^ key) + tkey)
    return (h >> 11) * _TO_UNIT


class LatentDraws:
    """The run's randomness, addressed by (id, t, tag, index).

    Subclass and override :meth:`uniform` to force draws in tests.

    The id-dependent half of the hash does not depend on the step, so for
    large read-only id columns (population ids) it is cached per tag.
    """

    CACHE_MIN = 4096
    CACHE_SIZE = 64

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._cache: dict = {}
        self._lock = threading.Lock()

    def _prefix(self, ids: np.ndarray, key: int):
        if ids.shape[0] < self.CACHE_MIN or ids.flags.writeable:
            return None
        ck = (key, id(ids))
        with self._lock:
            hit = self._cache.get(ck)
            if hit is not None and hit[0]() is ids:
                return hit[1]
        pre = np.empty(ids.shape[0], dtype=np.uint64)
        _prefix_kernel(ids, np.uint64(key), pre)
        with self._lock:
            if len(self._cache) >= self.CACHE_SIZE:
                self._cache = {k: v for k, v in self._cache.items() if v[0]() is not None}
                while len(self._cache) >= self.CACHE_SIZE:
                    self._cache.pop(next(iter(self._cache)))
            self._cache[ck] = (weakref.ref(ids), pre)
        return pre

    def _draws(self, ids, t, tag, index):
        ids = np.ascontiguousarray(ids, dtype=np.uint64)
        key, tkey = _keys(self.seed, t, tag, index)
        return ids, key, tkey, self._prefix(ids, key)

    def uniform(self, ids, t: int, tag: str, index: int = 0) -> np.ndarray:
        ids, key, tkey, pre = self._draws(ids, t, tag, index)
        out = np.empty(ids.shape[0], dtype=np.float64)
        if pre is None:
            _uniform_kernel(ids, np.uint64(key), np.uint64(tkey), out)
        else:
            _uniform_from_prefix(pre, np.uint64(tkey), out)
        return out

    def below(self, ids, t: int, tag: str, bound: float, index: int = 0):
        """(positions, draws) of the ids whose draw is < ``bound``."""
        if type(self).uniform is not LatentDraws.uniform:
            u = self.uniform(ids, t, tag, index)
            idx = np.flatnonzero(u < bound)
            return idx, u[idx]
        ids, key, tkey, pre = self._draws(ids, t, tag, index)
        out_idx = np.empty(ids.shape[0], dtype=np.intp)
        out_u = np.empty(ids.shape[0], dtype=np.float64)
        if pre is None:
            k = _below_kernel(ids, np.uint64(key), np.uint64(tkey), float(bound), out_idx, out_u)
        else:
            k = _below_from_prefix(pre, np.uint64(tkey), float(bound), out_idx, out_u)
        return out_idx[:k].copy(), out_u[:k].copy()

    def view(self, ids, t: int, tag: str) -> "DrawView":
        return DrawView(self, np.asarray(ids, dtype=np.uint64), t, tag)

    def __getstate__(self):
        state = dict(self.__dict__)
        del state["_cache"], state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._cache = {}
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(seed={self.seed})"


class ConstantDraws(LatentDraws):
    """Every draw equals ``value`` (or ``values[id]`` when a mapping is given)."""

    def __init__(self, value: float = 0.0, values: dict | None = None, seed: int = 0):
        super().__init__(seed)
        self.value = float(value)
        self.values = dict(values or {})

    def uniform(self, ids, t, tag, index=0):
        ids = np.asarray(ids, dtype=np.uint64)
        out = np.full(ids.shape[0], self.value)
        if self.values:
            for i, ident in enumerate(ids.tolist()):
                if ident in self.values:
                    out[i] = self.values[ident]
        return out


@dataclass(frozen=True)
class DrawView:
    """Draws bound to one consumer tag, one step and a block of ids."""

    source: LatentDraws
    ids: np.ndarray
    t: int
    tag: str

    def uniform(self, index: int = 0) -> np.ndarray:
        return self.source.uniform(self.ids, self.t, self.tag, index)

    def below(self, bound: float, index: int = 0):
        return self.source.below(self.ids, self.t, self.tag, bound, index)

    def event_uniform(self, index: int = 0) -> float:
        """A draw owned by the consumer itself rather than by any row."""
        return float(self.source.uniform(np.array([EVENT_ID], dtype=np.uint64), self.t, self.tag, index)[0])

    def subset(self, idx) -> "DrawView":
        return DrawView(self.source, self.ids[idx], self.t, self.tag)

    def retag(self, tag: str) -> "DrawView":
        return DrawView(self.source, self.ids, self.t, tag)


# -- inverse-CDF transforms ------------------------------------------------

@dataclass(frozen=True)
class Bernoulli:
    p: float

    def ppf(self, u):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"bernoulli p must lie in [0, 1], got {self.p}")
        return (np.asarray(u) < self.p).astype(np.float64)


@dataclass(frozen=True)
class Exponential:
    rate: float

    def ppf(self, u):
        if self.rate <= 0:
            raise ValueError(f"exponential rate must be > 0, got {self.rate}")
        return -np.log1p(-np.asarray(u, dtype=np.float64)) / self.rate


@dataclass(frozen=True)
class Normal:
    mu: float = 0.0
    sigma: float = 1.0

    def ppf(self, u):
        if self.sigma < 0:
            raise ValueError(f"normal sigma must be >= 0, got {self.sigma}")
        return self.mu + self.sigma * ndtri(np.asarray(u, dtype=np.float64))


@dataclass(frozen=True)
class Weibull:
    """F(x) = 1 - exp(-(x / scale) ** shape)."""

    shape: float
    scale: float

    def ppf(self, u):
        if self.shape <= 0 or self.scale <= 0:
            raise ValueError(f"weibull needs shape > 0 and scale > 0, got ({self.shape}, {self.scale})")
        return self.scale * (-np.log1p(-np.asarray(u, dtype=np.float64))) ** (1.0 / self.shape)

    def cdf(self, x):
        if self.shape <= 0 or self.scale <= 0:
            raise ValueError(f"weibull needs shape > 0 and scale > 0, got ({self.shape}, {self.scale})")
        x = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
        return -np.expm1(-((x / self.scale) ** self.shape))


Distribution = Union[Bernoulli, Exponential, Normal, Weibull]


def draw_transform(u, dist: Distribution):
    """Map uniform(s) ``u`` through the inverse CDF of ``dist``."""
    out = dist.ppf(u)
    if np.ndim(out) == 0:
        return float(out)
    return out
