"""Counter-based random streams.

Every draw is a pure function of ``(master_seed, stream_id, lane, counter)``:
the 64-bit key is derived by SplitMix64 finalisation and the output word is a
double-mixed hash of ``key + counter * golden``.  Nothing is sequential across
streams, so paths can be simulated in any order or on any number of workers
and still see the same numbers.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SEED_SALT = np.uint64(0x5851F42D4C957F2D)
_LANE_SALT = np.uint64(0xD6E8FEB86659FD93)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO53_INV = 1.0 / 9007199254740992.0

# lanes used by the path simulator; one counter sequence per purpose
LANE_SUBORDINATOR = 0
LANE_BROWNIAN = 1
LANE_NOISE = 2

_MASK64 = (1 << 64) - 1


@numba.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@numba.njit(cache=True)
def derive_key(seed, stream_id, lane):
    """64-bit key of lane ``lane`` of stream ``stream_id`` under ``seed``."""
    k = mix64(seed ^ _SEED_SALT)
    k = mix64(k + stream_id * _GOLDEN)
    return mix64(k ^ ((lane + np.uint64(1)) * _LANE_SALT))


@numba.njit(cache=True, inline="always")
def bits64(key, ctr):
    return mix64(mix64(key + ctr * _GOLDEN) ^ key)


@numba.njit(cache=True, inline="always")
def uniform_at(key, ctr):
    """Uniform on the open interval (0, 1)."""
    return ((bits64(key, ctr) >> _S11) + 0.5) * _TWO53_INV


@numba.njit(cache=True, inline="always")
def exponential_at(key, ctr):
    return -math.log(uniform_at(key, ctr))


@numba.njit(cache=True, inline="always")
def normal_at(key, ctr):
    # Box-Muller, cosine branch only; consumes counters ctr and ctr + 1
    r = math.sqrt(-2.0 * math.log(uniform_at(key, ctr)))
    return r * math.cos(2.0 * math.pi * uniform_at(key, ctr + np.uint64(1)))


@numba.njit(cache=True)
def _fill_uniform(key, ctr, out):
    for i in range(out.size):
        out[i] = uniform_at(key, ctr + np.uint64(i))
    return ctr + np.uint64(out.size)


@numba.njit(cache=True)
def _fill_normal(key, ctr, out):
    for i in range(out.size):
        out[i] = normal_at(key, ctr)
        ctr += np.uint64(2)
    return ctr


def _u64(value: int) -> np.uint64:
    value = int(value)
    if value < 0 or value > _MASK64:
        raise ValueError(f"{value} does not fit in an unsigned 64-bit integer")
    return np.uint64(value)


class RandomStream:
    """A reproducible stream of uniforms identified by ``(master_seed, stream_id)``.

    ``lane`` selects an independent sub-sequence of the same stream; the
    path simulator keeps the subordinator, Brownian and jump draws on
    separate lanes so that the order in which they are consumed does not
    matter.  A stream is single-owner: it carries a mutable counter.
    """

    def __init__(self, master_seed: int, stream_id: int = 0, lane: int = 0):
        self.master_seed = int(master_seed)
        self.stream_id = int(stream_id)
        self.lane = int(lane)
        self.key = np.uint64(derive_key(_u64(master_seed), _u64(stream_id), _u64(lane)))
        self.counter = 0

    @property
    def counter(self):
        return self._counter

    @counter.setter
    def counter(self, value):
        # numba returns uint64 as a Python int; keep the numba signature uint64
        self._counter = np.uint64(value)

    def substream(self, lane: int) -> "RandomStream":
        return RandomStream(self.master_seed, self.stream_id, lane)

    def __repr__(self):
        return (f"RandomStream(master_seed={self.master_seed}, "
                f"stream_id={self.stream_id}, lane={self.lane}, "
                f"counter={int(self.counter)})")

    def _shape(self, size):
        if size is None:
            return 1, True
        return int(np.prod(size)), False

    def uniform(self, size=None):
        n, scalar = self._shape(size)
        out = np.empty(n)
        self.counter = _fill_uniform(self.key, self.counter, out)
        return float(out[0]) if scalar else out.reshape(size)

    def normal(self, size=None):
        n, scalar = self._shape(size)
        out = np.empty(n)
        self.counter = _fill_normal(self.key, self.counter, out)
        return float(out[0]) if scalar else out.reshape(size)

    def exponential(self, size=None):
        u = self.uniform(size)
        return -np.log(u)
