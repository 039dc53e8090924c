"""Subordinator paths, their inverses, the coupled jump SDE and X(t) = Y-(S(t)).

Every path i draws from three lanes of the stream ``(seed, i)``: the
subordinator increments, the Brownian increments (step j always uses
counters 2j and 2j + 1) and the jump noise.  The Monte Carlo driver runs a
fused compiled kernel over blocks of paths; blocks write disjoint rows, so
the sample matrix does not depend on how many threads ran them.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .errors import ContractError, NumericalFailure, PathFailure, RangeError, ResourceError
from .exprparse import CoefficientField, compile_numba, constant_value
from .levy import JumpNoiseSpec, SubordinatorSpec
from .rng import (LANE_BROWNIAN, LANE_NOISE, LANE_SUBORDINATOR, RandomStream,
                  derive_key, normal_at)
from .sampling import SUB_IDENTITY, noise_code, noise_step, subordinator_code, subordinator_step

MAX_STEPS = 100_000_000
MAX_FAILURE_FRACTION = 0.01
BLOCK_PATHS = 512

OK, NONFINITE, NEGATIVE_SIGMA, STEP_CAP = 0, 1, 2, 3


@dataclass(frozen=True)
class SubordinatorPath:
    """T_j = T(j * dgamma), j = 0..m, with T_0 = 0 and T_m above the horizon."""

    dgamma: float
    values: np.ndarray

    @property
    def increments(self):
        return np.diff(self.values)

    @property
    def gamma(self):
        return np.arange(self.values.size) * self.dgamma


@dataclass(frozen=True)
class CoupledPath:
    """(Y_j, Z_j) on the shared gamma-grid; ``y_left[j]`` is Y just before step j."""

    dgamma: float
    y: np.ndarray
    z: np.ndarray

    @property
    def y_left(self):
        out = np.empty_like(self.y)
        out[0] = self.y[0]
        out[1:] = self.y[:-1]
        return out


@dataclass(frozen=True)
class TimeChangedSample:
    times: np.ndarray
    values: np.ndarray


@dataclass
class MonteCarloResult:
    """Samples X(t_k) per path (failed paths removed) and the matching S(t_k)."""

    times: np.ndarray
    samples: np.ndarray
    inverse: np.ndarray
    n_requested: int
    failed: np.ndarray          # indices of dropped paths

    @property
    def n_failed(self):
        return int(self.failed.size)


# ---------------------------------------------------------------------------
# subordinator


@numba.njit(cache=True)
def _sub_chunk(key, ctr, code, params, start, out):
    t = start
    for j in range(out.size):
        dt, ctr = subordinator_step(key, ctr, code, params)
        t += dt
        out[j] = t
    return ctr


def sample_subordinator_path(spec: SubordinatorSpec, dgamma: float, horizon_t: float,
                             rng: RandomStream, max_steps: int = MAX_STEPS) -> SubordinatorPath:
    """Sample T on the gamma-grid until it first exceeds ``horizon_t``."""
    if not dgamma > 0:
        raise ContractError("dgamma must be positive")
    code, params = subordinator_code(spec, dgamma)
    if spec.is_identity:
        m = int(math.floor(horizon_t / dgamma)) + 1
        if m > max_steps:
            raise ResourceError(f"{m} steps exceed the cap of {max_steps}; enlarge dgamma")
        return SubordinatorPath(dgamma, np.arange(m + 1) * (dgamma * spec.drift))
    chunks = [np.zeros(1)]
    last, total = 0.0, 0
    size = 4096
    while last <= horizon_t:
        if total + size > max_steps:
            raise ResourceError(f"subordinator did not pass t={horizon_t} within {max_steps} steps")
        buf = np.empty(size)
        rng.counter = _sub_chunk(rng.key, rng.counter, code, params, last, buf)
        if not np.all(np.isfinite(buf)):
            raise NumericalFailure("subordinator sampler returned a non-finite increment")
        chunks.append(buf)
        total += size
        last = buf[-1]
        size = min(2 * size, 1 << 20)
    values = np.concatenate(chunks)
    # keep the path up to the first value above the horizon
    m = int(np.searchsorted(values, horizon_t, side="right"))
    return SubordinatorPath(dgamma, values[: m + 1])


def _first_passage_index(values, t):
    t = np.asarray(t, dtype=float)
    j = np.searchsorted(values, t, side="right")
    if np.any(j >= values.size):
        raise RangeError(f"t={float(np.max(t))} lies beyond the path horizon "
                         f"{values[-1]}; sample a longer path")
    if np.any(t < 0):
        raise RangeError("physical time must be nonnegative")
    return j


def inverse_subordinator(path: SubordinatorPath, t):
    """S(t) = dgamma * min{j : T_j > t}."""
    j = _first_passage_index(path.values, t)
    out = j * path.dgamma
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# compiled kernels, one set per coefficient triple


def _flags(coeffs: CoefficientField):
    sig = constant_value(coeffs.sigma)
    h = constant_value(coeffs.h)
    f = constant_value(coeffs.F)
    return (f == 0.0, sig == 0.0, h == 0.0)


_KERNELS: dict = {}


def _kernels(coeffs: CoefficientField):
    key = coeffs.strings()
    hit = _KERNELS.get(key)
    if hit is not None:
        return hit
    F, S, H = coeffs.compiled()
    no_f, no_sigma, no_h = _flags(coeffs)

    @numba.njit(inline="always")
    def step(y, z, dg, sdg, kb, j, kn, cn, ncode, nparams):
        """One Euler step from (y, z); returns (y_new, noise counter, status)."""
        inc = 0.0
        if not no_f:
            inc += F(y, z) * dg
        if not no_sigma:
            s = S(y, z)
            if s < 0.0:
                return y, cn, NEGATIVE_SIGMA
            inc += s * (sdg * normal_at(kb, np.uint64(2 * j)))
        if not no_h:
            dl, cn = noise_step(kn, cn, ncode, nparams, dg)
            inc += H(y, z) * dl
        y = y + inc
        if not math.isfinite(y):
            return y, cn, NONFINITE
        return y, cn, OK

    @numba.njit(nogil=True)
    def mc_block(seed, lo, hi, scode, sparams, ncode, nparams, dg, times, max_steps,
                 out_x, out_s, status):
        sdg = math.sqrt(dg)
        nt = times.size
        for i in range(lo, hi):
            sid = np.uint64(i)
            ks = derive_key(seed, sid, np.uint64(LANE_SUBORDINATOR))
            kb = derive_key(seed, sid, np.uint64(LANE_BROWNIAN))
            kn = derive_key(seed, sid, np.uint64(LANE_NOISE))
            cs = np.uint64(0)
            cn = np.uint64(0)
            y = 0.0
            z = 0.0
            k = 0
            st = OK
            j = 0
            while True:
                if scode == SUB_IDENTITY:
                    zn = (j + 1) * sparams[3]
                else:
                    dz, cs = subordinator_step(ks, cs, scode, sparams)
                    zn = z + dz
                if not math.isfinite(zn):
                    st = NONFINITE
                    break
                # every observation time passed by this step sees Y_j
                while k < nt and zn > times[k]:
                    out_x[i - lo, k] = y
                    out_s[i - lo, k] = (j + 1) * dg
                    k += 1
                if k == nt:
                    break
                if j + 1 >= max_steps:
                    st = STEP_CAP
                    break
                y, cn, st = step(y, z, dg, sdg, kb, j, kn, cn, ncode, nparams)
                if st != OK:
                    break
                z = zn
                j += 1
            status[i - lo] = st
            if st != OK:
                for kk in range(k, nt):
                    out_x[i - lo, kk] = math.nan
                    out_s[i - lo, kk] = math.nan

    @numba.njit
    def integrate(z_values, dg, kb, kn, ncode, nparams, y_out):
        sdg = math.sqrt(dg)
        cn = np.uint64(0)
        y = 0.0
        y_out[0] = y
        for j in range(z_values.size - 1):
            y, cn, st = step(y, z_values[j], dg, sdg, kb, j, kn, cn, ncode, nparams)
            y_out[j + 1] = y
            if st != OK:
                return st, j
        return OK, -1

    hit = (mc_block, integrate)
    _KERNELS[key] = hit
    return hit


def _noise(noise: Optional[JumpNoiseSpec], dg, eps):
    code, params = noise_code(noise, dg, eps)
    return code, np.asarray(params, dtype=float)


def integrate_jump_sde(coeffs: CoefficientField, sub_path: SubordinatorPath,
                       noise: Optional[JumpNoiseSpec], rng: RandomStream,
                       eps: Optional[float] = None) -> CoupledPath:
    """Euler-Maruyama for Y on the subordinator's gamma-grid.

    Brownian and jump increments come from lanes 1 and 2 of ``rng``'s stream.
    Coefficients are evaluated at the pre-step state (Y_j, Z_j).
    """
    dg = sub_path.dgamma
    _, integrate = _kernels(coeffs)
    ncode, nparams = _noise(noise, dg, eps)
    kb = rng.substream(LANE_BROWNIAN).key
    kn = rng.substream(LANE_NOISE).key
    y = np.empty(sub_path.values.size)
    st, j = integrate(sub_path.values, dg, kb, kn, ncode, nparams, y)
    if st == NEGATIVE_SIGMA:
        raise ContractError(f"sigma(x, t) < 0 at step {j}")
    if st != OK:
        raise PathFailure(f"non-finite state at step {j}", step=int(j))
    return CoupledPath(dg, y, sub_path.values.copy())


def time_change_evaluate(cp: CoupledPath, sp: SubordinatorPath, times) -> TimeChangedSample:
    """X(t_k) = Y at index j* - 1 where j* = min{j : T_j > t_k}."""
    times = np.asarray(times, dtype=float)
    j = _first_passage_index(sp.values, times)
    return TimeChangedSample(times, cp.y[j - 1])


# ---------------------------------------------------------------------------
# Monte Carlo driver


def default_threads():
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def run_monte_carlo(subordinator: SubordinatorSpec, noise: Optional[JumpNoiseSpec],
                    coeffs: CoefficientField, times, n_paths: int, seed: int,
                    dgamma: float = 1e-3, threads: int = 1, eps: Optional[float] = None,
                    max_steps: int = MAX_STEPS) -> MonteCarloResult:
    """Simulate ``n_paths`` paths of X at ``times``; path i uses stream_id i.

    Paths that hit a non-finite state are dropped and listed in ``failed``;
    more than 1% failures raise :class:`NumericalFailure`.  A negative sigma
    is a contract error and aborts immediately.
    """
    if n_paths < 1:
        raise ContractError("need at least one path")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ContractError("observation times must be nonnegative and strictly increasing")
    scode, sparams = subordinator_code(subordinator, dgamma)
    sparams = np.asarray(sparams, dtype=float)
    ncode, nparams = _noise(noise, dgamma, eps)
    mc_block, _ = _kernels(coeffs)
    out_x = np.empty((n_paths, times.size))
    out_s = np.empty((n_paths, times.size))
    status = np.empty(n_paths, dtype=np.int64)
    seed64 = np.uint64(int(seed))

    def run(lo):
        hi = min(lo + BLOCK_PATHS, n_paths)
        mc_block(seed64, lo, hi, scode, sparams, ncode, nparams, float(dgamma), times,
                 int(max_steps), out_x[lo:hi], out_s[lo:hi], status[lo:hi])

    starts = range(0, n_paths, BLOCK_PATHS)
    if threads <= 1:
        for lo in starts:
            run(lo)
    else:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            list(pool.map(run, starts))

    if np.any(status == NEGATIVE_SIGMA):
        i = int(np.argmax(status == NEGATIVE_SIGMA))
        raise ContractError(f"sigma(x, t) < 0 on path {i}")
    if np.any(status == STEP_CAP):
        raise ResourceError(f"a path needed more than {max_steps} gamma-steps; enlarge dgamma")
    failed = np.flatnonzero(status != OK)
    if failed.size > MAX_FAILURE_FRACTION * n_paths:
        raise NumericalFailure(
            f"{failed.size} of {n_paths} paths produced non-finite states "
            f"(limit {MAX_FAILURE_FRACTION:.0%}); check the coefficients")
    keep = status == OK
    return MonteCarloResult(times, out_x[keep], out_s[keep], n_paths, failed)


def simulate_single_path(subordinator, noise, coeffs, times, seed, stream_id=0,
                         dgamma=1e-3, eps=None):
    """The non-fused reference pipeline for one path; agrees with run_monte_carlo."""
    times = np.asarray(times, dtype=float)
    rng = RandomStream(seed, stream_id, LANE_SUBORDINATOR)
    sp = sample_subordinator_path(subordinator, dgamma, float(times.max()), rng)
    cp = integrate_jump_sde(coeffs, sp, noise, rng, eps)
    return time_change_evaluate(cp, sp, times), sp, cp
