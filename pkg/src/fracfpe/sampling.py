"""Exact and approximate samplers for subordinator and noise increments.

The scalar kernels are numba functions of ``(key, counter, ...)`` returning
``(value, new_counter)`` so that the fused path simulator and the Python
wrappers consume the counter-based streams identically.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import DomainError, NumericalFailure, ResourceError
from .levy import (
    JumpNoiseSpec, LevyMeasureSpec, SubordinatorSpec,
    ONE_SIDED_STABLE, TEMPERED_STABLE, SYMMETRIC_STABLE, TRUNCATED_SYMMETRIC_STABLE,
)
from .rng import RandomStream, exponential_at, normal_at, uniform_at

_ONE = np.uint64(1)
_TWO = np.uint64(2)

MAX_REJECTIONS = 1_000_000
MAX_JUMPS_PER_DRAW = 10_000_000

# family codes understood by the compiled kernels
SUB_IDENTITY = 0
SUB_STABLE = 1
SUB_TEMPERED = 2

NOISE_NONE = 0
NOISE_SYMMETRIC_STABLE = 1
NOISE_TRUNCATED = 2
NOISE_ONE_SIDED = 3
NOISE_TEMPERED = 4


@numba.njit(cache=True, inline="always")
def _pow(x, e):
    # integer exponents (alpha = 1/2, 1/3, ...) avoid the libm pow call
    if e == 1.0:
        return x
    if e == math.floor(e) and e <= 8.0:
        r = 1.0
        for _ in range(int(e)):
            r *= x
        return r
    return x ** e


@numba.njit(cache=True)
def kanter_draw(key, ctr, alpha, scale):
    """Totally skewed stable draw with E exp(-u T) = exp(-dt u**alpha).

    ``scale`` is dt**(1/alpha), hoisted out by the caller.
    """
    u = uniform_at(key, ctr)
    w = exponential_at(key, ctr + _ONE)
    pu = math.pi * u
    s = math.sin(pu)
    # Kanter: A(u) / w with A = sin((1-a)pu) sin(a pu)**(a/(1-a)) / sin(pu)**(1/(1-a))
    r = math.sin((1.0 - alpha) * pu) / (s * w) * _pow(math.sin(alpha * pu) / s, alpha / (1.0 - alpha))
    return scale * _pow(r, (1.0 - alpha) / alpha), ctr + _TWO


@numba.njit(cache=True)
def tempered_draw(key, ctr, alpha, lam, scale):
    """Exponentially tilted stable draw by rejection; NaN after too many tries."""
    for _ in range(MAX_REJECTIONS):
        x, ctr = kanter_draw(key, ctr, alpha, scale)
        v = uniform_at(key, ctr)
        ctr += _ONE
        if v <= math.exp(-lam * x):
            return x, ctr
    return math.nan, ctr


@numba.njit(cache=True)
def symmetric_stable_draw(key, ctr, alpha, scale):
    """Chambers-Mallows-Stuck symmetric draw with E exp(iuL) = exp(-dt |u|**alpha)."""
    v = math.pi * (uniform_at(key, ctr) - 0.5)
    w = exponential_at(key, ctr + _ONE)
    if alpha == 1.0:
        x = math.tan(v)
    else:
        x = (math.sin(alpha * v) / math.cos(v) ** (1.0 / alpha)
             * (math.cos((1.0 - alpha) * v) / w) ** ((1.0 - alpha) / alpha))
    return scale * x, ctr + _TWO


@numba.njit(cache=True)
def poisson_draw(key, ctr, mean):
    """Poisson variate: inversion for small means, PTRS (Hoermann 1993) otherwise."""
    if mean <= 0.0:
        return 0, ctr
    if mean < 10.0:
        u = uniform_at(key, ctr)
        ctr += _ONE
        k = 0
        p = math.exp(-mean)
        cdf = p
        while u > cdf and k < 100000:
            k += 1
            p *= mean / k
            cdf += p
        return k, ctr
    slam = math.sqrt(mean)
    loglam = math.log(mean)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    while True:
        u = uniform_at(key, ctr) - 0.5
        v = uniform_at(key, ctr + _ONE)
        ctr += _TWO
        us = 0.5 - abs(u)
        k = math.floor((2.0 * a / us + b) * u + mean + 0.43)
        if us >= 0.07 and v <= vr:
            return int(k), ctr
        if k < 0 or (us < 0.013 and v > us):
            continue
        if (math.log(v) + math.log(invalpha) - math.log(a / (us * us) + b)
                <= -mean + k * loglam - math.lgamma(k + 1.0)):
            return int(k), ctr


@numba.njit(cache=True)
def truncated_levy_draw(key, ctr, alpha, const, r_min, r_max, eps, dt, gauss):
    """Compound-Poisson large jumps plus a Gaussian for jumps below ``eps``.

    Returns (jump_sum, count, counter); the measure is symmetric so there is
    no compensator drift.
    """
    lo = max(eps, r_min)
    count = 0
    total = 0.0
    if lo < r_max:
        a_lo = lo ** (-alpha)
        a_hi = r_max ** (-alpha)
        rate = 2.0 * const * (a_lo - a_hi) / alpha
        count, ctr = poisson_draw(key, ctr, dt * rate)
        for _ in range(count):
            u = uniform_at(key, ctr)
            s = uniform_at(key, ctr + _ONE)
            ctr += _TWO
            r = (a_lo - u * (a_lo - a_hi)) ** (-1.0 / alpha)
            total += r if s < 0.5 else -r
    if gauss:
        top = min(eps, r_max)
        if top > r_min:
            var = 2.0 * const * (top ** (2.0 - alpha) - r_min ** (2.0 - alpha)) / (2.0 - alpha)
            total += math.sqrt(dt * var) * normal_at(key, ctr)
        ctr += _TWO
    return total, count, ctr


@numba.njit(cache=True)
def subordinator_step(key, ctr, code, params):
    """Increment over one step; ``params`` = (alpha, lambda, scale, drift * dt)."""
    if code == SUB_IDENTITY:
        return params[3], ctr
    if code == SUB_STABLE:
        x, ctr = kanter_draw(key, ctr, params[0], params[2])
        return x, ctr
    x, ctr = tempered_draw(key, ctr, params[0], params[1], params[2])
    return x, ctr


@numba.njit(cache=True)
def noise_step(key, ctr, code, params, dt):
    """Increment of the compensated driving noise over ``dt``.

    ``params`` = (alpha, lambda, const, r_min, r_max, eps, compensator_rate,
    dt**(1/alpha)).
    """
    if code == NOISE_NONE:
        return 0.0, ctr
    if code == NOISE_SYMMETRIC_STABLE:
        x, ctr = symmetric_stable_draw(key, ctr, params[0], params[7])
        return x, ctr
    if code == NOISE_TRUNCATED:
        x, n, ctr = truncated_levy_draw(key, ctr, params[0], params[2], params[3],
                                        params[4], params[5], dt, True)
        return x, ctr
    if code == NOISE_ONE_SIDED:
        x, ctr = kanter_draw(key, ctr, params[0], params[7])
    else:
        x, ctr = tempered_draw(key, ctr, params[0], params[1], params[7])
    return x - dt * params[6], ctr


# ---------------------------------------------------------------------------
# array fillers behind the Python wrappers


@numba.njit(cache=True)
def _fill_kanter(key, ctr, alpha, scale, out):
    for i in range(out.size):
        out[i], ctr = kanter_draw(key, ctr, alpha, scale)
    return ctr


@numba.njit(cache=True)
def _fill_tempered(key, ctr, alpha, lam, scale, out):
    for i in range(out.size):
        out[i], ctr = tempered_draw(key, ctr, alpha, lam, scale)
    return ctr


@numba.njit(cache=True)
def _fill_symmetric(key, ctr, alpha, scale, out):
    for i in range(out.size):
        out[i], ctr = symmetric_stable_draw(key, ctr, alpha, scale)
    return ctr


@numba.njit(cache=True)
def _fill_truncated(key, ctr, alpha, const, r_min, r_max, eps, dt, gauss, out, counts):
    for i in range(out.size):
        out[i], counts[i], ctr = truncated_levy_draw(key, ctr, alpha, const, r_min,
                                                     r_max, eps, dt, gauss)
    return ctr


@numba.njit(cache=True)
def _fill_normal_scaled(key, ctr, sd, out):
    for i in range(out.size):
        out[i] = sd * normal_at(key, ctr)
        ctr += _TWO
    return ctr


def _run(filler, rng: RandomStream, size, *args, dtype=float):
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(n, dtype=dtype)
    rng.counter = filler(rng.key, rng.counter, *args, out)
    if size is None:
        return float(out[0])
    return out.reshape(size)


def stable_subordinator_increment(alpha, dt, rng: RandomStream, size=None):
    """Exact draw(s) of T_alpha(dt) by Kanter's representation."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"stable subordinator alpha must lie in (0,1), got {alpha}")
    if not dt > 0:
        raise DomainError("dt must be positive")
    return _run(_fill_kanter, rng, size, float(alpha), float(dt) ** (1.0 / alpha))


def tempered_stable_increment(alpha, lam, dt, rng: RandomStream, size=None):
    """Tempered stable draw(s), E exp(-uT) = exp(-dt((u + lam)**alpha - lam**alpha))."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"tempered stable alpha must lie in (0,1), got {alpha}")
    if not (lam >= 0 and dt > 0):
        raise DomainError("tempered stable requires lam >= 0 and dt > 0")
    out = _run(_fill_tempered, rng, size, float(alpha), float(lam), float(dt) ** (1.0 / alpha))
    if np.any(np.isnan(out)):
        raise NumericalFailure(
            f"tempered stable rejection exceeded {MAX_REJECTIONS} iterations "
            f"(acceptance rate ~ exp(-dt lam**alpha) too small)")
    return out


def symmetric_stable_increment(alpha, dt, rng: RandomStream, size=None):
    """Symmetric alpha-stable draw(s) with E exp(iuL) = exp(-dt |u|**alpha)."""
    if not 0.0 < alpha < 2.0:
        raise DomainError(f"symmetric stable alpha must lie in (0,2), got {alpha}")
    if not dt > 0:
        raise DomainError("dt must be positive")
    return _run(_fill_symmetric, rng, size, float(alpha), float(dt) ** (1.0 / alpha))


def brownian_increment(dt, rng: RandomStream, size=None):
    if not dt > 0:
        raise DomainError("dt must be positive")
    return _run(_fill_normal_scaled, rng, size, math.sqrt(dt))


def default_small_jump_cutoff(nu: LevyMeasureSpec, dt: float, variance_fraction=1e-4,
                              max_mean_jumps=1000.0) -> float:
    """Cutoff below which jumps are replaced by a Gaussian.

    Starts from the radius where the small-jump variance is
    ``variance_fraction`` of the total jump variance and enlarges it, if
    needed, until a single draw expects at most ``max_mean_jumps`` jumps.
    """
    a = nu.alpha
    lo, hi = nu.support
    # second moment over (r_min, eps) equals fraction * total
    total = hi ** (2 - a) - lo ** (2 - a)
    eps = (lo ** (2 - a) + variance_fraction * total) ** (1.0 / (2 - a))
    rate = dt * nu.mass_outside(eps)
    if rate > max_mean_jumps:
        # solve dt * 2c (eps**-a - hi**-a) / a = max_mean_jumps for eps
        target = max_mean_jumps * a / (2.0 * nu.constant * dt) + hi ** (-a)
        eps = target ** (-1.0 / a)
    return float(eps)


def truncated_symmetric_levy_increment(spec: JumpNoiseSpec, dt, eps, rng: RandomStream,
                                       size=None, gaussian_correction=True,
                                       return_counts=False):
    """Approximate increment of a truncated symmetric stable noise.

    Returns ``(jump_sum, compensator_drift)``; with ``return_counts`` the
    number of simulated large jumps is appended.
    """
    nu = spec.levy_measure
    if nu.family != TRUNCATED_SYMMETRIC_STABLE:
        raise DomainError("truncated_symmetric_levy_increment needs a truncated symmetric measure")
    if not 0 < eps < spec.jump_cutoff:
        raise DomainError("small-jump cutoff must satisfy 0 < eps < jump_cutoff")
    mean_jumps = dt * nu.mass_outside(eps)
    if mean_jumps > MAX_JUMPS_PER_DRAW:
        raise ResourceError(
            f"expected {mean_jumps:.3g} jumps per draw exceeds {MAX_JUMPS_PER_DRAW}; "
            f"use a larger small-jump cutoff")
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(n)
    counts = np.empty(n, dtype=np.int64)
    rng.counter = _fill_truncated(rng.key, rng.counter, nu.alpha, nu.constant,
                                  nu.r_min, nu.r_max, float(eps), float(dt),
                                  bool(gaussian_correction), out, counts)
    # symmetric measure: int_{eps<|x|<c} x nu(dx) vanishes
    drift = 0.0
    if size is None:
        res = (float(out[0]), drift)
        return res + (int(counts[0]),) if return_counts else res
    res = (out.reshape(size), drift)
    return res + (counts.reshape(size),) if return_counts else res


# ---------------------------------------------------------------------------
# spec -> kernel parameters


def subordinator_code(spec: SubordinatorSpec, dt: float):
    """(code, params) for :func:`subordinator_step` with step ``dt``."""
    nu = spec.levy_measure
    params = np.zeros(4)
    if nu is None:
        params[3] = spec.drift * dt
        return SUB_IDENTITY, params
    if spec.drift != 0:
        raise DomainError("path sampling supports either a pure drift or a pure jump subordinator")
    params[0] = nu.alpha
    params[1] = nu.lam
    params[2] = dt ** (1.0 / nu.alpha)
    if nu.family == ONE_SIDED_STABLE:
        return SUB_STABLE, params
    if nu.family == TEMPERED_STABLE:
        return SUB_TEMPERED, params
    raise DomainError(f"no subordinator sampler for {nu.family}")


def noise_code(spec, dt, eps=None):
    """(code, params) for :func:`noise_step`; ``spec=None`` means no jumps."""
    params = np.zeros(8)
    if spec is None:
        return NOISE_NONE, params
    nu = spec.levy_measure
    params[0] = nu.alpha
    params[7] = dt ** (1.0 / nu.alpha)
    params[1] = nu.lam
    params[2] = nu.constant
    params[3] = nu.r_min
    params[4] = nu.r_max if math.isfinite(nu.r_max) else 0.0
    if nu.family == SYMMETRIC_STABLE:
        return NOISE_SYMMETRIC_STABLE, params
    if nu.family == TRUNCATED_SYMMETRIC_STABLE:
        if eps is None:
            eps = default_small_jump_cutoff(nu, dt)
        if dt * nu.mass_outside(eps) > MAX_JUMPS_PER_DRAW:
            raise ResourceError("small-jump cutoff too small for the requested step")
        params[5] = eps
        return NOISE_TRUNCATED, params
    params[6] = spec.compensator_rate()
    if nu.family == ONE_SIDED_STABLE:
        return NOISE_ONE_SIDED, params
    return NOISE_TEMPERED, params
