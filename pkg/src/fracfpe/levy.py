"""Levy measures, Laplace exponents, tails and Levy symbols.

Four parametric families are supported.  All of them have a density of the
form ``c * |x|**(-1 - alpha) * phi(x)`` with a smooth or piecewise-constant
factor ``phi``, which is what the quadrature routines exploit:

``one_sided_stable``            c = alpha / Gamma(1 - alpha), x > 0
``tempered_stable``             same c, phi = exp(-lambda x), x > 0
``symmetric_stable``            c = Gamma(1 + alpha) sin(pi alpha / 2) / pi, both sides
``truncated_symmetric_stable``  symmetric_stable restricted to r_min < |x| < r_max

The symmetric constant makes the Levy symbol exactly ``-|u|**alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate, special

from .errors import DomainError, NumericalFailure

ONE_SIDED_STABLE = "one_sided_stable"
TEMPERED_STABLE = "tempered_stable"
SYMMETRIC_STABLE = "symmetric_stable"
TRUNCATED_SYMMETRIC_STABLE = "truncated_symmetric_stable"

FAMILIES = (ONE_SIDED_STABLE, TEMPERED_STABLE, SYMMETRIC_STABLE,
            TRUNCATED_SYMMETRIC_STABLE)
POSITIVE_FAMILIES = (ONE_SIDED_STABLE, TEMPERED_STABLE)
SYMMETRIC_FAMILIES = (SYMMETRIC_STABLE, TRUNCATED_SYMMETRIC_STABLE)

QUAD_RTOL = 1e-8


def _upper_gamma(s, z):
    """Upper incomplete gamma Gamma(s, z) for s > -1, s != 0, z >= 0."""
    z = np.asarray(z, dtype=float)
    if s > 0:
        return special.gammaincc(s, z) * special.gamma(s)
    # recurrence Gamma(s, z) = (Gamma(s + 1, z) - z**s e**-z) / s
    with np.errstate(divide="ignore", invalid="ignore"):
        head = np.where(z > 0, z ** s * np.exp(-z), np.inf)
    return (special.gammaincc(s + 1, z) * special.gamma(s + 1) - head) / s


@dataclass(frozen=True)
class LevyMeasureSpec:
    """Parametric Levy measure on the real line minus the origin."""

    family: str
    alpha: float
    lam: float = 0.0
    r_max: float = math.inf
    r_min: float = 0.0

    def __post_init__(self):
        a = self.alpha
        if self.family not in FAMILIES:
            raise DomainError(f"unknown Levy family {self.family!r}")
        if self.family in POSITIVE_FAMILIES:
            if not 0.0 < a < 1.0:
                raise DomainError(f"{self.family} alpha must lie in (0,1), got {a}")
        elif not 0.0 < a < 2.0:
            raise DomainError(f"{self.family} alpha must lie in (0,2), got {a}")
        if self.family == TEMPERED_STABLE and not self.lam > 0:
            raise DomainError("tempered_stable requires lambda > 0")
        if self.family == TRUNCATED_SYMMETRIC_STABLE:
            if not (0 < self.r_max < math.inf):
                raise DomainError("truncated_symmetric_stable requires 0 < r_max < inf")
            if not 0 <= self.r_min < self.r_max:
                raise DomainError("truncated_symmetric_stable requires 0 <= r_min < r_max")
        elif self.r_max != math.inf or self.r_min != 0.0:
            raise DomainError(f"{self.family} does not take r_min/r_max")
        # every family here has finite int min(x^2, 1) nu(dx) for the alpha
        # ranges enforced above; the only way to break it would be alpha >= 2

    # constructors -----------------------------------------------------
    @classmethod
    def one_sided_stable(cls, alpha):
        return cls(ONE_SIDED_STABLE, alpha)

    @classmethod
    def tempered_stable(cls, alpha, lam):
        return cls(TEMPERED_STABLE, alpha, lam=lam)

    @classmethod
    def symmetric_stable(cls, alpha):
        return cls(SYMMETRIC_STABLE, alpha)

    @classmethod
    def truncated_symmetric_stable(cls, alpha, r_max, r_min=0.0):
        return cls(TRUNCATED_SYMMETRIC_STABLE, alpha, r_max=r_max, r_min=r_min)

    # basic properties -------------------------------------------------
    @property
    def symmetric(self) -> bool:
        return self.family in SYMMETRIC_FAMILIES

    @property
    def positive(self) -> bool:
        return self.family in POSITIVE_FAMILIES

    @property
    def constant(self) -> float:
        a = self.alpha
        if self.positive:
            return a / math.gamma(1.0 - a)
        return math.gamma(1.0 + a) * math.sin(math.pi * a / 2.0) / math.pi

    @property
    def infinite_mass(self) -> bool:
        return self.r_min == 0.0

    @property
    def support(self) -> tuple:
        """(lo, hi) of the positive half of the support."""
        return self.r_min, self.r_max

    def density(self, x):
        """Density of nu at x (x may be negative for symmetric families)."""
        x = np.asarray(x, dtype=float)
        ax = np.abs(x)
        lo, hi = self.support
        with np.errstate(divide="ignore"):
            out = self.constant * ax ** (-1.0 - self.alpha)
        if self.family == TEMPERED_STABLE:
            out = out * np.exp(-self.lam * ax)
        inside = (ax > lo) & (ax < hi)
        if self.positive:
            inside &= x > 0
        return np.where(inside, out, 0.0)

    def _smooth_factor(self, x):
        """phi(x) on the positive side, without the support indicator."""
        if self.family == TEMPERED_STABLE:
            return self.constant * np.exp(-self.lam * x)
        return self.constant * np.ones_like(np.asarray(x, dtype=float))

    # closed-form moments on the positive side --------------------------
    def band_moment(self, p, a, b):
        """Integral of x**p nu(dx) over a < x < b on the positive side.

        Vectorised over ``a`` and ``b``; ``b`` may be ``inf``.
        """
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        lo, hi = self.support
        a = np.clip(a, lo, hi)
        b = np.clip(b, lo, hi)
        b = np.maximum(a, b)
        c = self.constant
        s = p - self.alpha
        if self.family == TEMPERED_STABLE:
            lam = self.lam
            with np.errstate(invalid="ignore"):
                val = c * lam ** (-s) * (_upper_gamma(s, lam * a) - _upper_gamma(s, lam * b))
            return np.where(b > a, val, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            if s == 0:
                val = c * np.log(b / a)
            else:
                val = c * (b ** s - a ** s) / s
        return np.where(b > a, val, 0.0)

    def tail(self, w):
        """nu((w, inf)) for w > 0."""
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0):
            raise DomainError("tail requires w > 0")
        out = self.band_moment(0, w, math.inf)
        return float(out) if out.ndim == 0 else out

    def mass_outside(self, eps):
        """nu({|x| > eps}) counting both sides for symmetric families."""
        m = self.band_moment(0, eps, math.inf)
        return 2.0 * m if self.symmetric else m

    def second_moment_below(self, eps):
        """Integral of x**2 over {|x| < eps}, both sides for symmetric families."""
        m = self.band_moment(2, 0.0, eps)
        return 2.0 * m if self.symmetric else m

    def integrated_tail(self, w):
        """Integral of nu((s, inf)) ds over 0 < s < w, i.e. int min(x, w) nu(dx)."""
        if not self.positive:
            raise DomainError("integrated_tail is defined for positive families only")
        w = np.asarray(w, dtype=float)
        ws = np.where(w > 0, w, 1.0)
        out = self.band_moment(1, 0.0, ws) + ws * self.band_moment(0, ws, math.inf)
        out = np.where(w > 0, out, 0.0)
        return float(out) if out.ndim == 0 else out

    def signed_moment(self, k, region):
        """Integral of r**k nu(dr) over ``region`` in {"inner", "outer"}.

        ``inner`` is {|r| < cutoff} and ``outer`` its complement; the cutoff is
        passed as ``region=("inner", c)``.  Symmetric families count both
        sides, which kills odd k.
        """
        kind, cutoff = region
        if kind == "inner":
            m = self.band_moment(k, 0.0, cutoff)
        else:
            m = self.band_moment(k, cutoff, math.inf)
        m = float(m)
        if self.symmetric:
            return 0.0 if k % 2 else 2.0 * m
        return m


@dataclass(frozen=True)
class SubordinatorSpec:
    """Subordinator with Laplace exponent ``drift * u + int (1 - e**-ux) nu(dx)``.

    ``levy_measure=None`` with ``drift=1`` is the identity time change
    T(gamma) = gamma, used as a degenerate reference case.
    """

    levy_measure: Optional[LevyMeasureSpec] = None
    drift: float = 0.0
    closed_form_psi: bool = True

    def __post_init__(self):
        nu = self.levy_measure
        if self.drift < 0:
            raise DomainError("subordinator drift must be nonnegative")
        if nu is None:
            if self.drift <= 0:
                raise DomainError("a subordinator needs a Levy measure or a positive drift")
            return
        if not nu.positive:
            raise DomainError("subordinator Levy measure must live on the positive half-line")
        if not nu.infinite_mass:
            raise DomainError("subordinator Levy measure must have infinite mass")
        u = np.logspace(-3, 3, 25)
        psi = psi_closed_form(self, u)
        d1 = np.diff(psi)
        slopes = d1 / np.diff(u)
        if psi_closed_form(self, 0.0) != 0 or np.any(d1 < 0) or np.any(np.diff(slopes) > 1e-12 * np.abs(slopes[:-1]).max()):
            raise DomainError("Laplace exponent failed the monotone/concave spot check")

    @classmethod
    def identity(cls):
        return cls(None, drift=1.0)

    @classmethod
    def stable(cls, alpha):
        return cls(LevyMeasureSpec.one_sided_stable(alpha))

    @classmethod
    def tempered(cls, alpha, lam):
        return cls(LevyMeasureSpec.tempered_stable(alpha, lam))

    @property
    def is_identity(self) -> bool:
        return self.levy_measure is None

    @property
    def alpha(self) -> float:
        """Index of the Levy part (1 for the pure-drift stub)."""
        return 1.0 if self.levy_measure is None else self.levy_measure.alpha


@dataclass(frozen=True)
class JumpNoiseSpec:
    """Pure-jump driving noise L with compensation on {|x| < jump_cutoff}."""

    levy_measure: LevyMeasureSpec
    jump_cutoff: float = 1.0

    def __post_init__(self):
        if not self.jump_cutoff > 0:
            raise DomainError("jump_cutoff must be positive")

    def compensator_rate(self):
        """Drift rate int_{|x|<cutoff} x nu(dx) removed by the compensator."""
        return self.levy_measure.signed_moment(1, ("inner", self.jump_cutoff))


# ---------------------------------------------------------------------------
# Laplace exponent


def psi_closed_form(spec: SubordinatorSpec, u):
    """Closed-form Laplace exponent; accepts complex ``u`` with Re u >= 0."""
    u = np.asarray(u)
    out = spec.drift * u
    nu = spec.levy_measure
    if nu is None:
        return out
    a = nu.alpha
    if nu.family == ONE_SIDED_STABLE:
        out = out + u ** a
    else:
        out = out + (u + nu.lam) ** a - nu.lam ** a
    return out


def _quad(fun, a, b, **kw):
    val, err = integrate.quad(fun, a, b, epsabs=0.0, epsrel=1e-11, limit=400, **kw)
    return val, err


def _check(val, err, scale, what):
    if not np.isfinite(val) or err > QUAD_RTOL * max(abs(scale), 1e-300):
        raise NumericalFailure(
            f"{what}: quadrature did not reach relative error {QUAD_RTOL} "
            f"(value {val}, error estimate {err})")


def _singular_part(smooth, exponent, a, b):
    """Integral of smooth(x) * x**exponent over (a, b) with 0 <= a < b <= 1."""
    if b <= a:
        return 0.0, 0.0
    if a == 0.0:
        return _quad(smooth, 0.0, b, weight="alg", wvar=(exponent, 0.0))
    return _quad(lambda x: smooth(x) * x ** exponent, a, b)


def psi_quadrature(spec: SubordinatorSpec, u: float) -> float:
    """Laplace exponent by adaptive quadrature, split at x = 1.

    The (0, 1] piece uses an algebraic weight for the x**-alpha singularity,
    the tail is integrated in s = log x.
    """
    if u < 0:
        raise DomainError("psi requires u >= 0")
    if u == 0:
        return 0.0
    nu = spec.levy_measure
    total = spec.drift * u
    if nu is None:
        return total
    a = nu.alpha
    lo, hi = nu.support

    def smooth(x):
        head = u if x == 0.0 else -math.expm1(-u * x) / x
        return head * float(nu._smooth_factor(x))

    v1, e1 = _singular_part(smooth, -a, lo, min(hi, 1.0))

    def tail(s):
        if s > 700.0:
            return 0.0
        x = math.exp(s)
        return -math.expm1(-u * x) * math.exp(-a * s) * float(nu._smooth_factor(x))

    s_lo = math.log(max(lo, 1.0))
    s_hi = math.log(hi) if hi < math.inf else math.inf
    v2, e2 = _quad(tail, s_lo, s_hi) if s_hi > s_lo else (0.0, 0.0)
    val = v1 + v2
    _check(val, e1 + e2, val, "psi_exponent")
    return total + val


def psi_exponent(spec: SubordinatorSpec, u, method: str = "auto"):
    """Laplace exponent Psi(u) of a subordinator.

    ``method`` is ``"auto"`` (closed form when the spec allows it),
    ``"closed"`` or ``"quadrature"``.
    """
    if np.any(np.asarray(u) < 0):
        raise DomainError("psi requires u >= 0")
    if method == "quadrature" or (method == "auto" and not spec.closed_form_psi):
        if np.ndim(u):
            return np.array([psi_quadrature(spec, float(v)) for v in np.ravel(u)]).reshape(np.shape(u))
        return psi_quadrature(spec, float(u))
    out = psi_closed_form(spec, np.asarray(u, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def tail_G(spec, w):
    """G(w) = nu((w, inf)), the tail of the (subordinator) Levy measure."""
    nu = spec.levy_measure if isinstance(spec, SubordinatorSpec) else spec
    if nu is None:
        raise DomainError("the pure-drift subordinator has no Levy tail")
    return nu.tail(w)


# ---------------------------------------------------------------------------
# Levy symbol


def _cos_m1_over_x2(u):
    def f(x):
        if x == 0.0:
            return -0.5 * u * u
        s = math.sin(0.5 * u * x)
        return -2.0 * s * s / (x * x)
    return f


def _sin_m_ux_over_x3(u):
    def f(x):
        z = u * x
        if abs(z) < 0.1:
            z2 = z * z
            return u ** 3 * (-1.0 / 6.0 + z2 / 120.0 - z2 * z2 / 5040.0 + z2 ** 3 / 362880.0)
        return (math.sin(z) - z) / (x ** 3)
    return f


def _symbol_half(nu: LevyMeasureSpec, u: float):
    """Positive-side pieces of the symbol with compensation on (0, 1).

    Returns (real part, imaginary part, error estimate) of
    int_{x>0} (e^{iux} - 1 - iux 1_{x<1}) nu(dx).
    """
    a = nu.alpha
    lo, hi = nu.support
    phi = nu._smooth_factor
    top = min(hi, 1.0)
    cm = _cos_m1_over_x2(u)
    r1, e1 = _singular_part(lambda x: cm(x) * float(phi(x)), 1.0 - a, lo, top)
    sm = _sin_m_ux_over_x3(u)
    i1, e2 = _singular_part(lambda x: sm(x) * float(phi(x)), 2.0 - a, lo, top)
    r2 = i2 = e3 = e4 = 0.0
    start = max(lo, 1.0)
    if hi > start:
        g = lambda x: float(phi(x)) * x ** (-1.0 - a)
        if hi == math.inf:
            r2, e3 = integrate.quad(g, start, math.inf, weight="cos", wvar=u, limlst=200, epsabs=1e-13)
            i2, e4 = integrate.quad(g, start, math.inf, weight="sin", wvar=u, limlst=200, epsabs=1e-13)
        else:
            r2, e3 = _quad(g, start, hi, weight="cos", wvar=u)
            i2, e4 = _quad(g, start, hi, weight="sin", wvar=u)
        r2 -= float(nu.band_moment(0, start, hi))
    return r1 + r2, i1 + i2, e1 + e2 + e3 + e4


def levy_symbol(spec: JumpNoiseSpec, u: float, method: str = "auto") -> complex:
    """Levy symbol eta(u) = int (e^{iux} - 1 - iux 1_{|x|<c}) nu(dx).

    Closed forms are used for the stable, tempered and one-sided families;
    the truncated symmetric family (or ``method="quadrature"``) goes through
    adaptive quadrature.
    """
    nu = spec.levy_measure
    u = float(u)
    if u == 0.0:
        return 0j
    c = spec.jump_cutoff
    if method == "auto" and nu.family != TRUNCATED_SYMMETRIC_STABLE:
        a = nu.alpha
        if nu.family == SYMMETRIC_STABLE:
            return complex(-abs(u) ** a, 0.0)
        s = complex(0.0, -u)
        if nu.family == ONE_SIDED_STABLE:
            base = -(s ** a)
        else:
            base = -((nu.lam + s) ** a - nu.lam ** a)
        return base - 1j * u * spec.compensator_rate()
    re, im, err = _symbol_half(nu, u)
    if nu.symmetric:
        val = complex(2.0 * re, 0.0)
        _check(val.real, 2 * err, val.real, "levy_symbol")
        return val
    # move the compensation window from (0, 1) to (0, c)
    shift = float(nu.band_moment(1, min(1.0, c), max(1.0, c)))
    im -= u * shift if c > 1.0 else -u * shift
    val = complex(re, im)
    _check(abs(val), err, abs(val), "levy_symbol")
    return val
