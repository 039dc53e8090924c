"""Memory kernel M (Laplace transform 1/Psi), the memory operator Phi and Theta.

Phi_t f = d/dt int_0^t M(t - y) f(y) dy is discretised as a causal weighted sum
``(Phi f)(t_n) = sum_j w_j f(t_{n-j})``.  Two weight families exist:

* Grunwald-Letnikov, for the stable subordinator where Phi is the
  Riemann-Liouville derivative of order 1 - alpha;
* a midpoint convolution rule built from any kernel M, typically obtained by
  numerical Laplace inversion of 1/Psi;
* product integration: M is integrated exactly against the piecewise-linear
  interpolant of f.  Its weight on f(t_0) is not Toeplitz, see
  :meth:`DiscreteMemoryOperator.first_weights`.

Theta_w g = int_0^w G(w - z) g(z) dz uses the Levy tail G(w) = nu((w, inf)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, DomainError, NumericalFailure
from .levy import (ONE_SIDED_STABLE, LevyMeasureSpec, SubordinatorSpec,
                   psi_closed_form, psi_exponent, tail_G)

TALBOT_NODES = 32
# relative disagreement allowed between the N and N + 8 node inversions
TALBOT_RTOL = 1e-6
LAPLACE_CHECK_U = (1.0, 2.0, 5.0)
LAPLACE_CHECK_RTOL = 1e-3

GRUNWALD_LETNIKOV = "grunwald_letnikov"
CONVOLUTION = "convolution"
PRODUCT = "product_integration"
# Gauss-Legendre nodes per half cell for smooth parts of the product weights
_GAUSS_NODES = 12


def gl_weights(order: float, n: int) -> np.ndarray:
    """Grunwald-Letnikov coefficients g_0..g_{n-1} of (1 - z)**order."""
    g = np.empty(n)
    if n == 0:
        return g
    g[0] = 1.0
    for j in range(1, n):
        g[j] = g[j - 1] * (j - 1 - order) / j
    return g


# ---------------------------------------------------------------------------
# Laplace inversion


def _talbot_contour(n):
    # Weideman-Trefethen optimised cotangent contour, midpoint rule in theta
    theta = -math.pi + (np.arange(n) + 0.5) * (2.0 * math.pi / n)
    a, b, c, d = -0.6122, 0.5017, 0.6407, 0.2645
    cot = 1.0 / np.tan(c * theta)
    z = a + b * theta * cot + 1j * d * theta
    dz = b * cot - b * c * theta / np.sin(c * theta) ** 2 + 1j * d
    return z, dz


def talbot_invert(transform: Callable, t, n: int = TALBOT_NODES) -> np.ndarray:
    """Invert a Laplace transform at ``t > 0``; ``transform`` must accept complex arrays."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0):
        raise DomainError("Laplace inversion needs t > 0")
    z, dz = _talbot_contour(n)
    s = np.outer(n / t, z)                       # (len(t), n)
    vals = np.exp(s * t[:, None]) * transform(s) * dz[None, :] * (n / t)[:, None]
    return (vals.sum(axis=1) / (1j * n)).real


# ---------------------------------------------------------------------------
# kernel


@dataclass(frozen=True)
class MemoryKernel:
    """M(t) with M~(u) = 1 / Psi(u).

    ``closed_form_alpha`` selects M(t) = t**(alpha - 1) / Gamma(alpha); otherwise
    the kernel is inverted numerically from the subordinator's Psi.
    """

    subordinator: Optional[SubordinatorSpec] = None
    closed_form_alpha: Optional[float] = None
    talbot_nodes: int = TALBOT_NODES
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if (self.subordinator is None) == (self.closed_form_alpha is None):
            raise ContractError("give exactly one of subordinator / closed_form_alpha")
        a = self.closed_form_alpha
        if a is not None and not 0 < a <= 1:
            raise DomainError("closed-form kernel needs alpha in (0, 1]")

    @classmethod
    def closed_form_stable(cls, alpha):
        return cls(closed_form_alpha=float(alpha))

    @classmethod
    def numeric(cls, subordinator: SubordinatorSpec, nodes: int = TALBOT_NODES):
        return cls(subordinator=subordinator, talbot_nodes=nodes)

    @classmethod
    def for_subordinator(cls, spec: SubordinatorSpec):
        nu = spec.levy_measure
        if nu is not None and nu.family == ONE_SIDED_STABLE and spec.drift == 0:
            return cls.closed_form_stable(nu.alpha)
        return cls.numeric(spec)

    def laplace(self, u):
        """M~(u) = 1 / Psi(u) (complex u allowed)."""
        if self.closed_form_alpha is not None:
            return np.asarray(u) ** (-self.closed_form_alpha)
        return 1.0 / psi_closed_form(self.subordinator, u)

    def __call__(self, t):
        return memory_kernel_eval(self, t)

    def integrated(self, t, order: int):
        """K_order(t): M integrated ``order`` times from 0 (order 1 or 2)."""
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        a = self.closed_form_alpha
        if a is not None:
            return tt ** (a + order - 1.0) / math.gamma(a + order)
        lap = lambda u: self.laplace(u) / u ** order
        out = talbot_invert(lap, tt, self.talbot_nodes)
        ref = talbot_invert(lap, tt, self.talbot_nodes + 8)
        if np.any(np.abs(out - ref) > TALBOT_RTOL * np.abs(ref)) or not np.all(np.isfinite(out)):
            raise NumericalFailure("Talbot inversion of the integrated kernel did not settle")
        return out

    def table(self, t) -> np.ndarray:
        """M on the grid ``t`` (cached by grid contents)."""
        t = np.asarray(t, dtype=float)
        key = (t.size, t.tobytes())
        hit = self._cache.get(key)
        if hit is None:
            hit = memory_kernel_eval(self, t)
            hit.setflags(write=False)
            self._cache[key] = hit
        return hit

    def laplace_check(self, u=LAPLACE_CHECK_U, n: int = 4000) -> np.ndarray:
        """Relative error of re-transforming a tabulated M against 1/Psi(u)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        t_hi = 60.0 / u.min()
        t = np.geomspace(1e-8, t_hi, n)
        m = self.table(t)
        if np.any(m <= 0):
            raise NumericalFailure("memory kernel is not positive on the table grid")
        # local power law M ~ c t**p below the first node
        p = math.log(m[1] / m[0]) / math.log(t[1] / t[0])
        s = np.log(t)
        errs = []
        for uu in u:
            f = t * np.exp(-uu * t) * m
            body = float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(s)))
            head = t[0] * m[0] / (p + 1.0)
            target = float(np.real(self.laplace(uu)))
            errs.append(abs(body + head - target) / abs(target))
        return np.array(errs)


def memory_kernel_eval(kernel: MemoryKernel, t):
    """M(t) for t > 0; scalar in, scalar out."""
    scalar = np.ndim(t) == 0
    tt = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(tt <= 0):
        raise DomainError("memory kernel is evaluated at t > 0 only")
    a = kernel.closed_form_alpha
    if a is not None:
        out = tt ** (a - 1.0) / math.gamma(a)
    else:
        n = kernel.talbot_nodes
        out = talbot_invert(kernel.laplace, tt, n)
        ref = talbot_invert(kernel.laplace, tt, n + 8)
        bad = np.abs(out - ref) > TALBOT_RTOL * np.maximum(np.abs(ref), 1e-300)
        if np.any(bad) or not np.all(np.isfinite(out)):
            i = int(np.argmax(bad)) if np.any(bad) else 0
            raise NumericalFailure(
                f"Talbot inversion did not settle at t={tt[i]:.3g}: "
                f"{out[i]:.6g} (N={n}) vs {ref[i]:.6g} (N={n + 8})")
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# discrete memory operator


@dataclass(frozen=True)
class DiscreteMemoryOperator:
    """Causal weights w_0, w_1, ... with (Phi f)(t_n) = sum_j w_j f(t_{n-j})."""

    kind: str
    dt: float
    order: Optional[float] = None            # beta = 1 - alpha for GL
    kernel: Optional[MemoryKernel] = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if self.kind == GRUNWALD_LETNIKOV:
            if self.order is None or not 0 <= self.order < 1:
                raise DomainError("GL order must lie in [0, 1)")
        elif self.kind in (CONVOLUTION, PRODUCT):
            if self.kernel is None:
                raise ContractError(f"{self.kind} operator needs a memory kernel")
        else:
            raise ContractError(f"unknown memory operator kind {self.kind!r}")

    @classmethod
    def grunwald_letnikov(cls, alpha, dt):
        return cls(GRUNWALD_LETNIKOV, float(dt), order=1.0 - float(alpha))

    @classmethod
    def convolution(cls, kernel: MemoryKernel, dt):
        return cls(CONVOLUTION, float(dt), kernel=kernel)

    @classmethod
    def product_integration(cls, kernel: MemoryKernel, dt):
        return cls(PRODUCT, float(dt), kernel=kernel)

    @classmethod
    def for_subordinator(cls, spec: SubordinatorSpec, dt, kind: str = "auto"):
        """``auto`` is GL (backward Euler) for the identity, product integration otherwise."""
        if kind == "auto":
            kind = GRUNWALD_LETNIKOV if spec.is_identity else PRODUCT
        if kind == GRUNWALD_LETNIKOV:
            if not (spec.is_identity or spec.levy_measure.family == ONE_SIDED_STABLE):
                raise ContractError("Grunwald-Letnikov weights need a stable subordinator")
            return cls.grunwald_letnikov(spec.alpha, dt)
        if spec.is_identity:
            raise ContractError(f"{kind} weights need a subordinator with a Levy measure")
        kernel = MemoryKernel.for_subordinator(spec)
        if kind == PRODUCT:
            return cls.product_integration(kernel, dt)
        if kind == CONVOLUTION:
            return cls.convolution(kernel, dt)
        raise ContractError(f"unknown memory operator kind {kind!r}")

    @property
    def is_identity(self) -> bool:
        return self.kind == GRUNWALD_LETNIKOV and self.order == 0.0

    def weights(self, n: int) -> np.ndarray:
        """First ``n`` weights (read-only, cached)."""
        hit = self._cache.get("w")
        if hit is not None and hit.size >= n:
            return hit[:n]
        if self.kind == GRUNWALD_LETNIKOV:
            w = self.dt ** (-self.order) * gl_weights(self.order, n)
        elif self.kind == CONVOLUTION:
            mid = self.kernel.table((np.arange(n) + 0.5) * self.dt)
            w = np.empty(n)
            w[0] = mid[0]
            w[1:] = np.diff(mid)
        else:
            v = self._product_tables(n)[0]
            w = np.diff(v, prepend=0.0) / self.dt
        w.setflags(write=False)
        self._cache["w"] = w
        return w

    def first_weights(self, n: int) -> np.ndarray:
        """Weight on f(t_0) in (Phi f)(t_k) for k = 0..n-1.

        Equal to :meth:`weights` except for product integration, where the
        first node carries only half a hat function.
        """
        if self.kind != PRODUCT:
            return self.weights(n)
        hit = self._cache.get("f")
        if hit is not None and hit.size >= n:
            return hit[:n]
        v, first = self._product_tables(max(n, 2))
        f = np.empty(max(n, 2))
        f[0] = v[0] / self.dt
        f[1:] = np.diff(first) / self.dt
        f = f[:n]
        f.setflags(write=False)
        self._cache["f"] = f
        return f

    def _product_tables(self, n: int):
        """V_k = int M(u) hat(u - k dt) du and F_k = int_0^dt M(k dt - s)(1 - s/dt) ds.

        sum_{j>=1} V_{n-j} f_j + F_n f_0 integrates M exactly against the
        linear interpolant of f, i.e. approximates int_0^{t_n} M(t_n - s) f(s) ds.
        """
        h = self.dt
        K = self.kernel.integrated
        k1h, k2h, k22h = K(h, 1)[0], K(h, 2)[0], K(2 * h, 2)[0]
        size = max(n, 2)
        v = np.empty(size)
        first = np.zeros(size)
        v[0] = k2h / h
        v[1] = (k22h - 2 * k2h) / h
        first[1] = k1h - k2h / h
        if size > 2:
            # M is smooth away from 0: Gauss-Legendre on both half cells of each hat
            g, gw = np.polynomial.legendre.leggauss(_GAUSS_NODES)
            s = 0.5 * (g + 1.0)
            gw = 0.5 * gw
            k = np.arange(2, size)[:, None]
            m_lo = self.kernel.table(((k - 1) + s).ravel() * h).reshape(k.shape[0], -1)
            m_hi = self.kernel.table((k + s).ravel() * h).reshape(k.shape[0], -1)
            v[2:] = h * (m_lo @ (gw * s) + m_hi @ (gw * (1.0 - s)))
            first[2:] = h * (m_lo @ (gw * s))
        return v[:n], first[:n]


def phi_apply(op: DiscreteMemoryOperator, history, times=None) -> float:
    """(Phi f)(t_n) from the samples f(t_0), ..., f(t_n).

    ``times`` optionally gives t_0..t_n; they must be uniformly spaced by
    ``op.dt``.
    """
    f = np.asarray(history, dtype=float)
    if f.ndim != 1 or f.size < 1:
        raise ContractError("history must be a nonempty 1-d sequence")
    if times is not None:
        t = np.asarray(times, dtype=float)
        if t.shape != f.shape:
            raise ContractError("times and history differ in length")
        if t.size > 1 and not np.allclose(np.diff(t), op.dt, rtol=1e-9, atol=0):
            raise ContractError("memory operator needs uniform spacing equal to op.dt")
    w = op.weights(f.size)
    out = float(np.dot(w, f[::-1]))
    return out + (op.first_weights(f.size)[-1] - w[-1]) * f[0]


def theta_apply(spec, g, delta) -> float:
    """Theta_w g with w = (len(g) - 1) * delta; g sampled at z_j = j * delta.

    ``spec`` is a SubordinatorSpec, a positive LevyMeasureSpec or a callable
    tail w -> G(w).  Measures use product-midpoint weights (exact integrals of
    G over each cell, g at the cell midpoint), so the integrable singularity
    of G at 0 is handled; a callable tail falls back to the plain midpoint rule.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 1 or g.size < 1:
        raise ContractError("g must be a nonempty 1-d sequence")
    if not delta > 0:
        raise DomainError("spacing must be positive")
    n = g.size - 1
    if n == 0:
        return 0.0
    gm = 0.5 * (g[1:] + g[:-1])
    w = n * delta
    if callable(spec) and not isinstance(spec, (SubordinatorSpec, LevyMeasureSpec)):
        lag = w - (np.arange(n) + 0.5) * delta
        return float(np.dot(np.asarray(spec(lag), dtype=float) * delta, gm))
    nu = spec.levy_measure if isinstance(spec, SubordinatorSpec) else spec
    if nu is None:
        raise DomainError("the pure-drift subordinator has no Levy tail")
    edges = w - np.arange(n + 1) * delta          # w - z_j, decreasing to 0
    it = nu.integrated_tail(edges)
    cell = it[:-1] - it[1:]
    return float(np.dot(cell, gm))


def kernel_table(spec: SubordinatorSpec, t) -> np.ndarray:
    """Rows (t, M(t), G(t)) for the CLI kernel-table command."""
    t = np.asarray(t, dtype=float)
    m = MemoryKernel.for_subordinator(spec).table(t)
    if spec.is_identity:
        g = np.zeros_like(t)
    else:
        g = np.asarray(tail_G(spec, t), dtype=float)
    return np.column_stack([t, m, g])


__all__ = [
    "CONVOLUTION", "GRUNWALD_LETNIKOV", "DiscreteMemoryOperator", "MemoryKernel",
    "gl_weights", "kernel_table", "memory_kernel_eval", "phi_apply", "psi_exponent",
    "talbot_invert", "theta_apply",
]
