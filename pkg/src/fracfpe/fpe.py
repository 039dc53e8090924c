"""Grid solver for fractional Fokker-Planck equations dq/dt = L_x Phi_t q.

L_x is the drift-diffusion operator plus one of the jump operators:

* ``stable_jump``: fractional Laplacian of |h|**alpha (or sgn(h)|h|**alpha)
  times the operand;
* ``symmetric_jump``: integral against the pointwise pushforward of a
  symmetric Levy measure under s -> s h(x, t);
* ``general_series``: the derivative series of the general jump generator's
  adjoint, truncated after K terms.

Every operator is assembled as a matrix on the grid with zero extension
outside, so probability that leaves the grid is absorbed and booked in the
mass ledger.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .density import DensityEstimate, Grid
from .errors import (ConfigError, ContractError, DomainError, IntegrityError,
                     StabilityError)
from .exprparse import CoefficientField, constant_value, evaluate
from .kernels import DiscreteMemoryOperator
from .levy import LevyMeasureSpec

NO_JUMP = "no_jump"
STABLE_JUMP = "stable_jump"
SYMMETRIC_JUMP = "symmetric_jump"
GENERAL_SERIES = "general_series"
VARIANTS = (NO_JUMP, STABLE_JUMP, SYMMETRIC_JUMP, GENERAL_SERIES)
# symmetric_jump: h read at the evaluation point, or the transpose of that matrix
POINTWISE = "pointwise"
ADJOINT = "adjoint"
JUMP_FORMS = (POINTWISE, ADJOINT)

ABSOLUTE = "absolute"
SIGNED = "signed"
STABLE_SIGNS = (ABSOLUTE, SIGNED)

EXPLICIT = "explicit"
IMPLICIT = "implicit"

STABILITY_LIMIT = 0.4
MASS_TOLERANCE = 1e-6
SERIES_ORDER_RANGE = (2, 12)


class SeriesTruncationWarning(UserWarning):
    """The last retained series term is larger than the one before it."""


# ---------------------------------------------------------------------------
# helpers


def _coef(expr, x, t, what):
    v = np.broadcast_to(np.asarray(evaluate(expr, x, t), dtype=float), np.shape(x)).copy()
    if not np.all(np.isfinite(v)):
        raise ContractError(f"{what}(x, t) is not finite on the grid at t={t}")
    return v


def _as_grid(grid) -> Grid:
    return grid if isinstance(grid, Grid) else Grid(*grid)


def _check_alpha(alpha):
    if not 0 < alpha < 2:
        raise DomainError("fractional order must lie in (0, 2)")
    if alpha == 1:
        raise DomainError("alpha = 1 is not supported: the Riesz normalisation 1/(2cos(pi alpha/2)) is singular")


# ---------------------------------------------------------------------------
# drift and diffusion


def drift_diffusion_matrix(coeffs: CoefficientField, grid: Grid, t: float) -> sp.csr_matrix:
    """Flux-form central differences with zero ghost cells."""
    grid = _as_grid(grid)
    n, dx = grid.n_x, grid.dx
    if n < 5:
        raise ContractError("drift-diffusion needs at least 5 grid points")
    xe = grid.x_min + np.arange(-1, n + 1) * dx          # with ghosts
    F = _coef(coeffs.F, xe, t, "F")
    sig = _coef(coeffs.sigma, grid.x, t, "sigma")
    if np.any(sig < 0):
        raise ContractError("sigma(x, t) must be nonnegative")
    D = 0.5 * sig * sig
    Ff = 0.5 * (F[1:] + F[:-1])                           # faces i - 1/2, i = 0..n
    # flux through face i+1/2: Ff[i+1] * (g_i + g_{i+1}) / 2
    main = -(Ff[1:] - Ff[:-1]) * 0.5 / dx - 2.0 * D / dx ** 2
    upper = -Ff[1:-1] * 0.5 / dx + D[1:] / dx ** 2        # coefficient of g_{i+1} in row i
    lower = Ff[1:-1] * 0.5 / dx + D[:-1] / dx ** 2        # coefficient of g_{i-1} in row i
    return sp.diags([lower, main, upper], [-1, 0, 1], format="csr")


def drift_diffusion_apply(g, coeffs: CoefficientField, t: float, grid) -> np.ndarray:
    return drift_diffusion_matrix(coeffs, _as_grid(grid), t) @ np.asarray(g, dtype=float)


# ---------------------------------------------------------------------------
# fractional Laplacian


def gl_fractional_weights(alpha: float, n: int) -> np.ndarray:
    w = np.empty(n)
    w[0] = 1.0
    for k in range(1, n):
        w[k] = w[k - 1] * (1.0 - (alpha + 1.0) / k)
    return w


def _shift(alpha):
    return 1 if alpha > 1 else 0


def _riesz_scale(alpha, dx):
    return -1.0 / (2.0 * math.cos(math.pi * alpha / 2.0) * dx ** alpha)


def frac_laplacian_stencil(alpha: float, n: int, dx: float) -> np.ndarray:
    """Toeplitz coefficients c_d, d = -(n-1)..(n-1): (Lg)_i = sum_d c_d g_{i-d}."""
    _check_alpha(alpha)
    p = _shift(alpha)
    w = gl_fractional_weights(alpha, n + 1)
    c = np.zeros(2 * n - 1)
    d = np.arange(-(n - 1), n)
    # left operator: A_L[i, j] = w[i - j + p]; right operator is its transpose
    kl = d + p
    ok = (kl >= 0) & (kl <= n)
    c[ok] += w[kl[ok]]
    kr = -d + p
    ok = (kr >= 0) & (kr <= n)
    c[ok] += w[kr[ok]]
    return _riesz_scale(alpha, dx) * c


def frac_laplacian_matrix(alpha: float, grid) -> np.ndarray:
    """Dense symmetric matrix of the shifted-GL Riesz discretisation."""
    grid = _as_grid(grid)
    n = grid.n_x
    c = frac_laplacian_stencil(alpha, n, grid.dx)
    return scipy.linalg.toeplitz(c[n - 1:], c[n - 1::-1])


def frac_laplacian_apply(g, alpha: float, grid, periodic: bool = False) -> np.ndarray:
    """-(-Delta)^(alpha/2) g with zero extension, or on a periodic grid.

    The periodic form applies the same stencil through its discrete Fourier
    symbol; there ``grid`` is the period's (n points, spacing dx) and the
    endpoint is not repeated.
    """
    g = np.asarray(g, dtype=float)
    grid = _as_grid(grid)
    _check_alpha(alpha)
    n = g.size
    if periodic:
        theta = 2.0 * math.pi * np.fft.fftfreq(n)
        p = _shift(alpha)
        z = (1.0 - np.exp(-1j * theta)) ** alpha * np.exp(1j * theta * p)
        sym = _riesz_scale(alpha, grid.dx) * 2.0 * z.real
        return np.fft.ifft(np.fft.fft(g) * sym).real
    from scipy.signal import fftconvolve

    c = frac_laplacian_stencil(alpha, n, grid.dx)
    return fftconvolve(g, c, mode="full")[n - 1: 2 * n - 1]


def stable_multiplier(coeffs: CoefficientField, grid, t: float, alpha: float,
                      signed: bool = True) -> np.ndarray:
    """sgn(h)|h|**alpha, or |h|**alpha with ``signed=False``.

    A symmetric driver does not see the sign of h, so the forward operator
    of h dL is the unsigned one; with h < 0 the signed multiplier turns the
    fractional Laplacian into an anti-diffusion.
    """
    h = _coef(coeffs.h, _as_grid(grid).x, t, "h")
    m = np.abs(h) ** alpha
    return np.sign(h) * m if signed else m


def stable_jump_apply(g, coeffs: CoefficientField, t: float, alpha: float, grid,
                      signed: bool = True) -> np.ndarray:
    m = stable_multiplier(coeffs, grid, t, alpha, signed)
    return frac_laplacian_apply(m * np.asarray(g, dtype=float), alpha, grid)


# ---------------------------------------------------------------------------
# symmetric pushforward operator

# cubic Lagrange basis through rho = -1, 0, 1, 2 as power-series coefficients
_LAGRANGE = np.array([
    [0.0, -1.0 / 3.0, 0.5, -1.0 / 6.0],
    [1.0, -0.5, -1.0, 0.5],
    [0.0, 1.0, 0.5, -0.5],
    [0.0, -1.0 / 6.0, 0.0, 1.0 / 6.0],
])


def _pushforward_weights(nu: LevyMeasureSpec, habs: float, dx: float, n_off: int):
    """Node weights c_k (k = 0..n_off+2) and the far tail mass for one |h|.

    The one-sided pushforward measure nu'(dr) (r = s |h|) is integrated
    exactly against a cubic interpolant of u(r) = g(x+r) + g(x-r) - 2 g(x) on
    every cell [k dx, (k+1) dx], k >= 1.  On the first cell u is taken as
    u_1 (r/dx)**2, the second difference.
    """
    c = np.zeros(n_off + 4)
    k = np.arange(1, n_off + 1, dtype=float)
    a = k * dx / habs
    b = (k + 1) * dx / habs
    # raw moments of (r/dx)**q over each cell, q = 0..3
    raw = [nu.band_moment(q, a, b) * (habs / dx) ** q for q in range(4)]
    # moments of rho = r/dx - k
    mom = np.empty((4, k.size))
    mom[0] = raw[0]
    mom[1] = raw[1] - k * raw[0]
    mom[2] = raw[2] - 2 * k * raw[1] + k * k * raw[0]
    mom[3] = raw[3] - 3 * k * raw[2] + 3 * k * k * raw[1] - k ** 3 * raw[0]
    node_w = _LAGRANGE @ mom                             # (4 basis, cells)
    idx = np.arange(1, n_off + 1)
    for m in range(4):
        np.add.at(c, idx - 1 + m, node_w[m])
    # first cell
    c[1] += nu.band_moment(2, 0.0, dx / habs) * (habs / dx) ** 2
    c[0] = 0.0                                           # u_0 = 0
    tail = float(nu.band_moment(0, (n_off + 1) * dx / habs, math.inf))
    return c, tail


def symmetric_jump_matrix(coeffs: CoefficientField, grid, t: float,
                          nu: LevyMeasureSpec, form: str = POINTWISE) -> np.ndarray:
    """Rows apply the pushforward measure with h taken at the row's node.

    ``form="adjoint"`` returns the transpose instead: the forward operator of
    dX = h(X) dL, which conserves mass when h depends on x.  Both agree for
    constant h.
    """
    if form not in JUMP_FORMS:
        raise ContractError(f"unknown jump form {form!r}")
    grid = _as_grid(grid)
    if not nu.symmetric:
        raise ContractError("symmetric_jump needs a symmetric Levy measure")
    n, dx = grid.n_x, grid.dx
    h = _coef(coeffs.h, grid.x, t, "h")
    habs = np.abs(h)
    A = np.zeros((n, n))
    n_off = n + 1
    rows = np.arange(n)
    cache = {}
    for i in range(n):
        if habs[i] == 0.0:
            continue
        key = habs[i]
        hit = cache.get(key)
        if hit is None:
            hit = cache[key] = _pushforward_weights(nu, key, dx, n_off)
        c, tail = hit
        # u_k = g_{i+k} + g_{i-k} - 2 g_i with zero extension; beyond the
        # interpolated range u = -2 g_i and nu' carries ``tail`` mass
        kk = np.arange(1, c.size)
        right = i + kk
        left = i - kk
        okr = right < n
        okl = left >= 0
        A[i, right[okr]] += c[1:][okr]
        A[i, left[okl]] += c[1:][okl]
        A[i, i] -= 2.0 * (c[1:].sum() + tail)
    del rows
    return A.T.copy() if form == ADJOINT else A


def symmetric_jump_apply(g, coeffs: CoefficientField, t: float, spec, grid,
                         form: str = POINTWISE) -> np.ndarray:
    nu = spec.levy_measure if hasattr(spec, "levy_measure") else spec
    return symmetric_jump_matrix(coeffs, grid, t, nu, form) @ np.asarray(g, dtype=float)


# ---------------------------------------------------------------------------
# general series operator


@lru_cache(maxsize=None)
def central_difference(k: int):
    """Second-order central weights for the k-th derivative on offsets -m..m."""
    m = (k + 1) // 2
    offs = list(range(-m, m + 1))
    size = len(offs)
    # solve sum_j w_j o_j**q / q! = [q == k] for q = 0..size-1 exactly
    M = [[Fraction(o) ** q / math.factorial(q) for o in offs] + [Fraction(int(q == k))]
         for q in range(size)]
    for col in range(size):
        piv = next(r for r in range(col, size) if M[r][col] != 0)
        M[col], M[piv] = M[piv], M[col]
        for r in range(size):
            if r != col and M[r][col] != 0:
                f = M[r][col] / M[col][col]
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
    w = [M[r][size] / M[r][r] for r in range(size)]
    return np.array(offs), np.array([float(v) for v in w])


def _derivative_matrix(k: int, n: int, dx: float) -> sp.csr_matrix:
    offs, w = central_difference(k)
    diags = [np.full(n - abs(o), wi / dx ** k) for o, wi in zip(offs, w)]
    return sp.diags(diags, list(offs), shape=(n, n), format="csr")


def series_moments(nu: LevyMeasureSpec, K: int, jump_cutoff: float):
    """M_1 over |r| >= cutoff, M_k over all r for k >= 2."""
    out = [0.0] * (K + 1)
    out[1] = nu.signed_moment(1, ("outer", jump_cutoff))
    for k in range(2, K + 1):
        m = nu.signed_moment(k, ("inner", math.inf))
        if not math.isfinite(m):
            raise DomainError(f"the Levy measure has no finite moment of order {k}; "
                              f"the series operator needs all moments up to K")
        out[k] = m
    return out


def _series_terms(coeffs, grid, t, nu, K, jump_cutoff):
    grid = _as_grid(grid)
    if not SERIES_ORDER_RANGE[0] <= K <= SERIES_ORDER_RANGE[1]:
        raise DomainError(f"series order K must lie in {SERIES_ORDER_RANGE}")
    h = _coef(coeffs.h, grid.x, t, "h")
    mom = series_moments(nu, K, jump_cutoff)
    terms = []
    for k in range(1, K + 1):
        if mom[k] == 0.0:
            terms.append(None)
            continue
        Dk = _derivative_matrix(k, grid.n_x, grid.dx)
        coef = (-1) ** k / math.factorial(k) * mom[k]
        terms.append(coef * (Dk @ sp.diags(h ** k)))
    return terms


def general_series_matrix(coeffs, grid, t, nu, K, jump_cutoff=1.0):
    terms = [T for T in _series_terms(coeffs, grid, t, nu, K, jump_cutoff) if T is not None]
    n = _as_grid(grid).n_x
    out = sp.csr_matrix((n, n))
    for T in terms:
        out = out + T
    return out.tocsr()


def general_series_apply(g, coeffs: CoefficientField, t: float, spec, K: int, grid,
                         jump_cutoff: Optional[float] = None, return_flag: bool = False):
    """Truncated derivative series; warns when the K-th term outgrows the previous one."""
    nu = spec.levy_measure if hasattr(spec, "levy_measure") else spec
    if jump_cutoff is None:
        jump_cutoff = getattr(spec, "jump_cutoff", 1.0)
    g = np.asarray(g, dtype=float)
    terms = _series_terms(coeffs, grid, t, nu, K, jump_cutoff)
    vals = [np.zeros_like(g) if T is None else T @ g for T in terms]
    out = np.sum(vals, axis=0)
    # compare the last two nonvanishing orders
    norms = [float(np.max(np.abs(v))) for v, T in zip(vals, terms) if T is not None]
    flag = len(norms) >= 2 and norms[-1] > norms[-2]
    if flag:
        warnings.warn(f"series truncated at K={K} is not decreasing; raise K or refine the grid",
                      SeriesTruncationWarning, stacklevel=2)
    return (out, flag) if return_flag else out


# ---------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class SpatialOperatorConfig:
    variant: str = NO_JUMP
    alpha: Optional[float] = None                  # stable_jump
    measure: Optional[LevyMeasureSpec] = None      # symmetric_jump / general_series
    series_order: int = 6
    jump_cutoff: float = 1.0
    jump_form: str = POINTWISE                     # symmetric_jump only
    stable_sign: str = ABSOLUTE                    # stable_jump only

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown FPE variant {self.variant!r}")
        if self.variant == STABLE_JUMP:
            if self.alpha is None:
                raise ContractError("stable_jump needs alpha")
            _check_alpha(self.alpha)
        if self.variant in (SYMMETRIC_JUMP, GENERAL_SERIES) and self.measure is None:
            raise ContractError(f"{self.variant} needs a Levy measure")
        if self.jump_form not in JUMP_FORMS:
            raise ContractError(f"unknown jump form {self.jump_form!r}")
        if self.stable_sign not in STABLE_SIGNS:
            raise ContractError(f"unknown stable multiplier {self.stable_sign!r}")
        if self.variant == SYMMETRIC_JUMP and not self.measure.symmetric:
            raise ContractError("symmetric_jump needs a symmetric Levy measure")
        if self.variant == GENERAL_SERIES and not (
                SERIES_ORDER_RANGE[0] <= self.series_order <= SERIES_ORDER_RANGE[1]):
            raise DomainError(f"series order K must lie in {SERIES_ORDER_RANGE}")


def spatial_operator(cfg: SpatialOperatorConfig, coeffs: CoefficientField, grid, t: float):
    """L_x at time t as a sparse or dense matrix."""
    grid = _as_grid(grid)
    A = drift_diffusion_matrix(coeffs, grid, t)
    if cfg.variant == NO_JUMP or constant_value(coeffs.h) == 0.0:
        return A
    if cfg.variant == STABLE_JUMP:
        m = stable_multiplier(coeffs, grid, t, cfg.alpha, cfg.stable_sign == SIGNED)
        J = frac_laplacian_matrix(cfg.alpha, grid) * m[None, :]
        return J + A.toarray()
    if cfg.variant == SYMMETRIC_JUMP:
        return symmetric_jump_matrix(coeffs, grid, t, cfg.measure, cfg.jump_form) + A.toarray()
    return (A + general_series_matrix(coeffs, grid, t, cfg.measure, cfg.series_order,
                                      cfg.jump_cutoff)).tocsr()


def _gershgorin(A) -> float:
    if sp.issparse(A):
        return float(np.max(np.asarray(abs(A).sum(axis=1)).ravel()))
    return float(np.max(np.abs(A).sum(axis=1)))


def series_growth_rate(A) -> float:
    """Largest real part in the spectrum of L_x.

    A positive value means the truncated series amplifies grid-scale modes:
    the top term (r h d/dx)**K / K! has a positive symbol when K is a
    multiple of 4, and no time step makes the problem well posed.
    """
    dense = A.toarray() if sp.issparse(A) else np.asarray(A)
    return float(np.max(np.linalg.eigvals(dense).real))


def stability_number(A, dt: float, w0: float) -> float:
    """dt * w0 * (max absolute row sum) / 4; the explicit scheme needs <= 0.4.

    For pure diffusion this is dt**alpha * max(sigma**2 / 2) / dx**2.
    """
    return dt * w0 * _gershgorin(A) / 4.0


@dataclass
class FpeState:
    grid: Grid
    dt: float
    times: np.ndarray
    snapshots: np.ndarray                         # (len(times), n_x)
    ledger: np.ndarray                            # rows: step, t, interior, outflow, total
    scheme: str
    history: Optional[np.ndarray] = field(default=None, repr=False)

    def density(self, t: float) -> DensityEstimate:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ContractError(f"no stored solution at t={t}")
        q = self.snapshots[k]
        dx = self.grid.dx
        return DensityEstimate(self.grid, q.copy(), "fpe", 0, None,
                               1.0 - float(q.sum() * dx))


def initial_condition(grid: Grid, kind: str = "delta") -> np.ndarray:
    q = np.zeros(grid.n_x)
    if kind == "delta":
        q[grid.nearest(0.0)] = 1.0 / grid.dx
    elif kind == "gaussian":
        w = 2.0 * grid.dx
        q = np.exp(-0.5 * (grid.x / w) ** 2)
        q /= q.sum() * grid.dx
    else:
        raise ContractError(f"unknown initial condition {kind!r}")
    return q


class _Stepper:
    """Solves (I - c A) x = b, refactoring only when A changes."""

    def __init__(self, c):
        self.c = c
        self.key = None
        self.solve = None

    def update(self, A, key):
        if key == self.key and self.solve is not None:
            return
        n = A.shape[0]
        if sp.issparse(A):
            lu = spla.splu((sp.identity(n, format="csc") - self.c * A).tocsc())
            self.solve = lu.solve
        else:
            lu = scipy.linalg.lu_factor(np.eye(n) - self.c * A)
            self.solve = lambda b: scipy.linalg.lu_solve(lu, b)
        self.key = key


def solve_fpe(cfg: SpatialOperatorConfig, coeffs: CoefficientField,
              memory: DiscreteMemoryOperator, grid, t_end: float, times=None,
              scheme: str = IMPLICIT, initial: str = "delta",
              keep_history: bool = False) -> FpeState:
    """March q from the initial condition to ``t_end`` with step ``memory.dt``.

    explicit:  q^{n+1} = q^n + dt A (Phi q)^n
    implicit:  q^{n+1} = q^n + dt A (Phi q)^{n+1}, solved for q^{n+1}

    where (Phi q)^n = sum_m w_m q^{n-m}, with the weight on q^0 taken from
    ``memory.first_weights``.  The mass ledger records interior
    mass and the cumulative outflow dt dx (-1^T A)(Phi q); any unbooked change
    above 1e-6 raises :class:`IntegrityError`.
    """
    grid = _as_grid(grid)
    dt = memory.dt
    n_steps = int(round(t_end / dt))
    if n_steps < 1 or abs(n_steps * dt - t_end) > 1e-9 * t_end:
        raise ConfigError("t_end must be a positive multiple of dt", [("grid.t_end", "not a multiple of dt")])
    times = np.array([t_end] if times is None else times, dtype=float)
    steps_out = np.rint(times / dt).astype(int)
    if np.any(np.abs(steps_out * dt - times) > 1e-9 * np.maximum(times, 1.0)) or np.any(steps_out < 0) \
            or np.any(steps_out > n_steps):
        raise ConfigError("observation times must be multiples of dt within (0, t_end]",
                          [("grid.times", "not on the time grid")])
    if scheme not in (EXPLICIT, IMPLICIT):
        raise ContractError(f"unknown scheme {scheme!r}")

    dx = grid.dx
    w = memory.weights(n_steps + 2)
    # weight on q^0 differs from w for product-integration memory
    w_first = np.asarray(memory.first_weights(n_steps + 2)) - w
    tdep = coeffs.time_dependent()
    A = spatial_operator(cfg, coeffs, grid, 0.0)
    if scheme == EXPLICIT:
        sn = stability_number(A, dt, w[0])
        if sn > STABILITY_LIMIT:
            raise StabilityError(
                f"explicit step too large: stability number {sn:.3g} > {STABILITY_LIMIT}; "
                f"reduce dt or use the implicit scheme",
                [("grid.dt", f"stability number {sn:.3g} exceeds {STABILITY_LIMIT}")])

    if cfg.variant == STABLE_JUMP and cfg.stable_sign == SIGNED and \
            np.any(_coef(coeffs.h, grid.x, 0.0, "h") < 0):
        raise StabilityError(
            "the signed stable multiplier is negative where h < 0, which makes the "
            "equation anti-diffusive; use the absolute multiplier",
            [("solver.stable_sign", "signed multiplier with negative h")])
    if cfg.variant == GENERAL_SERIES and constant_value(coeffs.h) != 0.0:
        growth = series_growth_rate(A)
        if growth > 1e-9 * _gershgorin(A):
            raise StabilityError(
                f"the series operator with K={cfg.series_order} has growing modes "
                f"(rate {growth:.3g}); use K = 6 or 10, a smaller h or a coarser grid",
                [("solver.series_order", f"K={cfg.series_order} is anti-diffusive on this grid")])

    memoryless = not np.any(w[1:]) and not np.any(w_first)
    Q = np.zeros((n_steps + 1, grid.n_x))
    Q[0] = initial_condition(grid, initial)
    ledger = np.zeros((n_steps + 1, 5))
    mass0 = float(Q[0].sum() * dx)
    ledger[0] = (0, 0.0, mass0, 0.0, mass0)
    outflow = 0.0
    stepper = _Stepper(dt * w[0])
    colsum = None

    def phi_history(n_new, include_current):
        # sum_{m >= start} w_m q^{n_new - m}
        start = 0 if include_current else 1
        if memoryless:
            return Q[n_new] * w[0] if include_current else np.zeros(grid.n_x)
        idx = np.arange(n_new - start, -1, -1)
        out = w[start: n_new + 1] @ Q[idx]
        if n_new >= start and w_first[n_new]:
            out += w_first[n_new] * Q[0]
        return out

    for n in range(n_steps):
        t_op = (n + 1) * dt if scheme == IMPLICIT else n * dt
        if tdep or colsum is None:
            if tdep:
                A = spatial_operator(cfg, coeffs, grid, t_op)
            colsum = np.asarray(A.sum(axis=0)).ravel()
        if scheme == EXPLICIT:
            phi = phi_history(n, True)
            Q[n + 1] = Q[n] + dt * (A @ phi)
        else:
            hist = phi_history(n + 1, False)
            rhs = Q[n] + dt * (A @ hist)
            stepper.update(A, t_op if tdep else 0.0)
            Q[n + 1] = stepper.solve(rhs)
            phi = w[0] * Q[n + 1] + hist
        flux = -dt * dx * float(colsum @ phi)
        outflow += flux
        interior = float(Q[n + 1].sum() * dx)
        drift = interior - ledger[n, 2] + flux
        if not np.all(np.isfinite(Q[n + 1])) or abs(drift) > MASS_TOLERANCE:
            raise IntegrityError(f"mass ledger breached at step {n + 1}: unbooked change {drift:.3g}")
        ledger[n + 1] = (n + 1, (n + 1) * dt, interior, outflow, interior + outflow)

    snaps = Q[steps_out].copy()
    return FpeState(grid, dt, times, snaps, ledger, scheme, Q if keep_history else None)
