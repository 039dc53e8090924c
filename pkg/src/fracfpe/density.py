"""Density estimates on a uniform grid and distances between them.

Grid node i sits at x_min + i * dx and owns the cell [x_i - dx/2, x_i + dx/2].
Both estimators report the probability mass that fell outside the cells
instead of renormalising, so that a truncated FPE solution and a Monte Carlo
estimate see the same truncation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .errors import ContractError, DomainError

HISTOGRAM = "histogram"
KDE = "kde"
# Gaussian kernel support used by the cell-averaged KDE, in bandwidths
_KDE_REACH = 9.0
NEGATIVE_ROUNDOFF = 1e-12


@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    n_x: int

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.n_x >= 2):
            raise ContractError("grid needs x_max > x_min and n_x >= 2")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def x(self) -> np.ndarray:
        return self.x_min + np.arange(self.n_x) * self.dx

    @property
    def edges(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_x + 1) - 0.5) * self.dx

    def nearest(self, x0: float = 0.0) -> int:
        return int(np.clip(np.rint((x0 - self.x_min) / self.dx), 0, self.n_x - 1))


@dataclass
class DensityEstimate:
    grid: Grid
    values: np.ndarray
    method: str
    n_samples: int = 0
    bandwidth: Optional[float] = None
    out_of_range: float = 0.0
    stderr: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def x(self):
        return self.grid.x

    @property
    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.dx)


def silverman_bandwidth(samples) -> float:
    """1.06 * min(sd, IQR / 1.34) * N**(-1/5), ignoring a zero spread measure."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise DomainError("KDE needs at least two samples")
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25) / 1.34
    spread = [s for s in (sd, iqr) if s > 0 and math.isfinite(s)]
    if not spread:
        raise DomainError("degenerate bandwidth: all samples are identical")
    return 1.06 * min(spread) * x.size ** (-0.2)


@numba.njit(cache=True)
def _kde_cells(x, edges, b, mass, sq):
    """Accumulate per-sample cell masses and their squares; returns total outside mass."""
    n_cells = edges.size - 1
    e0 = edges[0]
    de = edges[1] - edges[0]
    c = 1.0 / (b * math.sqrt(2.0))
    outside = 0.0
    reach = _KDE_REACH * b
    for s in range(x.size):
        xs = x[s]
        lo = int(math.floor((xs - reach - e0) / de))
        hi = int(math.ceil((xs + reach - e0) / de))
        lo = max(lo, 0)
        hi = min(hi, n_cells)
        inside = 0.0
        if lo < hi:
            prev = 0.5 * math.erfc((xs - edges[lo]) * c)
            for i in range(lo, hi):
                cur = 0.5 * math.erfc((xs - edges[i + 1]) * c)
                m = cur - prev
                mass[i] += m
                sq[i] += m * m
                inside += m
                prev = cur
        outside += 1.0 - inside
    return outside


def estimate_density(samples, grid: Grid, method: str = KDE,
                     bandwidth: Optional[float] = None) -> DensityEstimate:
    """Histogram (counts / (N dx)) or cell-averaged Gaussian KDE on ``grid``.

    The KDE integrates each sample's kernel exactly over every cell, so
    sum(q) * dx plus ``out_of_range`` equals one.  ``stderr`` holds pointwise
    Monte Carlo standard errors of q.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise DomainError("no samples")
    dx = grid.dx
    edges = grid.edges
    if method == HISTOGRAM:
        idx = np.floor((x - edges[0]) / dx).astype(np.int64)
        ok = (idx >= 0) & (idx < grid.n_x)
        counts = np.bincount(idx[ok], minlength=grid.n_x).astype(float)
        p = counts / n
        values = p / dx
        se = np.sqrt(p * (1.0 - p) / n) / dx
        out = (n - int(ok.sum())) / n
        return DensityEstimate(grid, values, HISTOGRAM, n, None, out, se)
    if method != KDE:
        raise ContractError(f"unknown density method {method!r}")
    if n < 2:
        raise DomainError("KDE needs at least two samples")
    b = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not b > 0:
        raise DomainError("bandwidth must be positive")
    mass = np.zeros(grid.n_x)
    sq = np.zeros(grid.n_x)
    outside = _kde_cells(np.sort(x), edges, b, mass, sq)
    p = mass / n
    var = np.maximum(sq / n - p * p, 0.0) / n
    return DensityEstimate(grid, p / dx, KDE, n, b, outside / n, np.sqrt(var) / dx)


def _check_same_grid(a: DensityEstimate, b: DensityEstimate):
    if a.grid != b.grid:
        raise ContractError(f"grid mismatch: {a.grid} vs {b.grid}")


def l1_distance(a: DensityEstimate, b: DensityEstimate) -> float:
    """sum |a_i - b_i| dx on a shared grid."""
    _check_same_grid(a, b)
    return float(np.sum(np.abs(a.values - b.values)) * a.grid.dx)


def l1_standard_error(a: DensityEstimate, b: DensityEstimate) -> float:
    """Monte Carlo standard error scale of the L1 gap: sum sqrt(se_a**2 + se_b**2) dx."""
    _check_same_grid(a, b)
    sa = np.zeros(a.grid.n_x) if a.stderr is None else a.stderr
    sb = np.zeros(b.grid.n_x) if b.stderr is None else b.stderr
    return float(np.sum(np.sqrt(sa * sa + sb * sb)) * a.grid.dx)


def grid_cdf(est: DensityEstimate):
    """Nodes and cumulative node masses; the CDF interpolates linearly between nodes."""
    return est.grid.x, np.cumsum(est.values) * est.grid.dx


def _cdf_at(est, x):
    nodes, cum = grid_cdf(est)
    f = np.interp(x, nodes, cum)
    return np.where(x < nodes[0], 0.0, f)


def ks_distance(samples, est: DensityEstimate) -> float:
    """max over sample points of |ECDF - F| with the right-continuous ECDF.

    Negative values at roundoff level (above -1e-12 times the peak) count as
    zero; anything more negative is a contract violation.
    """
    q = est.values
    floor = -NEGATIVE_ROUNDOFF * float(np.max(np.abs(q))) if q.size else 0.0
    if np.any(q < floor):
        raise ContractError("grid solution must be nonnegative")
    if np.any(q < 0):
        est = DensityEstimate(est.grid, np.maximum(q, 0.0), est.method, est.n_samples,
                              est.bandwidth, est.out_of_range)
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise DomainError("no samples")
    ecdf = np.searchsorted(x, x, side="right") / n
    return float(np.max(np.abs(ecdf - _cdf_at(est, x))))


def sample_from_grid(est: DensityEstimate, u) -> np.ndarray:
    """Inverse of the grid CDF used by :func:`ks_distance` (for uniforms ``u``)."""
    nodes, cum = grid_cdf(est)
    u = np.asarray(u, dtype=float) * cum[-1]
    j = np.searchsorted(cum, u, side="left")
    j = np.clip(j, 0, nodes.size - 1)
    lo = np.maximum(j - 1, 0)
    c_lo = np.where(j == 0, 0.0, cum[lo])
    width = cum[j] - c_lo
    frac = np.where(width > 0, (u - c_lo) / np.where(width > 0, width, 1.0), 1.0)
    return np.where(j == 0, nodes[0], nodes[lo] + frac * (nodes[j] - nodes[lo]))


def empirical_moment(samples, k: int):
    """(mean of x**k, its standard error)."""
    if int(k) != k or k < 1:
        raise DomainError("moment order must be a positive integer")
    v = np.asarray(samples, dtype=float).ravel() ** int(k)
    n = v.size
    se = float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(v)), se


def grid_moment(est: DensityEstimate, k: int) -> float:
    return float(np.sum(est.x ** k * est.values) * est.grid.dx)
