import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from fracfpe.density import (HISTOGRAM, KDE, DensityEstimate, Grid, empirical_moment,
                             estimate_density, grid_moment, ks_distance, l1_distance,
                             l1_standard_error, sample_from_grid, silverman_bandwidth)
from fracfpe.errors import ContractError, DomainError
from fracfpe.rng import RandomStream

GRID = Grid(-8.0, 8.0, 1601)


def on_grid(grid, q, method="grid"):
    return DensityEstimate(grid, np.asarray(q, dtype=float), method)


def test_grid_geometry():
    g = Grid(-1.0, 1.0, 5)
    assert g.dx == 0.5
    np.testing.assert_allclose(g.x, [-1, -0.5, 0, 0.5, 1])
    np.testing.assert_allclose(g.edges, [-1.25, -0.75, -0.25, 0.25, 0.75, 1.25])
    assert g.nearest(0.1) == 2
    with pytest.raises(ContractError):
        Grid(1.0, 0.0, 10)


def test_histogram_of_constant_samples():
    g = Grid(-1.0, 1.0, 21)
    est = estimate_density(np.full(100, 0.3), g, HISTOGRAM)
    i = g.nearest(0.3)
    assert est.values[i] == pytest.approx(1 / g.dx)
    assert np.count_nonzero(est.values) == 1
    assert est.out_of_range == 0.0


def test_histogram_outside_grid():
    est = estimate_density(np.full(10, 50.0), GRID, HISTOGRAM)
    assert est.mass == 0.0 and est.out_of_range == 1.0


def test_histogram_mass_plus_outside_is_one():
    x = RandomStream(1).normal(10_001) * 3
    est = estimate_density(x, GRID, HISTOGRAM)
    assert est.mass + est.out_of_range == pytest.approx(1.0, abs=1e-12)
    assert 1 - 1e-9 <= est.mass + est.out_of_range <= 1 + 1e-12


def test_kde_of_normal_samples():
    x = RandomStream(2).normal(100_000)
    est = estimate_density(x, GRID, KDE)
    # cell averages of phi differ from point values by O(dx**2)
    assert np.max(np.abs(est.values - stats.norm.pdf(GRID.x))) <= 0.02
    assert est.bandwidth == pytest.approx(silverman_bandwidth(x))


def test_kde_deficit_equals_reported_outside_mass():
    x = RandomStream(3).normal(5000) * 4 + 5
    est = estimate_density(x, GRID, KDE)
    assert est.mass <= 1.0
    assert est.mass + est.out_of_range == pytest.approx(1.0, abs=1e-6)
    assert est.out_of_range > 0.1


def test_kde_degenerate_bandwidth():
    with pytest.raises(DomainError):
        estimate_density(np.ones(50), GRID, KDE)
    with pytest.raises(DomainError):
        estimate_density([0.0], GRID, KDE)
    estimate_density(np.ones(50), GRID, HISTOGRAM)


def test_bandwidth_uses_iqr_for_heavy_tails():
    x = stats.cauchy.rvs(size=20_000, random_state=4)
    q75, q25 = np.percentile(x, [75, 25])
    assert silverman_bandwidth(x) == pytest.approx(1.06 * (q75 - q25) / 1.34 * x.size ** -0.2)


def test_kde_standard_errors_scale_like_root_n():
    a = estimate_density(RandomStream(5).normal(4000), GRID, KDE, bandwidth=0.2)
    b = estimate_density(RandomStream(6).normal(16_000), GRID, KDE, bandwidth=0.2)
    i = GRID.nearest(0.0)
    assert a.stderr[i] / b.stderr[i] == pytest.approx(2.0, rel=0.05)


# ---- distances ---------------------------------------------------------------

def test_l1_identical_and_disjoint():
    g = Grid(0.0, 1.0, 11)
    a = np.zeros(11)
    b = np.zeros(11)
    a[2] = b[7] = 1 / g.dx
    assert l1_distance(on_grid(g, a), on_grid(g, a)) == 0.0
    assert l1_distance(on_grid(g, a), on_grid(g, b)) == pytest.approx(2.0)


def test_l1_of_two_normals_matches_quadrature():
    g = Grid(-8.0, 8.0, 16_001)
    ref, _ = integrate.quad(lambda x: abs(stats.norm.pdf(x) - stats.norm.pdf(x, scale=1.1)),
                            -8, 8, points=[-1.0, 1.0], limit=200)
    got = l1_distance(on_grid(g, stats.norm.pdf(g.x)), on_grid(g, stats.norm.pdf(g.x, scale=1.1)))
    assert got == pytest.approx(ref, rel=1e-5)


def test_l1_grid_mismatch():
    with pytest.raises(ContractError):
        l1_distance(on_grid(Grid(0, 1, 11), np.zeros(11)), on_grid(Grid(0, 1, 12), np.zeros(12)))


def test_l1_standard_error_combines_both_sides():
    g = Grid(0.0, 1.0, 3)
    a = DensityEstimate(g, np.ones(3), KDE, stderr=np.full(3, 3.0))
    b = DensityEstimate(g, np.ones(3), KDE, stderr=np.full(3, 4.0))
    assert l1_standard_error(a, b) == pytest.approx(3 * 5.0 * 0.5)
    assert l1_standard_error(a, on_grid(g, np.ones(3))) == pytest.approx(3 * 3.0 * 0.5)


densities = st.lists(st.floats(0, 10, allow_nan=False), min_size=8, max_size=8)


@settings(max_examples=200, deadline=None)
@given(densities, densities, densities)
def test_l1_is_a_metric(a, b, c):
    g = Grid(0.0, 1.0, 8)
    a, b, c = (on_grid(g, v) for v in (a, b, c))
    ab, ba = l1_distance(a, b), l1_distance(b, a)
    assert ab == ba and ab >= 0
    assert l1_distance(a, c) <= ab + l1_distance(b, c) + 1e-12


def test_ks_on_samples_from_the_grid_solution():
    g = Grid(-6.0, 6.0, 241)
    est = on_grid(g, stats.norm.pdf(g.x) * 0.7 + stats.norm.pdf(g.x, 1.5, 0.5) * 0.3)
    x = sample_from_grid(est, RandomStream(7).uniform(10_000))
    assert ks_distance(x, est) <= 1.63 / math.sqrt(10_000)


def test_ks_point_masses():
    g = Grid(-1.0, 2.0, 4)
    at0 = np.array([0.0, 1.0, 0.0, 0.0])
    at1 = np.array([0.0, 0.0, 1.0, 0.0])
    assert ks_distance(np.zeros(20), on_grid(g, at0)) == pytest.approx(0.0, abs=1e-15)
    assert ks_distance(np.zeros(20), on_grid(g, at1)) == pytest.approx(1.0)


def test_ks_rejects_negative_solution():
    with pytest.raises(ContractError):
        ks_distance([0.0], on_grid(Grid(0, 1, 3), [1.0, -0.1, 1.0]))
    # roundoff-level negatives are treated as zero
    g = Grid(0, 1, 3)
    assert ks_distance([0.5], on_grid(g, [-1e-18, 2.0, 0.0])) == \
        ks_distance([0.5], on_grid(g, [0.0, 2.0, 0.0]))


# ---- moments -----------------------------------------------------------------

def test_empirical_moments():
    assert empirical_moment(np.full(10, 3.0), 2) == (9.0, 0.0)
    x = RandomStream(8).normal(100_000)
    m2, se2 = empirical_moment(x, 2)
    assert abs(m2 - 1) <= 4 * se2
    m1, se1 = empirical_moment(np.concatenate([x, -x]), 1)
    assert abs(m1) <= 4 * se1
    with pytest.raises(DomainError):
        empirical_moment(x, 0)


def test_grid_moment():
    g = Grid(-8.0, 8.0, 1601)
    assert grid_moment(on_grid(g, stats.norm.pdf(g.x, scale=1.3)), 2) == pytest.approx(1.69, rel=1e-6)
