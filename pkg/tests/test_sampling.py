import math

import numpy as np
import pytest
from scipy import stats

from fracfpe.errors import DomainError, ResourceError
from fracfpe.levy import JumpNoiseSpec, LevyMeasureSpec, levy_symbol
from fracfpe.rng import RandomStream
from fracfpe.sampling import (brownian_increment, default_small_jump_cutoff,
                              stable_subordinator_increment, symmetric_stable_increment,
                              tempered_stable_increment, truncated_symmetric_levy_increment)

N = 100_000


def within_se(samples, target, k=4.0):
    m = np.mean(samples)
    se = np.std(samples, ddof=1) / math.sqrt(samples.size)
    return abs(m - target) <= k * se, (m, target, se)


# ---- streams ----------------------------------------------------------------

def test_streams_are_deterministic():
    a = RandomStream(42, 7).uniform(1000)
    b = RandomStream(42, 7).uniform(1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RandomStream(42, 8).uniform(1000))
    assert not np.array_equal(a, RandomStream(43, 7).uniform(1000))


def test_split_draws_equal_one_block():
    s = RandomStream(3, 1)
    parts = np.concatenate([s.normal(10), s.normal(990)])
    assert np.array_equal(parts, RandomStream(3, 1).normal(1000))


def test_uniforms_in_open_unit_interval():
    u = RandomStream(0, 0).uniform(N)
    assert u.min() > 0 and u.max() < 1
    assert stats.kstest(u, "uniform").pvalue > 1e-3


def test_distinct_streams_uncorrelated():
    a = RandomStream(0, 0).normal(N)
    b = RandomStream(0, 1).normal(N)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01
    c = RandomStream(0, 0, lane=1).normal(N)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.01


# ---- stable subordinator ----------------------------------------------------

@pytest.mark.parametrize("u", [0.5, 1.0, 2.0])
def test_stable_subordinator_laplace(u):
    t = stable_subordinator_increment(0.5, 1.0, RandomStream(1, 0), N)
    ok, info = within_se(np.exp(-u * t), math.exp(-u ** 0.5))
    assert ok, info


def test_stable_subordinator_positive():
    t = stable_subordinator_increment(0.3, 1e-3, RandomStream(2, 0), N)
    assert np.all(t > 0)


def test_stable_subordinator_self_similarity():
    a = stable_subordinator_increment(0.5, 2.0, RandomStream(5, 0), N)
    b = stable_subordinator_increment(0.5, 1.0, RandomStream(5, 1), N) * 2.0 ** (1 / 0.5)
    assert stats.ks_2samp(a, b).statistic <= 0.01


def test_stable_subordinator_rejects_bad_alpha():
    with pytest.raises(DomainError):
        stable_subordinator_increment(1.0, 1.0, RandomStream(0))
    with pytest.raises(DomainError):
        stable_subordinator_increment(0.5, 0.0, RandomStream(0))


# ---- tempered ---------------------------------------------------------------

@pytest.mark.parametrize("u", [0.5, 1.0, 2.0])
def test_tempered_laplace(u):
    a, lam = 0.5, 1.0
    t = tempered_stable_increment(a, lam, 1.0, RandomStream(11, 0), N)
    assert np.all(t > 0)
    ok, info = within_se(np.exp(-u * t), math.exp(-((u + lam) ** a - lam ** a)))
    assert ok, info


def test_tempered_small_lambda_recovers_stable():
    a = tempered_stable_increment(0.6, 1e-8, 1.0, RandomStream(12, 0), N)
    b = tempered_stable_increment(0.6, 0.0, 1.0, RandomStream(12, 1), N)
    assert stats.ks_2samp(a, b).statistic <= 0.01


# ---- symmetric stable -------------------------------------------------------

@pytest.mark.parametrize("u", [0.5, 1.0, 2.0])
def test_symmetric_stable_characteristic_function(u):
    x = symmetric_stable_increment(1.5, 1.0, RandomStream(21, 0), N)
    ok, info = within_se(np.cos(u * x), math.exp(-u ** 1.5))
    assert ok, info


def test_symmetric_stable_median():
    x = symmetric_stable_increment(0.7, 1.0, RandomStream(22, 0), N)
    q75, q25 = np.percentile(x, [75, 25])
    assert abs(np.median(x)) <= 3 * (q75 - q25) / math.sqrt(N)


def test_symmetric_stable_near_gaussian_limit():
    x = symmetric_stable_increment(1.999, 0.5, RandomStream(23, 0), N)
    assert np.var(x) == pytest.approx(2 * 0.5, rel=0.1)


def test_symmetric_stable_rejects_alpha_two():
    with pytest.raises(DomainError):
        symmetric_stable_increment(2.0, 1.0, RandomStream(0))


# ---- truncated symmetric noise ----------------------------------------------

def test_truncated_compensator_is_zero():
    spec = JumpNoiseSpec(LevyMeasureSpec.truncated_symmetric_stable(1.5, 2.0))
    _, drift = truncated_symmetric_levy_increment(spec, 0.1, 0.05, RandomStream(0), 10)
    assert drift == 0.0


@pytest.mark.parametrize("u", [0.5, 1.0])
def test_truncated_characteristic_function(u):
    spec = JumpNoiseSpec(LevyMeasureSpec.truncated_symmetric_stable(1.5, 2.0))
    dt = 1.0
    eps = default_small_jump_cutoff(spec.levy_measure, dt)
    x, _ = truncated_symmetric_levy_increment(spec, dt, eps, RandomStream(31, 0), N)
    ok, info = within_se(np.cos(u * x), math.exp(dt * levy_symbol(spec, u).real))
    assert ok, info


def test_truncated_jump_counts_are_poisson():
    nu = LevyMeasureSpec.truncated_symmetric_stable(1.5, 2.0)
    spec = JumpNoiseSpec(nu)
    eps = 0.9
    mean = 3.0
    dt = mean / nu.mass_outside(eps)
    _, _, counts = truncated_symmetric_levy_increment(
        spec, dt, eps, RandomStream(32, 0), 20_000, gaussian_correction=False,
        return_counts=True)
    kmax = 10
    obs = np.bincount(np.minimum(counts, kmax), minlength=kmax + 1)
    p = stats.poisson.pmf(np.arange(kmax), mean)
    p = np.append(p, 1 - p.sum())
    assert stats.chisquare(obs, p * counts.size).pvalue > 0.01


def test_truncated_jump_sizes_respect_support():
    nu = LevyMeasureSpec.truncated_symmetric_stable(1.2, 0.5)
    x, _ = truncated_symmetric_levy_increment(JumpNoiseSpec(nu), 1e-3, 0.1, RandomStream(33),
                                              N, gaussian_correction=False)
    # at most a handful of jumps per draw, each of size below r_max
    assert np.max(np.abs(x)) < 5 * 0.5


def test_truncated_cutoff_checks():
    spec = JumpNoiseSpec(LevyMeasureSpec.truncated_symmetric_stable(1.5, 2.0))
    with pytest.raises(DomainError):
        truncated_symmetric_levy_increment(spec, 0.1, 1.5, RandomStream(0))
    with pytest.raises(ResourceError):
        truncated_symmetric_levy_increment(spec, 1e3, 1e-9, RandomStream(0))


def test_default_cutoff_variance_fraction():
    nu = LevyMeasureSpec.truncated_symmetric_stable(1.2, 2.0)
    eps = default_small_jump_cutoff(nu, 1.0, max_mean_jumps=math.inf)
    small = nu.second_moment_below(eps)
    total = nu.second_moment_below(2.0)
    assert small / total == pytest.approx(1e-4, rel=1e-9)
    capped = default_small_jump_cutoff(nu, 1.0, max_mean_jumps=100.0)
    assert nu.mass_outside(capped) == pytest.approx(100.0, rel=1e-9)


# ---- Brownian ---------------------------------------------------------------

def test_brownian_moments():
    dt = 0.25
    x = brownian_increment(dt, RandomStream(41, 0), N)
    ok, info = within_se(x, 0.0)
    assert ok, info
    ok, info = within_se(x * x, dt)
    assert ok, info
