import math

import numpy as np
import pytest
from scipy import stats

import oracles
from jumptelegraph.switching import (
    DegenerateConditionError,
    DomainError,
    Exponential,
    ExplosionError,
    Gamma,
    Tabulated,
    Weibull,
    SwitchingModel,
    conditional_survival,
    distribution_from_config,
    generate_flow,
    sample_sojourn,
    state_at,
)

DISTS = [
    Exponential(5.0),
    Gamma(2.0, 3.0),
    Weibull(1.5, 0.4),
    Weibull(0.7, 0.5),
    Tabulated(np.array([0.0, 0.2, 0.5, 1.0, 2.0]), np.array([1.0, 0.8, 0.5, 0.2, 0.03])),
]


@pytest.mark.parametrize("dist", DISTS, ids=lambda d: type(d).__name__)
def test_distribution_invariants(dist):
    # grid avoids the knots of the tabulated law, where the density jumps
    t = np.linspace(0.0123, 1.987, 200)
    assert float(dist.survival(0.0)) == pytest.approx(1.0)
    assert np.all(np.diff(dist.survival(t)) <= 1e-15)
    assert float(dist.survival(dist.support_truncation())) < 1e-9
    h = 1e-6
    fd = -(dist.survival(t + h) - dist.survival(t - h)) / (2 * h)
    assert np.allclose(fd, dist.density(t), rtol=1e-6, atol=1e-9)
    assert np.allclose(dist.hazard(t) * dist.survival(t), dist.density(t), rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("dist", DISTS, ids=lambda d: type(d).__name__)
def test_sampler_matches_survival(dist):
    rng = np.random.default_rng(7)
    draws = dist.sample(rng.uniform(1e-12, 1 - 1e-12, 10**5))
    res = stats.kstest(draws, lambda x: 1 - dist.survival(x))
    assert res.pvalue > 0.01


def test_conditional_survival_examples():
    assert conditional_survival(Exponential(5), 0.3, 0.1) == pytest.approx(oracles.EXP_SURVIVAL_RATIO, rel=1e-14)
    g = Gamma(2.0, 1.0)
    assert conditional_survival(g, 0.5 + 1e-12, 0.5) == pytest.approx(1.0, abs=1e-9)
    e = Exponential(2.0)
    for s in (0.0, 0.4, 1.3):
        assert conditional_survival(e, s + 0.7, s) == pytest.approx(float(e.survival(0.7)), rel=1e-12)


def test_conditional_survival_identity():
    for dist in DISTS:
        grid = np.linspace(0, 1.5, 16)
        for i, s in enumerate(grid):
            for t in grid[i + 1:]:
                assert conditional_survival(dist, t, s) * float(dist.survival(s)) == pytest.approx(
                    float(dist.survival(t)), abs=1e-12)


def test_conditional_survival_errors():
    with pytest.raises(DomainError):
        conditional_survival(Exponential(1), 0.2, 0.2)
    # survival(9) underflows to exactly 0
    with pytest.raises(DegenerateConditionError):
        conditional_survival(Exponential(1e4), 10.0, 9.0)


def test_sample_sojourn_examples():
    assert sample_sojourn(Exponential(2), 0.5) == pytest.approx(oracles.EXP_MEDIAN_RATE2, rel=1e-12)
    assert sample_sojourn(Exponential(2), 1e-15) == pytest.approx(0.0, abs=1e-14)
    t_star = 0.37
    assert sample_sojourn(Exponential(3), 1 - math.exp(-3 * t_star)) == pytest.approx(t_star, rel=1e-10)
    with pytest.raises(DomainError):
        sample_sojourn(Exponential(1), 1.0)


def test_flow_poisson_count():
    model = SwitchingModel(Exponential(5), Exponential(5))
    counts = np.array([generate_flow(model, 10.0, 3, r).n_switches for r in range(10**4)])
    se = counts.std(ddof=1) / math.sqrt(len(counts))
    assert abs(counts.mean() - 50) <= 3 * se
    # chi-square goodness of fit against Poisson(50), tails pooled
    edges = np.arange(30, 72)
    obs = np.array([np.sum(counts < edges[0])] + [np.sum(counts == k) for k in edges[:-1]] + [np.sum(counts >= edges[-1])])
    p = np.concatenate([[stats.poisson.cdf(edges[0] - 1, 50)], stats.poisson.pmf(edges[:-1], 50),
                        [stats.poisson.sf(edges[-1] - 1, 50)]])
    chi = np.sum((obs - len(counts) * p) ** 2 / (len(counts) * p))
    assert stats.chi2.sf(chi, len(obs) - 1) > 0.01


def test_flow_determinism_and_empty():
    model = SwitchingModel(Exponential(1.0), Gamma(2.0, 2.0), 1)
    a = generate_flow(model, 5.0, 42)
    b = generate_flow(model, 5.0, 42)
    assert np.array_equal(a.switch_times, b.switch_times)
    assert a.prev_sojourn_T0 == b.prev_sojourn_T0
    slow = SwitchingModel(Exponential(1e-6), Exponential(1e-6))
    f = generate_flow(slow, 0.01, 1)
    assert f.n_switches == 0 and len(f.switch_times) == 0


def test_flow_invariants_random_models():
    rng = np.random.default_rng(1)
    for r in range(1000):
        d0 = Exponential(rng.uniform(0.5, 20))
        d1 = Gamma(rng.uniform(0.5, 3), rng.uniform(1, 20))
        model = SwitchingModel(d0, d1, int(rng.integers(2)))
        f = generate_flow(model, 2.0, 17, r)
        assert np.all(f.sojourns > 0)
        assert np.array_equal(np.cumsum(f.sojourns)[: f.n_switches], f.switch_times)
        assert np.all(f.switch_times <= f.horizon)
        last = f.switch_times[-1] if f.n_switches else 0.0
        assert last + f.censored_sojourn > f.horizon
        for n in range(f.n_switches + 1):
            assert f.state_of_segment(n) == model.initial_state ^ (n % 2)


def test_prev_sojourn_modes():
    model = SwitchingModel(Exponential(1.0), Exponential(100.0), 0)
    T0 = np.array([generate_flow(model, 0.1, 5, r).prev_sojourn_T0 for r in range(4000)])
    # sampled from the law of state 1 (mean 0.01)
    assert abs(T0.mean() - 0.01) < 3 * 0.01 / math.sqrt(len(T0))
    fixed = SwitchingModel(Exponential(1.0), Exponential(1.0), 0, prev_sojourn=0.25)
    assert generate_flow(fixed, 1.0, 1).prev_sojourn_T0 == 0.25


def test_explosion_guard():
    model = SwitchingModel(Exponential(1e6), Exponential(1e6))
    with pytest.raises(ExplosionError):
        generate_flow(model, 1.0, 1, max_switches=1000)


def test_state_at():
    model = SwitchingModel(Exponential(3.0), Exponential(3.0), 0)
    f = generate_flow(model, 5.0, 11)
    assert f.n_switches >= 2
    assert state_at(f, 0.0) == (0, 0.0, 0.0)
    tau1 = f.switch_times[0]
    st, last, el = state_at(f, tau1)
    assert st == 1 and last == tau1 and el == 0.0
    st, last, el = state_at(f, tau1 * 0.99)
    assert st == 0 and el == pytest.approx(tau1 * 0.99)
    with pytest.raises(DomainError):
        state_at(f, 5.5)


def test_config_round_trip():
    for d in DISTS:
        back = distribution_from_config(d.to_config())
        t = np.linspace(0, 1, 11)
        assert np.allclose(back.survival(t), d.survival(t), rtol=1e-9)
    with pytest.raises(DomainError):
        Tabulated(np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.5, 0.5]))
