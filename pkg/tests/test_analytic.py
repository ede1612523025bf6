import math

import numpy as np
import pytest
from scipy import stats

import oracles
from jumptelegraph.analytic import (
    ClosedFormExp,
    MatrixExpLambda,
    MethodMismatchError,
    VolterraPairProblem,
    closed_form_mean_exp,
    conditional_mean,
    density_surface,
    mc_density,
    mean_curves,
    mean_forcing,
    phi_lambda,
    solve_volterra_pair,
    uniform_grid,
    variance_curves,
)
from jumptelegraph.process import (
    Constant,
    FunctionVelocity,
    JumpProfile,
    RegimeAverages,
    RegimeSpec,
    simulate_batch,
)
from jumptelegraph.switching import DomainError, Exponential, Gamma, SwitchingModel, Weibull

FIG1 = RegimeSpec.constant((1.0, -1.0), (-0.05, 0.05))
FIG1_D = (Exponential(5.0), Exponential(5.0))
FIG3 = RegimeSpec.constant((1.2, 0.6), (-0.05, -0.02))
FIG3_D = (Exponential(15.0), Exponential(15.0))


def test_phi_lambda_examples():
    assert phi_lambda(5.0, 0.0) == 0.0
    assert phi_lambda(5.0, 1e3) == pytest.approx(0.1, rel=1e-14)
    assert phi_lambda(5.0, 0.1) == pytest.approx(oracles.PHI_LAMBDA_5_01, rel=1e-12)
    # no cancellation at tiny t
    assert phi_lambda(5.0, 1e-12) == pytest.approx(1e-12, rel=1e-9)
    with pytest.raises(DomainError):
        phi_lambda(0.0, 1.0)


def test_matrix_exp_semigroup_and_stochastic():
    rng = np.random.default_rng(3)
    for _ in range(200):
        l0, l1 = rng.uniform(0.1, 40, 2)
        s, t = rng.uniform(0, 2, 2)
        M = MatrixExpLambda(l0, l1)
        assert np.allclose(M(s) @ M(t), M(s + t), atol=1e-12, rtol=0)
        P = M(t)
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-14)
        assert np.all(P >= -1e-15) and np.all(P <= 1 + 1e-15)
    assert np.array_equal(MatrixExpLambda(2.0, 3.0)(0.0), np.eye(2))


def test_mean_forcing_examples():
    t = np.linspace(0, 2, 41)
    a0, a1 = mean_forcing(FIG3, FIG3_D, t)
    assert np.allclose(a0, oracles.exp_forcing(1.2, -0.05, 15, t), atol=1e-13)
    assert np.allclose(a1, oracles.exp_forcing(0.6, -0.02, 15, t), atol=1e-13)
    mart = RegimeSpec.constant((0.25, -0.4), (-0.05, 0.05))
    m0, m1 = mean_forcing(mart, (Exponential(5.0), Exponential(8.0)), t)
    assert np.max(np.abs(m0)) < 1e-14 and np.max(np.abs(m1)) < 1e-14
    c0, c1 = mean_forcing(FIG3, FIG3_D, t, s=0.0)
    assert np.allclose(c0, a0, atol=1e-14) and np.allclose(c1, a1, atol=1e-14)


def test_volterra_uncoupled_and_linear():
    grid = uniform_grid(1.0, 1e-2)
    # a rate this small makes the kernels vanish to round-off
    dists = (Exponential(1e-300), Exponential(1e-300))
    g = (np.sin(grid), grid**2)
    u0, u1 = solve_volterra_pair(VolterraPairProblem(dists, g, grid))
    assert np.allclose(u0, g[0], atol=1e-250) and np.allclose(u1, g[1], atol=1e-250)

    dists = (Gamma(2.0, 5.0), Weibull(1.3, 0.4))
    rng = np.random.default_rng(5)
    ga = (rng.normal(size=len(grid)), rng.normal(size=len(grid)))
    gb = (np.cos(grid), np.exp(-grid))
    ua = solve_volterra_pair(VolterraPairProblem(dists, ga, grid))
    ub = solve_volterra_pair(VolterraPairProblem(dists, gb, grid))
    us = solve_volterra_pair(VolterraPairProblem(dists, (ga[0] + gb[0], ga[1] + gb[1]), grid))
    for i in (0, 1):
        assert np.allclose(us[i], ua[i] + ub[i], atol=1e-12, rtol=0)


def test_zero_forcing_iff_zero_mean():
    dists = (Gamma(2.0, 5.0), Exponential(4.0))
    grid = uniform_grid(2.0, 1e-2)
    zero = np.zeros(len(grid))
    u0, u1 = solve_volterra_pair(VolterraPairProblem(dists, (zero, zero), grid))
    assert not np.any(u0) and not np.any(u1)
    bump = zero.copy()
    bump[50:] = 1e-3
    u0, u1 = solve_volterra_pair(VolterraPairProblem(dists, (bump, zero), grid))
    assert np.max(np.abs(u0)) > 0 and np.max(np.abs(u1)) > 0


def test_grid_solver_matches_closed_form_fig3():
    cf = ClosedFormExp(FIG3, FIG3_D, 5.0)
    errs = []
    for dt in (2e-3, 1e-3):
        mc = mean_curves(FIG3, FIG3_D, 5.0, dt)
        ref = cf.mu(mc.t)
        errs.append(max(np.max(np.abs(mc.mu0 - ref[0])), np.max(np.abs(mc.mu1 - ref[1]))))
    assert errs[1] <= 1e-6
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_closed_form_mean_function():
    t = np.linspace(0, 2, 21)
    z = lambda u: np.zeros_like(np.asarray(u, float))
    m0, m1 = closed_form_mean_exp(24.0, 30.0, (z, z), t)
    assert not np.any(m0) and not np.any(m1)
    # matrix factor at zero lag is L itself
    M = MatrixExpLambda(24.0, 30.0)
    assert np.array_equal((np.eye(2) + phi_lambda(M.half_sum, 0.0) * M.generator) @ M.L, M.L)
    fig4 = RegimeSpec.constant((0.6, -0.5), (-0.05, 0.04))
    d = (Exponential(24.0), Exponential(30.0))
    a = (lambda u: oracles.exp_forcing(0.6, -0.05, 24.0, u), lambda u: oracles.exp_forcing(-0.5, 0.04, 30.0, u))
    c0, c1 = closed_form_mean_exp(24.0, 30.0, a, t)
    grid = mean_curves(fig4, d, 2.0, 1e-3)
    idx = np.searchsorted(grid.t, t - 1e-12)
    assert np.max(np.abs(grid.mu0[idx] - c0)) < 1e-6
    assert np.max(np.abs(grid.mu1[idx] - c1)) < 1e-6


def test_variance_methods_agree_fig3():
    g = variance_curves(FIG3, FIG3_D, 5.0, 1e-3, method="grid")
    c = variance_curves(FIG3, FIG3_D, 5.0, 1e-3, method="closed_form_exp")
    for i in (0, 1):
        assert np.max(np.abs(g.sigma(i) - c.sigma(i))) < 1e-5
        assert g.sigma(i)[0] == 0 and np.all(g.sigma(i) >= 0)
    with pytest.raises(MethodMismatchError):
        variance_curves(FIG3, (Gamma(2, 30), Exponential(15)), 1.0, method="closed_form_exp")


def test_variance_special_cases():
    zero = RegimeSpec.constant((0.0, 0.0), (0.0, 0.0))
    v = variance_curves(zero, (Gamma(2.0, 4.0), Exponential(3.0)), 1.0, 1e-2)
    assert np.max(np.abs(v.sigma0)) < 1e-15 and np.max(np.abs(v.sigma1)) < 1e-15
    sym = RegimeSpec.constant((1.0, -1.0), (-0.2, 0.2))
    v = variance_curves(sym, (Exponential(5.0), Exponential(5.0)), 2.0, 1e-3)
    assert np.allclose(v.sigma0, v.t / 5, atol=1e-6)
    assert np.allclose(v.sigma1, v.t / 5, atol=1e-6)


def test_variance_exact_vs_literal_modes():
    d = (Gamma(2.0, 6.0), Exponential(4.0))
    ex = variance_curves(FIG3, d, 1.0, 1e-2, mode="exact")
    li = variance_curves(FIG3, d, 1.0, 1e-2, mode="literal")
    assert np.allclose(ex.sigma0, li.sigma0, atol=1e-14)
    # velocity that grows with the previous sojourn: exact second moment is larger
    vel = FunctionVelocity(lambda T, t: 2.0 * T + 0 * t, lambda T, t: 2.0 * T * t)
    reg = RegimeSpec((vel, vel), (JumpProfile(Constant(0.0)),) * 2)
    ex = variance_curves(reg, d, 1.0, 1e-2, mode="exact")
    li = variance_curves(reg, d, 1.0, 1e-2, mode="literal")
    assert np.all(ex.sigma0[1:] > li.sigma0[1:])


def test_mc_variance_fig1():
    v = variance_curves(FIG1, FIG1_D, 2.0, 1e-3)
    times = [0.5, 1.0, 2.0]
    batch = simulate_batch(SwitchingModel(*FIG1_D), FIG1, times, 10**5, seed=101)
    for k, t in enumerate(times):
        x = batch.X[:, k]
        j = int(round(t / 1e-3))
        n = len(x)
        var = x.var(ddof=1)
        se = math.sqrt(max(np.mean((x - x.mean()) ** 4) - var**2, 0) / n)
        assert abs(var - v.sigma0[j]) <= 3 * se


def test_conditional_mean_examples():
    d = (Gamma(2.0, 1.5), Gamma(2.0, 2.0))
    reg = RegimeSpec.constant((1.0, -0.5), (0.1, -0.2))
    t, m0, m1 = conditional_mean(reg, d, 0.2, 2.0, 1e-3)
    for i, m in ((0, m0), (1, m1)):
        for tt in (0.5, 1.0):
            k = int(round((tt - 0.2) / 1e-3))
            ref = oracles.brute_conditional_mean((1.0, -0.5), (0.1, -0.2), d, i, 0.2, tt, depth=4, n=16)
            assert m[k] == pytest.approx(ref, abs=1e-4)
    # s -> 0 is the unconditional mean
    mc = mean_curves(reg, d, 2.0, 1e-3)
    t, c0, c1 = conditional_mean(reg, d, 0.0, 2.0, 1e-3, curves=mc)
    assert np.allclose(c0, mc.mu0, atol=1e-12) and np.allclose(c1, mc.mu1, atol=1e-12)


def test_conditional_mean_martingale_is_flat():
    mart = RegimeSpec.constant((0.25, -0.4), (-0.05, 0.05))
    d = (Exponential(5.0), Exponential(8.0))
    avg = RegimeAverages(mart, d)
    t, m0, m1 = conditional_mean(mart, d, 0.3, 2.0, 1e-3)
    assert np.allclose(m0, float(avg.l_bar(0, 0.3)), atol=1e-8)
    assert np.allclose(m1, float(avg.l_bar(1, 0.3)), atol=1e-8)


def test_density_normalisation_and_atom():
    surf = density_surface(FIG1, FIG1_D, 0.5, dt=2e-3)
    for i in (0, 1):
        assert abs(surf.total_mass(i)[-1] - 1) < 1e-4
    x, m = surf.singular_atoms[0][-1]
    assert x == pytest.approx(0.5) and m == pytest.approx(oracles.ATOM_FIG1_T05, rel=1e-10)
    early = density_surface(FIG1, (Exponential(1e-3), Exponential(1e-3)), 0.1, dt=1e-3)
    assert early.singular_atoms[0][-1][1] > 0.9999


def test_density_rejects_tau_dependent():
    vel = FunctionVelocity(lambda T, t: T + 0 * t)
    reg = RegimeSpec((vel, vel), (JumpProfile(Constant(0.0)),) * 2)
    with pytest.raises(DomainError):
        density_surface(reg, FIG1_D, 0.5)


def test_density_chi_square_vs_mc():
    surf = density_surface(FIG1, FIG1_D, 0.5, dt=2e-3)
    # coarse bins are blocks of 20 solver bins, so no solver bin is split
    inside = np.flatnonzero((surf.x_edges >= -0.6) & (surf.x_edges <= 0.6))
    idx = inside[::20]
    edges = surf.x_edges[idx]
    expect = np.add.reduceat(surf.bin_masses(0)[idx[0]:idx[-1]], idx[:-1] - idx[0])
    mc = mc_density(SwitchingModel(*FIG1_D), FIG1, 0.5, edges, 10**6, seed=77)
    n = mc.n_paths
    # pool sparse tail bins into their neighbours: the scheme smears about one
    # solver bin of mass across the support edges, where the density jumps
    obs, exp_ = mc.counts.astype(float), n * expect
    lo = int(np.argmax(np.cumsum(exp_) >= 1000))
    hi = len(exp_) - 1 - int(np.argmax(np.cumsum(exp_[::-1]) >= 1000))
    pool = lambda v: np.concatenate([[v[: lo + 1].sum()], v[lo + 1:hi], [v[hi:].sum()]])
    obs, exp_ = pool(obs), pool(exp_)
    chi = np.sum((obs - exp_) ** 2 / exp_)
    assert stats.chi2.sf(chi, len(obs) - 1) > 0.01
    assert abs(mc.atom_fraction - oracles.ATOM_FIG1_T05) <= 3 * mc.atom_standard_error


def test_mc_density_symmetry_and_determinism():
    edges = np.linspace(-0.6, 0.6, 25)
    a = mc_density(SwitchingModel(*FIG1_D, 0), FIG1, 0.5, edges, 2 * 10**4, seed=5)
    b = mc_density(SwitchingModel(*FIG1_D, 0), FIG1, 0.5, edges, 2 * 10**4, seed=5)
    assert np.array_equal(a.counts, b.counts)
    x0 = simulate_batch(SwitchingModel(*FIG1_D, 0), FIG1, [0.5], 2 * 10**4, seed=6).X[:, 0]
    x1 = simulate_batch(SwitchingModel(*FIG1_D, 1), FIG1, [0.5], 2 * 10**4, seed=7).X[:, 0]
    assert stats.ks_2samp(x0, -x1).pvalue > 0.01
    with pytest.raises(DomainError):
        mc_density(SwitchingModel(*FIG1_D), FIG1, 0.5, edges, 100, seed=1)
