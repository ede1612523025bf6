import math

import numpy as np
import pytest
from scipy import stats

from jumptelegraph.analytic import mean_curves
from jumptelegraph.process import (
    Constant,
    FunctionVelocity,
    Hyperbolic,
    JumpProfile,
    LocalTimeVelocity,
    RegimeSpec,
    Table2DVelocity,
    mean_regime_coefficients,
    path_from_flow,
    regime_from_config,
    segment_displacement,
    simulate_batch,
    simulate_path,
)
from jumptelegraph.switching import Exponential, Gamma, SwitchingModel, generate_flow

FIG1 = RegimeSpec.constant((1.0, -1.0), (-0.05, 0.05))


def tau_regime():
    """Velocity of state 1 grows with the previous sojourn."""
    v1 = FunctionVelocity(lambda T, t: -0.5 - T + 0 * t, lambda T, t: (-0.5 - T) * t)
    return RegimeSpec((LocalTimeVelocity(Constant(1.0)), v1),
                      (JumpProfile(Constant(-0.1)), JumpProfile(Hyperbolic(0.2, 1.0))))


def test_segment_displacement_examples():
    assert segment_displacement(FIG1, 0, 0.3, 0.2, 0.9, 0.1) == pytest.approx(0.7, abs=1e-14)
    fig5 = RegimeSpec.from_profiles((Hyperbolic(1.2, 1.2), Hyperbolic(0.6, 0.6)), (Constant(0.0), Constant(0.0)))
    for t in (0.1, 1.0, 3.0):
        assert segment_displacement(fig5, 0, 0.0, 0.0, t) == pytest.approx(math.log(1 + 1.2 * t), rel=1e-13)
    assert segment_displacement(fig5, 1, 0.0, 0.4, 0.4) == 0.0


def test_segment_displacement_quadrature_path():
    # no antiderivative supplied: adaptive quadrature
    reg = RegimeSpec((FunctionVelocity(lambda T, t: np.cos(3 * t) * (1 + T)),) * 2, (JumpProfile(Constant(0.0)),) * 2)
    val = segment_displacement(reg, 0, 0.5, 0.2, 1.1, 0.1)
    exact = 1.5 * (math.sin(3 * 1.0) - math.sin(3 * 0.1)) / 3
    assert val == pytest.approx(exact, abs=1e-10)


def test_mean_regime_coefficients_examples():
    t = np.linspace(0, 2, 9)
    co = mean_regime_coefficients(FIG1, 0, Exponential(5), t)
    assert np.allclose(co.c_bar, 1.0) and co.l_bar[0] == 0.0
    reg = RegimeSpec((FunctionVelocity(lambda T, tt: T + 0 * tt, lambda T, tt: T * tt),) * 2,
                     (JumpProfile(Constant(0.0)),) * 2)
    co = mean_regime_coefficients(reg, 0, Exponential(4.0), t)
    assert np.allclose(co.c_bar, 0.25, rtol=1e-8)
    assert np.allclose(co.l_bar, 0.25 * t, rtol=1e-8)
    assert np.allclose(co.l_var, (t / 4) ** 2, rtol=1e-6)


def test_telegraph_path_slopes():
    reg = RegimeSpec.constant((1.0, -1.0), (0.0, 0.0))
    flow = generate_flow(SwitchingModel(Exponential(3), Exponential(3)), 4.0, 5)
    grid = np.linspace(0, 4, 4001)
    rec = path_from_flow(flow, reg, grid)
    slope = np.diff(rec.X) / np.diff(grid)
    seg = np.searchsorted(flow.switch_times, grid[:-1], side="right")
    crosses = seg != np.searchsorted(flow.switch_times, grid[1:], side="right")
    expect = np.where(rec.states[:-1] == 0, 1.0, -1.0)
    assert np.allclose(slope[~crosses], expect[~crosses], atol=1e-9)


def test_no_switch_path():
    model = SwitchingModel(Exponential(1e-9), Exponential(1.0), 0, prev_sojourn=0.3)
    rec = simulate_path(model, tau_regime(), 2.0, [0.5, 2.0], seed=1)
    assert rec.flow.n_switches == 0
    assert np.allclose(rec.X, [0.5, 2.0])


def test_jump_bookkeeping_and_derivative():
    reg = tau_regime()
    model = SwitchingModel(Gamma(2.0, 6.0), Exponential(4.0), 0)
    for rep in range(20):
        flow = generate_flow(model, 3.0, 9, rep)
        grid = np.linspace(0, 3, 301)
        rec = path_from_flow(flow, reg, grid)
        # X jumps at tau_n by exactly the logged amplitude of the exiting state
        assert np.allclose(rec.X_right - rec.X_left, rec.jump_log["h"], atol=1e-14)
        for n, row in enumerate(rec.jump_log):
            assert row["exiting_state"] == flow.state_of_segment(n)
            assert row["T"] == flow.sojourns[n]
            assert row["h"] == pytest.approx(float(reg.h(row["exiting_state"], row["T"])))
        # numerical derivative between switches follows c_state(T_used, local time)
        origins = flow.segment_origins()
        prev = np.concatenate([[flow.prev_sojourn_T0], flow.sojourns])
        for k in range(len(grid) - 1):
            a, b = grid[k], grid[k + 1]
            sa = np.searchsorted(flow.switch_times, a, side="right")
            if sa != np.searchsorted(flow.switch_times, b, side="right"):
                continue
            mid = 0.5 * (a + b)
            c = float(reg.c(flow.state_of_segment(sa), prev[sa], mid - origins[sa]))
            assert (rec.X[k + 1] - rec.X[k]) / (b - a) == pytest.approx(c, abs=1e-6)


def test_grid_refinement_leaves_values_unchanged():
    flow = generate_flow(SwitchingModel(Exponential(5), Exponential(5)), 2.0, 21)
    coarse_grid = np.linspace(0, 2, 11)
    fine_grid = np.linspace(0, 2, 101)
    fine_grid[::10] = coarse_grid
    coarse = path_from_flow(flow, tau_regime(), coarse_grid)
    fine = path_from_flow(flow, tau_regime(), fine_grid)
    assert np.array_equal(coarse.X, fine.X[::10])


def test_kappa_is_product_of_jump_factors():
    flow = generate_flow(SwitchingModel(Exponential(5), Exponential(5)), 2.0, 4)
    rec = path_from_flow(flow, FIG1, [2.0])
    assert rec.kappa[0] == pytest.approx(np.prod(1 + rec.jump_log["h"]), rel=1e-12)


def test_first_switch_recursion():
    """Direct law of X_0(t) equals no-switch branch plus first switch and a restarted copy."""
    reg = tau_regime()
    d0, d1 = Gamma(2.0, 4.0), Exponential(3.0)
    t = 1.0
    n = 4000
    direct = simulate_batch(SwitchingModel(d0, d1, 0), reg, [t], n, seed=31).X[:, 0]
    rng = np.random.default_rng(99)
    assembled = np.empty(n)
    for k in range(n):
        tau = float(d0.sample(rng.uniform()))
        if tau >= t:
            assembled[k] = float(reg.antiderivative(0, 0.0, t))
            continue
        head = float(reg.antiderivative(0, 0.0, tau)) + float(reg.h(0, tau))
        copy = SwitchingModel(d0, d1, 1, prev_sojourn=tau)
        tail = simulate_path(copy, reg, t - tau, [t - tau], seed=7, replication=k).X[0]
        assembled[k] = head + tail
    assert stats.ks_2samp(direct, assembled).pvalue > 0.01


def test_mc_mean_matches_volterra_fig1():
    batch = simulate_batch(SwitchingModel(Exponential(5), Exponential(5)), FIG1, [1.0], 10**5, seed=2)
    x = batch.X[:, 0]
    mu = mean_curves(FIG1, (Exponential(5), Exponential(5)), 1.0, 1e-3).mu0[-1]
    assert abs(x.mean() - mu) <= 3 * x.std(ddof=1) / math.sqrt(len(x))


def test_batch_reproducible_and_chunk_keyed():
    model = SwitchingModel(Exponential(5), Exponential(5))
    a = simulate_batch(model, FIG1, [0.5, 1.0], 3000, seed=8, chunk_size=1000)
    b = simulate_batch(model, FIG1, [0.5, 1.0], 3000, seed=8, chunk_size=1000)
    assert np.array_equal(a.X, b.X)
    c = simulate_batch(model, FIG1, [0.5, 1.0], 2000, seed=8, chunk_size=1000)
    assert np.array_equal(a.X[:2000], c.X)


def test_regime_config_and_table2d():
    reg = regime_from_config([
        {"velocity": {"kind": "table2d", "T_grid": [0, 1], "t_grid": [0, 1, 2], "values": [[1, 1, 1], [2, 3, 4]]},
         "jump": {"kind": "constant", "value": -0.1}},
        {"kind": "constant", "c": -1, "h": 0.1},
    ])
    v = reg.velocity[0]
    assert isinstance(v, Table2DVelocity)
    assert float(v(0.5, 1.5)) == pytest.approx(0.5 * 1 + 0.5 * 3.5)
    # antiderivative agrees with quadrature of the bilinear surface
    from scipy.integrate import quad
    assert float(v.antiderivative(0.5, 1.7)) == pytest.approx(quad(lambda u: float(v(0.5, u)), 0, 1.7)[0], rel=1e-10)
    assert reg.tau_dependent
    assert not FIG1.tau_dependent
