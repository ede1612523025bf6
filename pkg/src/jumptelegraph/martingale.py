"""Martingale characterisation, martingale-making sojourn laws and the switching-rate measure change."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .process import RegimeAverages, RegimeSpec, simulate_batch
from .switching import (
    TRUNCATION_EPS,
    DomainError,
    Exponential,
    HazardDistribution,
    SwitchingFlow,
    SwitchingModel,
)


class MartingaleConditionError(DomainError):
    """The regime does not admit martingale-making sojourn densities."""


@dataclass(frozen=True, eq=False)
class MartingaleReport:
    grid: np.ndarray
    residual0: np.ndarray
    residual1: np.ndarray
    sign_violations: tuple  # per state: array of times where c-bar/h >= 0
    divergence_check: tuple  # per state: int_0^T c-bar/h at the last grid time
    zero_jump_points: tuple = field(default=((), ()))

    @property
    def max_abs_residual(self) -> float:
        return float(max(np.max(np.abs(self.residual0)), np.max(np.abs(self.residual1))))

    def residual(self, i: int) -> np.ndarray:
        return self.residual0 if i == 0 else self.residual1

    def is_martingale(self, tol: float = 1e-8) -> bool:
        return self.max_abs_residual <= tol


def _ratio(cbar, h):
    """c-bar / h with the 0/0 limit convention; returns (ratio, zero_jump_mask)."""
    cbar = np.asarray(cbar, dtype=float)
    h = np.asarray(h, dtype=float)
    zero = h == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(zero, np.where(cbar == 0, 0.0, np.copysign(np.inf, cbar)), cbar / np.where(zero, 1.0, h))
    return r, zero


def martingale_residual(regime: RegimeSpec, dists, t_grid, averages=None) -> MartingaleReport:
    """Pointwise survival_i(t) c-bar_i(t) + h_i(t) f_i(t) on ``t_grid``."""
    t = np.asarray(t_grid, dtype=float)
    avg = averages or RegimeAverages(regime, dists)
    residuals, violations, divergence, zeros = [], [], [], []
    for i in (0, 1):
        cbar = np.asarray(avg.c_bar(i, t), float)
        h = np.asarray(regime.h(i, t), float) * np.ones_like(t)
        res = dists[i].survival(t) * cbar + h * dists[i].density(t)
        ratio, zero = _ratio(cbar, h)
        # where h vanishes together with c-bar the residual is 0 by the limit convention
        res = np.where(zero & (cbar == 0), 0.0, res)
        residuals.append(res)
        violations.append(t[(ratio >= 0) & ~(zero & (cbar == 0))])
        zeros.append(t[zero])
        finite = np.where(np.isfinite(ratio), ratio, np.nan)
        if len(t) > 1 and np.all(np.isfinite(finite)):
            divergence.append(float(np.trapezoid(finite, t)))
        else:
            divergence.append(float("nan"))
    return MartingaleReport(t, residuals[0], residuals[1], tuple(violations), tuple(divergence), tuple(zeros))


def _limit_safe(fn, t, scale):
    """Evaluate ``fn`` and replace 0/0 points by the value just to the right."""
    vals = fn(t)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        t_b = np.asarray(t, float)[bad] + 1e-9 * scale
        vals = np.array(vals, dtype=float)
        vals[bad] = fn(t_b)
    return vals


def martingale_density_from_regimes(regime: RegimeSpec, t_grid, max_iter: int = 50,
                                    tol: float = 1e-12) -> tuple[HazardDistribution, HazardDistribution]:
    """Sojourn laws with hazard -c-bar_i / h_i, which make X a martingale.

    When the velocities depend on the previous sojourn, c-bar_i itself depends
    on the law of state 1-i, so the pair is found by fixed-point iteration.
    """
    grid = np.asarray(t_grid, dtype=float)
    if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise DomainError("t_grid must start at 0 and increase strictly")
    scale = max(1.0, float(grid[-1]))
    probe = np.linspace(0.0, grid[-1], 4 * len(grid) + 1)

    def build(avg):
        out = []
        for i in (0, 1):
            def hazard(t, i=i):
                t = np.asarray(t, dtype=float)
                r, zero = _ratio(avg.c_bar(i, t), regime.h(i, t) * np.ones_like(t))
                r = np.where(zero & (np.asarray(avg.c_bar(i, t)) == 0), np.nan, r)
                return -r
            rates = _limit_safe(hazard, probe, scale)
            bad = probe[~(rates > 0) | ~np.isfinite(rates)]
            if bad.size:
                raise MartingaleConditionError(
                    f"state {i}: c-bar/h must be negative; violated at t = {bad[:10].tolist()}"
                    + (" ..." if bad.size > 10 else ""))
            out.append(HazardDistribution(lambda t, hz=hazard: _limit_safe(hz, t, scale), grid))
        return tuple(out)

    dists = (Exponential(1.0), Exponential(1.0))
    for _ in range(max_iter):
        avg = RegimeAverages(regime, dists, n_nodes=128)
        new = build(avg)
        if not regime.tau_dependent:
            dists = new
            break
        change = max(float(np.max(np.abs(new[i].hazard(grid) - dists[i].hazard(grid)))) for i in (0, 1))
        dists = new
        if change < tol:
            break
    for i in (0, 1):
        log_surv = -float(dists[i].cumulative_hazard(grid[-1]))
        if log_surv > math.log(TRUNCATION_EPS):
            warnings.warn(f"state {i}: survival at t={grid[-1]} is {math.exp(log_surv):.2e}, "
                          f"above {TRUNCATION_EPS:g}; divergence of the integral is not confirmed on this grid",
                          RuntimeWarning, stacklevel=2)
    return dists


# --- measure change ---------------------------------------------------------------

@dataclass(frozen=True)
class MeasureChangeSpec:
    """Physical switching rates mu_i and target (martingale) rates lambda_i."""

    mu0: float
    mu1: float
    lambda0: float
    lambda1: float

    def __post_init__(self):
        if min(self.mu0, self.mu1, self.lambda0, self.lambda1) <= 0:
            raise DomainError("all rates must be positive")

    @property
    def mu(self) -> tuple[float, float]:
        return (self.mu0, self.mu1)

    @property
    def lam(self) -> tuple[float, float]:
        return (self.lambda0, self.lambda1)

    @property
    def c_star(self) -> tuple[float, float]:
        return (self.mu0 - self.lambda0, self.mu1 - self.lambda1)

    @property
    def h_star(self) -> tuple[float, float]:
        return (-(self.mu0 - self.lambda0) / self.mu0, -(self.mu1 - self.lambda1) / self.mu1)

    def physical_model(self, initial_state: int = 0) -> SwitchingModel:
        return SwitchingModel(Exponential(self.mu0), Exponential(self.mu1), initial_state)

    def target_model(self, initial_state: int = 0) -> SwitchingModel:
        return SwitchingModel(Exponential(self.lambda0), Exponential(self.lambda1), initial_state)


def radon_nikodym_weight(spec: MeasureChangeSpec, flow: SwitchingFlow, t: float) -> float:
    """exp(sum of c*_state times occupation on [0, t]) times prod (1 + h*_exiting) over switches up to t."""
    if not 0 <= t <= flow.horizon:
        raise DomainError("t outside the flow horizon")
    times = np.concatenate([[0.0], flow.switch_times[flow.switch_times <= t], [t]])
    lengths = np.diff(times)
    states = np.array([flow.state_of_segment(n) for n in range(len(lengths))], dtype=int)
    c = np.array(spec.c_star)
    log_w = float(np.sum(c[states] * lengths))
    exiting = states[:-1]
    log_w += float(np.sum(np.log1p(np.array(spec.h_star)[exiting])))
    return math.exp(log_w)


def batch_log_weights(spec: MeasureChangeSpec, batch, k: int = -1) -> np.ndarray:
    """Log RN weights of a simulated batch at ``batch.times[k]``."""
    t = batch.times[k]
    occ0 = batch.occupation0[:, k]
    c0, c1 = spec.c_star
    return (c0 * occ0 + c1 * (t - occ0)
            + batch.exits0[:, k] * math.log(spec.lambda0 / spec.mu0)
            + batch.exits1[:, k] * math.log(spec.lambda1 / spec.mu1))


def effective_sample_size(w: np.ndarray) -> float:
    return float(np.sum(w) ** 2 / np.sum(w * w))


def weighted_ks_exponential(samples: np.ndarray, weights: np.ndarray, rate: float):
    """Weighted KS distance to Exp(rate), its effective size and p-value."""
    order = np.argsort(samples)
    x = samples[order]
    w = weights[order] / np.sum(weights)
    ecdf = np.cumsum(w)
    cdf = -np.expm1(-rate * x)
    d = float(max(np.max(np.abs(ecdf - cdf)), np.max(np.abs(ecdf - w - cdf))))
    n_eff = effective_sample_size(weights)
    return d, n_eff, float(stats.kstwobign.sf(d * math.sqrt(n_eff)))


def weighted_ks_two_sample(x: np.ndarray, y: np.ndarray, wy: np.ndarray):
    """KS distance between the plain sample ``x`` and the weighted sample (y, wy)."""
    grid = np.sort(np.concatenate([x, y]))
    fx = np.searchsorted(np.sort(x), grid, side="right") / len(x)
    order = np.argsort(y)
    cw = np.concatenate([[0.0], np.cumsum(wy[order])]) / np.sum(wy)
    fy = cw[np.searchsorted(y[order], grid, side="right")]
    d = float(np.max(np.abs(fx - fy)))
    n_eff = effective_sample_size(wy)
    n = len(x) * n_eff / (len(x) + n_eff)
    return d, n_eff, float(stats.kstwobign.sf(d * math.sqrt(n)))


@dataclass(frozen=True, eq=False)
class MeasureChangeReport:
    horizon: float
    n_paths: int
    weight_mean: float
    weight_se: float
    ess: float
    sojourn_ks: tuple  # per state (D, n_eff, p-value)
    weighted_mean_x: float
    weighted_mean_x_se: float
    direct_mean_x: float
    direct_mean_x_se: float
    distribution_ks: tuple  # (D, n_eff, p-value)
    level: float = 0.01

    @property
    def checks(self) -> dict:
        return {
            "weight_mean": abs(self.weight_mean - 1.0) <= 3 * self.weight_se,
            "sojourn_ks": all(p > self.level for _, _, p in self.sojourn_ks),
            "martingale_mean": abs(self.weighted_mean_x) <= 3 * self.weighted_mean_x_se,
            "distribution_ks": self.distribution_ks[2] > self.level,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def check_proportional(regime: RegimeSpec, spec: MeasureChangeSpec, tol: float = 1e-8, t_max: float = 1.0):
    """c_i + lambda_i h_i must vanish identically (constant regimes only)."""
    if not regime.is_constant():
        raise DomainError("measure change is defined for constant regimes")
    (c0, c1), (h0, h1) = regime.constants()
    res = (c0 + spec.lambda0 * h0, c1 + spec.lambda1 * h1)
    if max(abs(r) for r in res) > tol:
        raise MartingaleConditionError(f"regime is not proportional to the target rates: residuals {res}")


def _weighted_mean_se(values: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    z = values * w
    return float(z.mean()), float(z.std(ddof=1) / math.sqrt(len(z)))


def verify_measure_change(spec: MeasureChangeSpec, regime: RegimeSpec, horizon: float, n_paths: int,
                          seed: int, initial_state: int = 0, level: float = 0.01) -> MeasureChangeReport:
    """Monte Carlo checks that reweighting mu-rate paths reproduces the lambda-rate law.

    (i) first sojourns of each state, weighted by the density at that
    stopping time, follow Exp(lambda_i); (ii) E_P[w X(horizon)] vanishes;
    (iii) reweighted X(horizon) matches direct simulation under lambda rates.
    """
    check_proportional(regime, spec)
    batch = simulate_batch(spec.physical_model(initial_state), regime, [horizon], n_paths, seed)
    logw = batch_log_weights(spec, batch)
    w = np.exp(logw)
    w_mean, w_se = _weighted_mean_se(np.ones_like(w), w)
    x = batch.X[:, 0]
    mx, mx_se = _weighted_mean_se(x, w)

    sojourn_ks = []
    for i in (0, 1):
        start = batch if i == initial_state else simulate_batch(
            spec.physical_model(i), regime, [horizon], n_paths, seed + 1)
        tau = start.first_sojourn
        # density of the stopped path up to its first switch: exp(c*_i tau) lambda_i / mu_i
        wi = np.exp(spec.c_star[i] * tau) * spec.lam[i] / spec.mu[i]
        sojourn_ks.append(weighted_ks_exponential(tau, wi, spec.lam[i]))

    direct = simulate_batch(spec.target_model(initial_state), regime, [horizon], n_paths, seed + 2)
    xd = direct.X[:, 0]
    dist_ks = weighted_ks_two_sample(xd, x, w)
    return MeasureChangeReport(horizon, n_paths, w_mean, w_se, effective_sample_size(w), tuple(sojourn_ks),
                               mx, mx_se, float(xd.mean()), float(xd.std(ddof=1) / math.sqrt(len(xd))),
                               dist_ks, level)
