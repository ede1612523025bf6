"""Price model S = S(0) E(X), bond discounting and three European option pricers.

* ``solve_fundamental``: backward stepping of the coupled Volterra system for
  the switch-anchored values, then explicit assembly of the elapsed-time slices;
* ``solve_pde_constant``: characteristics plus exponential time differencing
  for constant parameters and exponential sojourns;
* ``mc_price``: Monte Carlo under the pricing-measure sojourn laws.

Prices live on a uniform grid in y = log(spot).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

from .analytic import _density_weights
from .process import RegimeSpec, path_from_flow, simulate_batch
from .quadrature import expectation_nodes
from .switching import DomainError, Exponential, SwitchingFlow, SwitchingModel


class GridCoverageError(DomainError):
    """Shifted log-prices leave the grid by more than the extrapolation margin."""


class PositivityError(DomainError):
    """A jump factor 1 + h is not positive."""


# --- specifications -----------------------------------------------------------------

@dataclass(frozen=True)
class OptionSpec:
    payoff: str  # "call", "put", "digital", "forward" or "unit"
    strike: float = 1.0
    maturity: float = 1.0

    def __post_init__(self):
        if self.payoff not in ("call", "put", "digital", "forward", "unit"):
            raise DomainError(f"unknown payoff {self.payoff!r}")
        if self.maturity <= 0:
            raise DomainError("maturity must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.payoff == "call":
            return np.maximum(x - self.strike, 0.0)
        if self.payoff == "put":
            return np.maximum(self.strike - x, 0.0)
        if self.payoff == "digital":
            return (x > self.strike).astype(float)
        if self.payoff == "forward":
            return x.copy()
        return np.ones_like(x)


@dataclass(frozen=True, eq=False)
class MarketModel:
    spot: float
    regime: RegimeSpec
    q_dists: tuple
    rate_regime: RegimeSpec | None = None

    def __post_init__(self):
        if self.spot <= 0:
            raise DomainError("spot must be positive")

    def switching_model(self, initial_state: int = 0) -> SwitchingModel:
        return SwitchingModel(self.q_dists[0], self.q_dists[1], initial_state)

    @property
    def discounted_regime(self) -> RegimeSpec:
        return self.regime.shifted(self.rate_regime)


# --- paths --------------------------------------------------------------------------

def stochastic_exponential_path(model: MarketModel, flow: SwitchingFlow, sample_grid):
    """Path record with S(t) = S(0) exp(drift) prod(1 + h) filled in."""
    rec = path_from_flow(flow, model.regime, sample_grid)
    if np.any(1.0 + rec.jump_log["h"] <= 0):
        bad = rec.jump_log["tau"][1.0 + rec.jump_log["h"] <= 0]
        raise PositivityError(f"1 + h <= 0 at switch times {bad.tolist()}")
    S = model.spot * np.exp(rec.drift) * rec.kappa
    return type(rec)(**{**rec.__dict__, "S": S})


def bond_factor(rate_regime: RegimeSpec | None, flow: SwitchingFlow, t: float) -> float:
    """B(t) = exp of the integrated state-dependent short rate along the flow."""
    if rate_regime is None:
        return 1.0
    rec = path_from_flow(flow, rate_regime, [t])
    return float(math.exp(rec.drift[0]))


# --- price surfaces -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PriceSurface:
    """Phi_i(x, t) on a log-spot grid; optional elapsed-time slices Phi_i(x, t | s).

    ``cond0``/``cond1`` have shape (len(s_grid), len(t_grid), len(y_grid)).
    """

    y_grid: np.ndarray
    t_grid: np.ndarray
    Phi0: np.ndarray
    Phi1: np.ndarray
    method: str
    s_grid: np.ndarray | None = None
    cond0: np.ndarray | None = None
    cond1: np.ndarray | None = None

    @property
    def x_grid(self) -> np.ndarray:
        return np.exp(self.y_grid)

    def Phi(self, i: int) -> np.ndarray:
        return self.Phi0 if i == 0 else self.Phi1

    def cond(self, i: int) -> np.ndarray | None:
        return self.cond0 if i == 0 else self.cond1

    def _slice(self, i: int, s: float) -> np.ndarray:
        if s == 0 or self.s_grid is None:
            if s != 0 and self.s_grid is None and self.method != "pde":
                raise DomainError("surface has no elapsed-time slices")
            return self.Phi(i)
        grid = np.concatenate([[0.0], self.s_grid])
        stack = np.concatenate([self.Phi(i)[None], self.cond(i)])
        if s < 0 or s > grid[-1]:
            raise DomainError(f"elapsed time {s} outside [0, {grid[-1]}]")
        k = int(np.clip(np.searchsorted(grid, s, side="right") - 1, 0, len(grid) - 2))
        w = (s - grid[k]) / (grid[k + 1] - grid[k])
        return (1 - w) * stack[k] + w * stack[k + 1]

    def value_at(self, spot: float, t: float, state: int, elapsed: float = 0.0) -> float:
        """V(t | s) = Phi_state(spot, t | elapsed); cubic in log-spot, linear in t."""
        surf = self._slice(state, elapsed)
        if not self.t_grid[0] - 1e-12 <= t <= self.t_grid[-1] + 1e-12:
            raise DomainError("t outside the surface")
        k = int(np.clip(np.searchsorted(self.t_grid, t, side="right") - 1, 0, len(self.t_grid) - 2))
        w = (t - self.t_grid[k]) / (self.t_grid[k + 1] - self.t_grid[k])
        y = math.log(spot)
        a = float(CubicSpline(self.y_grid, surf[k])(y))
        b = float(CubicSpline(self.y_grid, surf[k + 1])(y))
        return (1 - w) * a + w * b


def default_y_grid(spot: float, width: float = 1.0, n: int = 801) -> np.ndarray:
    return math.log(spot) + np.linspace(-width, width, n)


class _Interpolant:
    """Monotone cubic (PCHIP) in log-spot; linear continuation in spot beyond the grid ends."""

    def __init__(self, y: np.ndarray, values: np.ndarray, margin: float):
        self.y = y
        # denormal slopes in flat regions overflow harmlessly inside the slope average
        with np.errstate(over="ignore", divide="ignore"):
            self.spline = PchipInterpolator(y, values)
        x = np.exp(y)
        self.lo = (x[0], values[0], (values[1] - values[0]) / (x[1] - x[0]))
        self.hi = (x[-1], values[-1], (values[-1] - values[-2]) / (x[-1] - x[-2]))
        self.margin = margin

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.margin is not None and (np.min(y) < self.y[0] - self.margin or np.max(y) > self.y[-1] + self.margin):
            raise GridCoverageError("shifted log-price leaves the grid; widen the grid")
        out = self.spline(np.clip(y, self.y[0], self.y[-1]))
        below = y < self.y[0]
        above = y > self.y[-1]
        if np.any(below):
            x0, v0, s0 = self.lo
            out[below] = np.maximum(v0 + s0 * (np.exp(y[below]) - x0), 0.0)
        if np.any(above):
            x1, v1, s1 = self.hi
            out[above] = np.maximum(v1 + s1 * (np.exp(y[above]) - x1), 0.0)
        return out


def _uniform_t_grid(maturity: float, dt: float) -> np.ndarray:
    n = max(1, int(math.ceil(maturity / dt - 1e-9)))
    return np.linspace(0.0, maturity, n + 1)


def _rate_antiderivative(model: MarketModel, i: int, T, t):
    if model.rate_regime is None:
        return np.zeros(np.broadcast(np.asarray(T, float), np.asarray(t, float)).shape)
    return model.rate_regime.antiderivative(i, T, t)


# --- fundamental Volterra system ---------------------------------------------------------

def solve_fundamental(model: MarketModel, option: OptionSpec, y_grid=None, dt: float = 5e-3, s_grid=None,
                      normalized: bool = True, n_tau: int = 32, margin: float = 2.0) -> PriceSurface:
    """Backward Volterra stepping for Phi_i(x, t), then the elapsed-time slices.

    The value just after a switch into state i at time t is

        F_i(U - t) E_tau[D H(x e^{l_i})] + int_t^U f_i(u - t) E_tau[D Phi_{1-i}(x e^{l_i} (1 + h_i), u)] du

    with l_i, the discount D and h_i evaluated at the local time u - t and the
    previous sojourn tau ~ f_{1-i}.  The u-integral uses product-trapezoid
    weights; the implicit u = t term is resolved by fixed-point iteration.
    """
    U = option.maturity
    y = default_y_grid(model.spot) if y_grid is None else np.asarray(y_grid, dtype=float)
    t_grid = _uniform_t_grid(U, dt)
    dt = float(t_grid[1] - t_grid[0])
    n = len(t_grid)
    regime, dists = model.regime, model.q_dists
    regime.check_jumps_above(dists[0].support_truncation() + dists[1].support_truncation())
    lags = t_grid  # local times v = u - t are grid multiples

    # tau quadrature per state (a single node when velocities ignore tau)
    tau_nodes = []
    for i in (0, 1):
        vel_dep = getattr(regime.velocity[i], "tau_dependent", True)
        rate_dep = model.rate_regime is not None and getattr(model.rate_regime.velocity[i], "tau_dependent", True)
        if vel_dep or rate_dep:
            xs, ws = expectation_nodes(dists[1 - i], n_tau)
            tau_nodes.append((xs, ws / ws.sum()))
        else:
            tau_nodes.append((np.zeros(1), np.ones(1)))

    # shifts[i][tau_k, j] = l_i(tau_k; v_j) and discount factors
    shifts, discounts = [], []
    for i in (0, 1):
        T = tau_nodes[i][0][:, None]
        shifts.append(np.asarray(regime.antiderivative(i, T, lags[None, :]), float) * np.ones((len(T), n)))
        discounts.append(np.exp(-_rate_antiderivative(model, i, T, lags[None, :])) * np.ones((len(T), n)))
    jump_log = [np.log1p(np.asarray(regime.h(i, lags), float) * np.ones(n)) for i in (0, 1)]
    weights = [_density_weights(dists[i], lags) for i in (0, 1)]  # left/right per lag cell
    node_w = []
    for i in (0, 1):
        left, right = weights[i]
        w = np.zeros(n)
        w[:-1] += left
        w[1:] += right
        node_w.append(w)  # weight of lag j when the window is long enough; trimmed below

    Phi = [np.zeros((n, len(y))), np.zeros((n, len(y)))]
    payoff = option(np.exp(y))
    Phi[0][-1] = payoff
    Phi[1][-1] = payoff
    interp = [[None] * n, [None] * n]
    for i in (0, 1):
        interp[i][n - 1] = _Interpolant(y, Phi[i][n - 1], margin)

    def expect(i, j, src):
        """E_tau[D * src(y + l_i(tau; v_j) + log(1 + h_i(v_j)))] with src an interpolant."""
        xs, ws = tau_nodes[i]
        acc = np.zeros(len(y))
        for k in range(len(xs)):
            acc += ws[k] * discounts[i][k, j] * src(y + shifts[i][k, j] + jump_log[i][j])
        return acc

    def terminal_part(i, m):
        # no switch before U: survival_i(U - t_m) E[D H(x e^{l_i(U - t_m)})]
        j = n - 1 - m
        xs, ws = tau_nodes[i]
        acc = np.zeros(len(y))
        pay = interp[i][n - 1]
        for k in range(len(xs)):
            acc += ws[k] * discounts[i][k, j] * pay(y + shifts[i][k, j])
        return float(dists[i].survival(lags[j])) * acc

    for m in range(n - 2, -1, -1):
        span = n - 1 - m  # number of lag cells in [t_m, U]
        known = []
        for i in (0, 1):
            left, right = weights[i]
            acc = terminal_part(i, m)
            for j in range(1, span + 1):
                wj = (left[j] if j < span else 0.0) + right[j - 1]
                acc += wj * expect(i, j, interp[1 - i][m + j])
            known.append(acc)
        # implicit lag-0 term couples Phi_0(., t_m) and Phi_1(., t_m)
        cur = [known[0].copy(), known[1].copy()]
        for _ in range(100):
            new = []
            for i in (0, 1):
                src = _Interpolant(y, cur[1 - i], margin)
                new.append(known[i] + weights[i][0][0] * expect(i, 0, src))
            delta = max(float(np.max(np.abs(new[0] - cur[0]))), float(np.max(np.abs(new[1] - cur[1]))))
            cur = new
            if delta < 1e-13 * max(1.0, float(np.max(np.abs(cur[0])))):
                break
        for i in (0, 1):
            Phi[i][m] = cur[i]
            interp[i][m] = _Interpolant(y, cur[i], margin)

    cond = [None, None]
    s_arr = None
    if s_grid is not None and len(s_grid):
        s_arr = np.asarray(s_grid, dtype=float)
        if np.any(s_arr <= 0):
            raise DomainError("s_grid entries must be positive")
        cond = [np.zeros((len(s_arr), n, len(y))), np.zeros((len(s_arr), n, len(y)))]
        for a, s in enumerate(s_arr):
            for i in (0, 1):
                dist = dists[i]
                sf = float(dist.survival(s)) if normalized else 1.0
                if sf <= 0:
                    raise DomainError(f"survival_{i}({s}) is zero")
                xs, ws = tau_nodes[i]
                T = xs[:, None]
                loc = s + lags[None, :]  # local time at lag v is s + v
                base = np.broadcast_to(np.asarray(regime.antiderivative(i, T, s), float), (len(xs), 1))
                l_s = np.asarray(regime.antiderivative(i, T, loc), float) * np.ones((len(xs), n)) - base
                d_s = np.exp(-(_rate_antiderivative(model, i, T, loc)
                               - _rate_antiderivative(model, i, T, s * np.ones_like(loc))))
                d_s = d_s * np.ones((len(xs), n))
                jl = np.log1p(np.asarray(regime.h(i, loc[0]), float) * np.ones(n))
                cl, cr = _density_weights(dist, lags, start=s)
                for m in range(n):
                    span = n - 1 - m
                    acc = np.zeros(len(y))
                    for k in range(len(xs)):
                        acc += ws[k] * d_s[k, span] * interp[i][n - 1](y + l_s[k, span])
                    acc *= float(dist.survival(s + lags[span]))
                    for j in range(0, span + 1):
                        wj = (cl[j] if j < span else 0.0) + (cr[j - 1] if j >= 1 else 0.0)
                        if wj == 0.0:
                            continue
                        src = interp[1 - i][m + j]
                        e = np.zeros(len(y))
                        for k in range(len(xs)):
                            e += ws[k] * d_s[k, j] * src(y + l_s[k, j] + jl[j])
                        acc += wj * e
                    cond[i][a, m] = acc / sf
    return PriceSurface(y, t_grid, Phi[0], Phi[1], "fundamental", s_arr, cond[0], cond[1])


# --- constant-parameter PDE ----------------------------------------------------------------

def _constant_rates(model: MarketModel):
    if not model.regime.is_constant():
        raise DomainError("PDE pricer needs constant velocities and jumps")
    if not all(isinstance(d, Exponential) for d in model.q_dists):
        raise DomainError("PDE pricer needs exponential sojourns")
    (c0, c1), (h0, h1) = model.regime.constants()
    if model.rate_regime is None:
        r = (0.0, 0.0)
    else:
        if not model.rate_regime.is_constant():
            raise DomainError("PDE pricer needs constant interest rates")
        r = model.rate_regime.constants()[0]
    if min(h0, h1) <= -1:
        raise PositivityError("jump amplitudes must exceed -1")
    return (c0, c1), (h0, h1), r, (model.q_dists[0].rate, model.q_dists[1].rate)


def solve_pde_constant(model: MarketModel, option: OptionSpec, y_grid=None, dt: float = 1e-3,
                       margin: float | None = None) -> PriceSurface:
    """Backward characteristics in y = log x with second-order exponential time differencing.

    Along dy/dt = c_i the system reads dPhi_i/dt = (r_i + lambda_i) Phi_i - lambda_i Phi_{1-i}(y + log(1 + h_i)).
    """
    c, h, r, lam = _constant_rates(model)
    U = option.maturity
    y = default_y_grid(model.spot) if y_grid is None else np.asarray(y_grid, dtype=float)
    t_grid = _uniform_t_grid(U, dt)
    dt = float(t_grid[1] - t_grid[0])
    n = len(t_grid)
    kappa = [r[i] + lam[i] for i in (0, 1)]
    coef = []
    for i in (0, 1):
        k = kappa[i]
        x = k * dt
        if x > 1e-8:
            e0 = -math.expm1(-x) / k
            e1 = (1 - math.exp(-x) * (1 + x)) / (k * k)
        else:
            e0 = dt * (1 - x / 2)
            e1 = dt * dt * (0.5 - x / 3)
        coef.append((math.exp(-x), lam[i] * e1 / dt, lam[i] * (e0 - e1 / dt)))
    jl = [math.log1p(h[i]) for i in (0, 1)]
    Phi = [np.zeros((n, len(y))), np.zeros((n, len(y)))]
    payoff = option(np.exp(y))
    Phi[0][-1] = payoff
    Phi[1][-1] = payoff
    for m in range(n - 2, -1, -1):
        old = [_Interpolant(y, Phi[i][m + 1], margin) for i in (0, 1)]
        base = []
        for i in (0, 1):
            decay, w_old, _ = coef[i]
            # the characteristic through (y, t_m) sits at y + c_i dt at t_{m+1}
            base.append(decay * old[i](y + c[i] * dt) + w_old * old[1 - i](y + c[i] * dt + jl[i]))
        cur = [base[0].copy(), base[1].copy()]
        for _ in range(100):
            new = []
            for i in (0, 1):
                src = _Interpolant(y, cur[1 - i], margin)
                new.append(base[i] + coef[i][2] * src(y + jl[i]))
            delta = max(float(np.max(np.abs(new[0] - cur[0]))), float(np.max(np.abs(new[1] - cur[1]))))
            cur = new
            if delta < 1e-13 * max(1.0, float(np.max(np.abs(cur[0])))):
                break
        Phi[0][m], Phi[1][m] = cur
    return PriceSurface(y, t_grid, Phi[0], Phi[1], "pde")


# --- Monte Carlo -------------------------------------------------------------------------------

@dataclass(frozen=True)
class MCPrice:
    state: int
    price: float
    standard_error: float
    n_paths: int


def mc_price(model: MarketModel, option: OptionSpec, n_paths: int, seed: int) -> tuple[MCPrice, MCPrice]:
    """Discounted payoff averages for paths started in state 0 and in state 1."""
    out = []
    for i in (0, 1):
        batch = simulate_batch(model.switching_model(i), model.regime, [option.maturity], n_paths,
                               seed + i, rate_regime=model.rate_regime)
        if np.any(~np.isfinite(batch.log_kappa)):
            raise PositivityError("a simulated jump factor 1 + h is not positive")
        S = batch.S(model.spot)[:, 0]
        v = option(S) * np.exp(-batch.log_bond[:, 0])
        out.append(MCPrice(i, float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_paths)), n_paths))
    return out[0], out[1]
