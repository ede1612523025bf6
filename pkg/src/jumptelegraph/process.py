"""Velocity/jump regimes and path construction of the jump-telegraph process."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .quadrature import adaptive_gl, expectation_nodes, gl_nodes
from .switching import (
    TRUNCATION_EPS,
    DomainError,
    SojournDistribution,
    SwitchingFlow,
    SwitchingModel,
    generate_flow,
    make_rng,
    open_uniform,
)

VELOCITY_BOUND = 1e8


# --- time profiles ---------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.value)

    def integral(self, t):
        return self.value * np.asarray(t, dtype=float)


@dataclass(frozen=True)
class Hyperbolic:
    """a / (1 + b t)."""

    a: float
    b: float

    def __call__(self, t):
        return self.a / (1.0 + self.b * np.asarray(t, dtype=float))

    def integral(self, t):
        t = np.asarray(t, dtype=float)
        if self.b == 0:
            return self.a * t
        return (self.a / self.b) * np.log1p(self.b * t)


@dataclass(frozen=True)
class Linear:
    """slope * t + intercept."""

    slope: float
    intercept: float = 0.0

    def __call__(self, t):
        return self.slope * np.asarray(t, dtype=float) + self.intercept

    def integral(self, t):
        t = np.asarray(t, dtype=float)
        return 0.5 * self.slope * t * t + self.intercept * t


@dataclass(frozen=True, eq=False)
class Table1D:
    """Piecewise-linear profile, constant beyond the end points."""

    x: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        return np.interp(np.asarray(t, dtype=float), self.x, self.values)


def profile_from_config(spec) -> Callable:
    if isinstance(spec, (int, float)):
        return Constant(float(spec))
    kind = spec.get("kind")
    if kind == "constant":
        return Constant(float(spec["value"]))
    if kind == "hyperbolic":
        return Hyperbolic(float(spec["a"]), float(spec["b"]))
    if kind == "linear":
        return Linear(float(spec["slope"]), float(spec.get("intercept", 0.0)))
    if kind == "table":
        return Table1D(np.asarray(spec["x"], float), np.asarray(spec["values"], float))
    raise DomainError(f"unknown profile kind {kind!r}")


def profile_to_config(profile) -> dict:
    if isinstance(profile, Constant):
        return {"kind": "constant", "value": profile.value}
    if isinstance(profile, Hyperbolic):
        return {"kind": "hyperbolic", "a": profile.a, "b": profile.b}
    if isinstance(profile, Linear):
        return {"kind": "linear", "slope": profile.slope, "intercept": profile.intercept}
    if isinstance(profile, Table1D):
        return {"kind": "table", "x": profile.x.tolist(), "values": profile.values.tolist()}
    raise DomainError(f"profile {profile!r} has no config form")


# --- velocities c_i(T, t) ----------------------------------------------------

@dataclass(frozen=True)
class LocalTimeVelocity:
    """Velocity depending only on the time since the last switch."""

    profile: Callable
    tau_dependent = False

    def __call__(self, T, t):
        T, t = np.broadcast_arrays(np.asarray(T, float), np.asarray(t, float))
        return self.profile(t)

    def antiderivative(self, T, t):
        T, t = np.broadcast_arrays(np.asarray(T, float), np.asarray(t, float))
        if hasattr(self.profile, "integral"):
            return self.profile.integral(t)
        return _gl_antiderivative(lambda tt, u: self.profile(u), T, t)


@dataclass(frozen=True, eq=False)
class Table2DVelocity:
    """Bilinear table c(T, t), clamped outside the grid."""

    T_grid: np.ndarray
    t_grid: np.ndarray
    values: np.ndarray  # shape (len(T_grid), len(t_grid))
    tau_dependent = True

    def __post_init__(self):
        T_grid = np.asarray(self.T_grid, float)
        t_grid = np.asarray(self.t_grid, float)
        values = np.asarray(self.values, float)
        if values.shape != (len(T_grid), len(t_grid)):
            raise DomainError("table2d values must have shape (len(T_grid), len(t_grid))")
        if t_grid[0] != 0.0:
            raise DomainError("table2d t_grid must start at 0")
        object.__setattr__(self, "T_grid", T_grid)
        object.__setattr__(self, "t_grid", t_grid)
        object.__setattr__(self, "values", values)
        # exact integral of each piecewise-linear row
        cells = 0.5 * (values[:, 1:] + values[:, :-1]) * np.diff(t_grid)
        object.__setattr__(self, "_row_integrals",
                           np.concatenate([np.zeros((len(T_grid), 1)), np.cumsum(cells, axis=1)], axis=1))

    def _T_weights(self, T):
        T = np.clip(T, self.T_grid[0], self.T_grid[-1])
        if len(self.T_grid) == 1:
            return np.zeros_like(T, dtype=int), np.zeros_like(T)
        j = np.clip(np.searchsorted(self.T_grid, T, side="right") - 1, 0, len(self.T_grid) - 2)
        w = (T - self.T_grid[j]) / (self.T_grid[j + 1] - self.T_grid[j])
        return j, w

    def _row_eval(self, rows, t, table):
        # linear interpolation along t for the given row indices
        tg = self.t_grid
        tc = np.clip(t, tg[0], tg[-1])
        k = np.clip(np.searchsorted(tg, tc, side="right") - 1, 0, len(tg) - 2)
        w = (tc - tg[k]) / (tg[k + 1] - tg[k])
        return (1 - w) * table[rows, k] + w * table[rows, k + 1]

    def __call__(self, T, t):
        T, t = np.broadcast_arrays(np.asarray(T, float), np.asarray(t, float))
        j, w = self._T_weights(T)
        j1 = np.minimum(j + 1, len(self.T_grid) - 1)
        return (1 - w) * self._row_eval(j, t, self.values) + w * self._row_eval(j1, t, self.values)

    def antiderivative(self, T, t):
        T, t = np.broadcast_arrays(np.asarray(T, float), np.asarray(t, float))
        j, w = self._T_weights(T)
        j1 = np.minimum(j + 1, len(self.T_grid) - 1)

        def row_integral(rows):
            tg = self.t_grid
            tc = np.clip(t, tg[0], tg[-1])
            k = np.clip(np.searchsorted(tg, tc, side="right") - 1, 0, len(tg) - 2)
            v0 = self.values[rows, k]
            vt = self._row_eval(rows, tc, self.values)
            inside = self._row_integrals[rows, k] + 0.5 * (v0 + vt) * (tc - tg[k])
            # constant continuation past the last t node
            return inside + self.values[rows, -1] * np.maximum(t - tg[-1], 0.0)

        return (1 - w) * row_integral(j) + w * row_integral(j1)


@dataclass(frozen=True)
class FunctionVelocity:
    """User velocity c(T, t); ``antiderivative_fn`` gives int_0^t c(T, u) du if known."""

    fn: Callable
    antiderivative_fn: Callable | None = None
    tau_dependent: bool = True

    def __call__(self, T, t):
        T, t = np.broadcast_arrays(np.asarray(T, float), np.asarray(t, float))
        return self.fn(T, t)

    def antiderivative(self, T, t):
        T, t = np.broadcast_arrays(np.asarray(T, float), np.asarray(t, float))
        if self.antiderivative_fn is not None:
            return self.antiderivative_fn(T, t)
        return _gl_antiderivative(self.fn, T, t)


def _gl_antiderivative(fn, T, t, n: int = 24, panels: int = 4):
    """Composite fixed-order GL for int_0^t fn(T, u) du, vectorised over (T, t)."""
    T = np.asarray(T, float)
    t = np.asarray(t, float)
    total = np.zeros(np.broadcast(T, t).shape)
    for p in range(panels):
        lo = t * p / panels
        hi = t * (p + 1) / panels
        us, ws = gl_nodes(lo, hi, n)
        total += np.sum(fn(T[..., None], us) * ws, axis=-1)
    return total


@dataclass(frozen=True)
class JumpProfile:
    """h(T) as a function of the completed sojourn."""

    profile: Callable

    def __call__(self, T):
        return self.profile(np.asarray(T, float))


# --- regime spec -------------------------------------------------------------

@dataclass(frozen=True)
class RegimeSpec:
    """Per-state velocity surfaces c_i(T, t) and jump amplitudes h_i(T)."""

    velocity: tuple
    jump: tuple

    def __post_init__(self):
        if len(self.velocity) != 2 or len(self.jump) != 2:
            raise DomainError("regime needs exactly two states")

    @classmethod
    def constant(cls, c, h) -> "RegimeSpec":
        return cls(
            velocity=(LocalTimeVelocity(Constant(float(c[0]))), LocalTimeVelocity(Constant(float(c[1])))),
            jump=(JumpProfile(Constant(float(h[0]))), JumpProfile(Constant(float(h[1])))),
        )

    @classmethod
    def from_profiles(cls, c_profiles, h_profiles) -> "RegimeSpec":
        """Velocities depending on local time only, jumps on the completed sojourn."""
        return cls(
            velocity=tuple(LocalTimeVelocity(p) for p in c_profiles),
            jump=tuple(JumpProfile(p) for p in h_profiles),
        )

    @property
    def tau_dependent(self) -> bool:
        return any(getattr(v, "tau_dependent", True) for v in self.velocity)

    def is_constant(self) -> bool:
        return all(isinstance(v, LocalTimeVelocity) and isinstance(v.profile, Constant) for v in self.velocity) \
            and all(isinstance(h.profile, Constant) for h in self.jump if isinstance(h, JumpProfile))

    def constants(self) -> tuple[tuple[float, float], tuple[float, float]]:
        if not self.is_constant():
            raise DomainError("regime is not constant")
        return (tuple(v.profile.value for v in self.velocity), tuple(h.profile.value for h in self.jump))

    def c(self, state: int, T, t):
        return self.velocity[state](T, t)

    def h(self, state: int, T):
        return self.jump[state](T)

    def antiderivative(self, state: int, T, t):
        return self.velocity[state].antiderivative(T, t)

    def shifted(self, rates: "RegimeSpec | None") -> "RegimeSpec":
        """Regime with velocities c_i - r_i (the discounted price regime)."""
        if rates is None:
            return self
        vel = []
        for c, r in zip(self.velocity, rates.velocity):
            tau_dep = getattr(c, "tau_dependent", True) or getattr(r, "tau_dependent", True)
            vel.append(FunctionVelocity(
                fn=lambda T, t, c=c, r=r: c(T, t) - r(T, t),
                antiderivative_fn=lambda T, t, c=c, r=r: c.antiderivative(T, t) - r.antiderivative(T, t),
                tau_dependent=tau_dep,
            ))
        return RegimeSpec(tuple(vel), self.jump)

    def check_bounded(self, T_max: float, t_max: float, bound: float = VELOCITY_BOUND, n: int = 65):
        """Grid scan of |c_i| on [0, T_max] x [0, t_max]."""
        T, t = np.meshgrid(np.linspace(0, T_max, n), np.linspace(0, t_max, n), indexing="ij")
        for i in (0, 1):
            vals = self.c(i, T, t)
            if not np.all(np.isfinite(vals)) or np.max(np.abs(vals)) > bound:
                raise DomainError(f"velocity of state {i} not bounded by {bound} on the scanned domain")

    def check_jumps_above(self, T_max: float, floor: float = -1.0, n: int = 513):
        """Market use requires h_i(T) > -1 on [0, T_max]."""
        T = np.linspace(0, T_max, n)
        for i in (0, 1):
            if np.any(self.h(i, T) <= floor):
                raise DomainError(f"jump amplitude of state {i} not above {floor} on [0, {T_max}]")


def regime_from_config(spec) -> RegimeSpec:
    """Build a regime from a two-element list of per-state blocks."""
    if len(spec) != 2:
        raise DomainError("regime config needs one block per state")
    velocity = []
    jump = []
    for block in spec:
        kind = block.get("kind")
        if kind == "constant":
            velocity.append(LocalTimeVelocity(Constant(float(block["c"]))))
            jump.append(JumpProfile(Constant(float(block["h"]))))
            continue
        v = block["velocity"]
        if isinstance(v, dict) and v.get("kind") == "table2d":
            velocity.append(Table2DVelocity(np.asarray(v["T_grid"], float), np.asarray(v["t_grid"], float),
                                            np.asarray(v["values"], float)))
        else:
            velocity.append(LocalTimeVelocity(profile_from_config(v)))
        jump.append(JumpProfile(profile_from_config(block["jump"])))
    return RegimeSpec(tuple(velocity), tuple(jump))


# --- displacements and regime averages --------------------------------------

def segment_displacement(regime: RegimeSpec, state: int, T: float, s: float, t: float,
                         segment_origin: float = 0.0, atol: float = 1e-10) -> float:
    """Distance travelled on [s, t] inside one segment that began at ``segment_origin``."""
    if not segment_origin <= s <= t:
        raise DomainError("need segment_origin <= s <= t")
    if s == t:
        return 0.0
    vel = regime.velocity[state]
    has_closed_form = not isinstance(vel, FunctionVelocity) or vel.antiderivative_fn is not None
    if isinstance(vel, LocalTimeVelocity) and not hasattr(vel.profile, "integral"):
        has_closed_form = False
    if has_closed_form:
        return float(vel.antiderivative(T, t - segment_origin) - vel.antiderivative(T, s - segment_origin))
    return adaptive_gl(lambda u: vel(T, u - segment_origin), s, t, atol=atol)


@dataclass(frozen=True, eq=False)
class MeanCoefficients:
    """tau-averaged regime coefficients for one state on a time grid."""

    t: np.ndarray
    c_bar: np.ndarray
    l_bar: np.ndarray
    l_var: np.ndarray
    h: np.ndarray
    tail_mass: float


class RegimeAverages:
    """E over the previous sojourn tau ~ f_{1-i} of c_i(tau, t) and l_i(tau; t).

    Regimes whose velocity ignores tau are evaluated directly.
    """

    def __init__(self, regime: RegimeSpec, dists, n_nodes: int = 256, eps: float = TRUNCATION_EPS):
        self.regime = regime
        self.dists = tuple(dists)
        self._nodes = {}
        self.tail_mass = [0.0, 0.0]
        for i in (0, 1):
            if getattr(regime.velocity[i], "tau_dependent", True):
                other = self.dists[1 - i]
                xs, ws = expectation_nodes(other, n_nodes, eps)
                self._nodes[i] = (xs, ws)
                self.tail_mass[i] = max(0.0, 1.0 - float(np.sum(ws)))
                if self.tail_mass[i] > 10 * eps:
                    warnings.warn(f"tau quadrature for state {i} misses mass {self.tail_mass[i]:.2e}",
                                  RuntimeWarning, stacklevel=2)

    def _average(self, i, fn, t, power=1):
        t = np.asarray(t, dtype=float)
        if i not in self._nodes:
            return fn(0.0, t) ** power
        xs, ws = self._nodes[i]
        vals = fn(xs, t[..., None]) ** power
        return np.sum(vals * ws, axis=-1) / np.sum(ws)

    def c_bar(self, i: int, t):
        return self._average(i, lambda T, tt: self.regime.c(i, T, tt), t)

    def l_bar(self, i: int, t):
        return self._average(i, lambda T, tt: self.regime.antiderivative(i, T, tt), t)

    def l_second(self, i: int, t):
        return self._average(i, lambda T, tt: self.regime.antiderivative(i, T, tt), t, power=2)

    def l_var(self, i: int, t):
        if i not in self._nodes:
            return np.zeros_like(np.asarray(t, dtype=float))
        return np.maximum(self.l_second(i, t) - self.l_bar(i, t) ** 2, 0.0)

    def h(self, i: int, u):
        return self.regime.h(i, u)


def mean_regime_coefficients(regime: RegimeSpec, state: int, other_state_dist: SojournDistribution,
                             t_grid, n_nodes: int = 256) -> MeanCoefficients:
    """c-bar, l-bar (and the tau-variance of l) for ``state`` on ``t_grid``."""
    t = np.asarray(t_grid, dtype=float)
    if np.any(t < 0) or np.any(np.diff(t) < 0):
        raise DomainError("t_grid must be nonnegative and increasing")
    dists = [None, None]
    dists[1 - state] = other_state_dist
    dists[state] = other_state_dist  # unused placeholder
    avg = RegimeAverages(regime, dists, n_nodes)
    l_bar = avg.l_bar(state, t)
    l_bar = np.where(t == 0, 0.0, l_bar)
    return MeanCoefficients(t, avg.c_bar(state, t), l_bar, avg.l_var(state, t),
                            np.asarray(regime.h(state, t), float), avg.tail_mass[state])


# --- single path ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathRecord:
    """One realised path on a sample grid.

    ``X_left``/``X_right`` are the one-sided limits of X at each switch time;
    ``jump_log`` rows are (tau_n, exiting_state, T_n, h value).
    """

    flow: SwitchingFlow
    sample_times: np.ndarray
    states: np.ndarray
    X: np.ndarray
    drift: np.ndarray
    X_left: np.ndarray
    X_right: np.ndarray
    jump_log: np.ndarray
    kappa: np.ndarray
    prev_sojourns_used: np.ndarray
    S: np.ndarray | None = None

    def log_kappa(self) -> np.ndarray:
        return np.log(self.kappa)


def path_from_flow(flow: SwitchingFlow, regime: RegimeSpec, sample_grid) -> PathRecord:
    """Evaluate X, its drift part and kappa along a given flow."""
    grid = np.asarray(sample_grid, dtype=float)
    if np.any(grid < 0) or np.any(grid > flow.horizon) or np.any(np.diff(grid) < 0):
        raise DomainError("sample grid must be increasing inside [0, horizon]")
    n_sw = flow.n_switches
    origins = flow.segment_origins()
    # velocity argument of segment n is the sojourn completed at its start
    prev = np.concatenate([[flow.prev_sojourn_T0], flow.sojourns])
    states = np.array([flow.state_of_segment(n) for n in range(n_sw + 1)], dtype=int)
    full_disp = np.array([
        float(regime.antiderivative(states[n], prev[n], flow.sojourns[n])) for n in range(n_sw)
    ])
    jumps = np.array([float(regime.h(states[n], flow.sojourns[n])) for n in range(n_sw)])
    drift_at_switch = np.concatenate([[0.0], np.cumsum(full_disp)])
    jump_at_switch = np.concatenate([[0.0], np.cumsum(jumps)])
    with np.errstate(divide="ignore", invalid="ignore"):
        log1p_jumps = np.log1p(jumps)
    logk_at_switch = np.concatenate([[0.0], np.cumsum(log1p_jumps)])

    seg = np.searchsorted(flow.switch_times, grid, side="right")
    local = grid - origins[seg]
    partial = np.array([float(regime.antiderivative(states[k], prev[k], x)) for k, x in zip(seg, local)])
    drift = drift_at_switch[seg] + partial
    X = drift + jump_at_switch[seg]
    kappa = np.exp(logk_at_switch[seg])
    X_left = drift_at_switch[1:] + jump_at_switch[:-1]
    X_right = X_left + jumps
    jump_log = np.zeros(n_sw, dtype=[("tau", float), ("exiting_state", int), ("T", float), ("h", float)])
    jump_log["tau"] = flow.switch_times
    jump_log["exiting_state"] = states[:n_sw]
    jump_log["T"] = flow.sojourns
    jump_log["h"] = jumps
    return PathRecord(flow, grid, states[seg], X, drift, X_left, X_right, jump_log, kappa, prev)


def simulate_path(model: SwitchingModel, regime: RegimeSpec, horizon: float, sample_grid,
                  seed: int, replication: int = 0) -> PathRecord:
    """Exact piecewise-deterministic path: no time discretisation between switches."""
    flow = generate_flow(model, horizon, seed, replication)
    return path_from_flow(flow, regime, sample_grid)


# --- vectorised Monte Carlo --------------------------------------------------------

CHUNK_SIZE = 1 << 14


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Many independent paths observed at a few fixed times (arrays are paths x times)."""

    times: np.ndarray
    initial_state: int
    X: np.ndarray
    drift: np.ndarray
    log_kappa: np.ndarray
    log_bond: np.ndarray
    n_switches: np.ndarray
    occupation0: np.ndarray
    exits0: np.ndarray
    exits1: np.ndarray
    state: np.ndarray
    first_sojourn: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def S(self, spot: float = 1.0) -> np.ndarray:
        return spot * np.exp(self.drift + self.log_kappa)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TGM_THREADS", "1")))
    except ValueError:
        return 1


def _displacement(regime: RegimeSpec, state: np.ndarray, T: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    out = np.zeros(len(state))
    for i in (0, 1):
        m = state == i
        if np.any(m):
            out[m] = regime.antiderivative(i, T[m], hi[m]) - regime.antiderivative(i, T[m], lo[m])
    return out


def _jump(regime: RegimeSpec, state: np.ndarray, T: np.ndarray):
    out = np.zeros(len(state))
    for i in (0, 1):
        m = state == i
        if np.any(m):
            out[m] = regime.h(i, T[m])
    return out


def _sample_states(model: SwitchingModel, state: np.ndarray, u: np.ndarray):
    out = np.empty(len(state))
    for i in (0, 1):
        m = state == i
        if np.any(m):
            out[m] = model.dist(i).sample(u[m])
    return out


def _simulate_chunk(model, regime, times, n, seed, chunk, elapsed, rate_regime, max_switches):
    rng = make_rng(seed, chunk)
    nt = len(times)
    horizon = float(times[-1])
    first = model.initial_state
    state = np.full(n, first, dtype=int)
    if model.prev_sojourn is None:
        T_prev = model.dist(1 - first).sample(open_uniform(rng, n))
    else:
        T_prev = np.full(n, float(model.prev_sojourn))
    origin = np.zeros(n)
    X0 = np.zeros(n)
    drift0 = np.zeros(n)
    logk0 = np.zeros(n)
    logb0 = np.zeros(n)
    occ0 = np.zeros(n)
    ex = np.zeros((2, n), dtype=np.int64)
    out = {k: np.zeros((n, nt)) for k in ("X", "drift", "logk", "logb", "occ0")}
    out_int = {k: np.zeros((n, nt), dtype=np.int64) for k in ("nsw", "ex0", "ex1", "state")}
    next_idx = np.zeros(n, dtype=int)
    active = np.arange(n)

    u = open_uniform(rng, n)
    if elapsed > 0:
        dist = model.dist(first)
        sf_s = float(dist.survival(elapsed))
        if sf_s <= 0:
            raise DomainError(f"survival({elapsed}) is zero; cannot condition on no switch")
        # T > elapsed: invert survival(T) = survival(elapsed) * (1 - u)
        sojourn = dist.sample(1.0 - sf_s * (1.0 - u))
        sojourn = np.maximum(sojourn, elapsed)
    else:
        sojourn = _sample_states(model, state, u)
    first_sojourn = sojourn.copy()
    rounds = 0
    while active.size:
        st = state[active]
        tp = T_prev[active]
        org = origin[active]
        end = org + sojourn
        # record sample times falling inside [origin, end)
        for k in range(nt):
            m = (next_idx[active] == k) & (times[k] < end)
            if not np.any(m):
                continue
            idx = active[m]
            loc = times[k] - org[m]
            d = _displacement(regime, st[m], tp[m], np.zeros(m.sum()), loc)
            out["drift"][idx, k] = drift0[idx] + d
            out["X"][idx, k] = X0[idx] + d
            out["logk"][idx, k] = logk0[idx]
            if rate_regime is not None:
                out["logb"][idx, k] = logb0[idx] + _displacement(rate_regime, st[m], tp[m], np.zeros(m.sum()), loc)
            out["occ0"][idx, k] = occ0[idx] + np.where(st[m] == 0, loc, 0.0)
            out_int["nsw"][idx, k] = ex[0, idx] + ex[1, idx]
            out_int["ex0"][idx, k] = ex[0, idx]
            out_int["ex1"][idx, k] = ex[1, idx]
            out_int["state"][idx, k] = st[m]
            next_idx[idx] = k + 1
        done = end > horizon
        cont = ~done
        idx = active[cont]
        if idx.size:
            s_c, T_c, soj = st[cont], tp[cont], sojourn[cont]
            d = _displacement(regime, s_c, T_c, np.zeros(idx.size), soj)
            h = _jump(regime, s_c, soj)
            drift0[idx] += d
            X0[idx] += d + h
            with np.errstate(divide="ignore", invalid="ignore"):
                logk0[idx] += np.log1p(h)
            if rate_regime is not None:
                logb0[idx] += _displacement(rate_regime, s_c, T_c, np.zeros(idx.size), soj)
            occ0[idx] += np.where(s_c == 0, soj, 0.0)
            ex[s_c, idx] += 1
            origin[idx] += soj
            T_prev[idx] = soj
            state[idx] = 1 - s_c
        active = idx
        rounds += 1
        if rounds > max_switches:
            raise DomainError(f"more than {max_switches} switches on one path")
        if active.size:
            sojourn = _sample_states(model, state[active], open_uniform(rng, active.size))
    return out, out_int, first_sojourn


def simulate_batch(model: SwitchingModel, regime: RegimeSpec, times, n_paths: int, seed: int,
                   elapsed: float = 0.0, rate_regime: RegimeSpec | None = None,
                   chunk_size: int = CHUNK_SIZE, max_switches: int = 10**7) -> PathBatch:
    """Simulate ``n_paths`` independent paths and record them at ``times``.

    Chunk k of the paths uses the stream keyed by (seed, k), so results do not
    depend on how chunks are scheduled.  ``elapsed > 0`` conditions on no
    switch during [0, elapsed].
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise DomainError("times must be nonnegative and increasing")
    if times[-1] <= 0:
        raise DomainError("horizon must be positive")
    sizes = [min(chunk_size, n_paths - start) for start in range(0, n_paths, chunk_size)]
    jobs = [(model, regime, times, n, seed, k, elapsed, rate_regime, max_switches) for k, n in enumerate(sizes)]
    threads = _threads()
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda a: _simulate_chunk(*a), jobs))
    else:
        results = [_simulate_chunk(*a) for a in jobs]

    def cat(part, key):
        return np.concatenate([r[part][key] for r in results], axis=0)

    return PathBatch(
        times=times,
        initial_state=model.initial_state,
        X=cat(0, "X"),
        drift=cat(0, "drift"),
        log_kappa=cat(0, "logk"),
        log_bond=cat(0, "logb"),
        n_switches=cat(1, "nsw"),
        occupation0=cat(0, "occ0"),
        exits0=cat(1, "ex0"),
        exits1=cat(1, "ex1"),
        state=cat(1, "state"),
        first_sojourn=np.concatenate([r[2] for r in results]),
    )
