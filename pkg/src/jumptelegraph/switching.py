"""Two-state semi-Markov switching: sojourn laws and the flow of switching times."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.interpolate import CubicHermiteSpline

from .quadrature import cell_integrals

TRUNCATION_EPS = 1e-10
MAX_SWITCHES = 10**7

# half-ulp shift that maps Generator.random() output into the open interval (0, 1)
_HALF_ULP = 2.0**-54


class DomainError(ValueError):
    """Argument outside the operation's domain."""


class DegenerateConditionError(ValueError):
    """Conditioning on an event of zero probability."""


class ExplosionError(RuntimeError):
    """Switch count exceeded the configured cap."""


def make_rng(seed: int, replication: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, replication).

    Streams for different replications are independent and do not depend
    on the order in which they are created.
    """
    key = np.random.SeedSequence([int(seed), int(replication)]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def open_uniform(rng: np.random.Generator, size=None):
    """Uniform variates strictly inside (0, 1)."""
    return rng.random(size) + _HALF_ULP


class SojournDistribution:
    """Law of one state's inter-switching time.

    Subclasses provide ``survival``, ``density``, ``hazard`` and ``sample``
    as vectorised functions of time (or of a uniform variate for ``sample``).
    """

    truncation_eps: float = TRUNCATION_EPS
    kind: str = "abstract"

    def survival(self, t):
        raise NotImplementedError

    def density(self, t):
        raise NotImplementedError

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        sf = self.survival(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(sf > 0, self.density(t) / sf, np.inf)

    def cdf(self, t):
        return 1.0 - self.survival(t)

    def sample(self, u):
        """Inverse-CDF map: smallest t with 1 - survival(t) >= u."""
        raise NotImplementedError

    def support_truncation(self, eps: float | None = None) -> float:
        """Time beyond which the remaining mass is below ``eps``."""
        eps = self.truncation_eps if eps is None else eps
        return float(self.sample(1.0 - eps))

    def mean(self) -> float:
        upper = self.support_truncation()
        grid = np.linspace(0.0, upper, 513)
        return float(np.sum(cell_integrals(self.survival, grid, 16)))

    def to_config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Exponential(SojournDistribution):
    rate: float
    kind = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise DomainError(f"exponential rate must be positive, got {self.rate}")

    def survival(self, t):
        return np.exp(-self.rate * np.maximum(np.asarray(t, dtype=float), 0.0))

    def density(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= 0, self.rate * np.exp(-self.rate * np.maximum(t, 0.0)), 0.0)

    def hazard(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.rate)

    def sample(self, u):
        return -np.log1p(-np.asarray(u, dtype=float)) / self.rate

    def support_truncation(self, eps=None):
        eps = self.truncation_eps if eps is None else eps
        return -math.log(eps) / self.rate

    def mean(self):
        return 1.0 / self.rate

    def to_config(self):
        return {"kind": "exponential", "rate": self.rate}


@dataclass(frozen=True)
class Gamma(SojournDistribution):
    shape: float
    rate: float
    kind = "gamma"

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise DomainError("gamma shape and rate must be positive")

    @property
    def _law(self):
        return stats.gamma(a=self.shape, scale=1.0 / self.rate)

    def survival(self, t):
        return self._law.sf(np.maximum(np.asarray(t, dtype=float), 0.0))

    def density(self, t):
        return self._law.pdf(np.asarray(t, dtype=float))

    def hazard(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        law = self._law
        with np.errstate(divide="ignore"):
            return np.exp(law.logpdf(t) - law.logsf(t))

    def sample(self, u):
        u = np.asarray(u, dtype=float)
        # isf keeps precision for u close to 1
        return self._law.isf(1.0 - u)

    def mean(self):
        return self.shape / self.rate

    def to_config(self):
        return {"kind": "gamma", "shape": self.shape, "rate": self.rate}


@dataclass(frozen=True)
class Weibull(SojournDistribution):
    shape: float
    scale: float
    kind = "weibull"

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise DomainError("weibull shape and scale must be positive")

    def survival(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        return np.exp(-((t / self.scale) ** self.shape))

    def density(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= 0, self.hazard(t) * self.survival(t), 0.0)

    def hazard(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        k, s = self.shape, self.scale
        with np.errstate(divide="ignore"):
            return (k / s) * (t / s) ** (k - 1.0)

    def sample(self, u):
        u = np.asarray(u, dtype=float)
        return self.scale * (-np.log1p(-u)) ** (1.0 / self.shape)

    def mean(self):
        return self.scale * math.gamma(1.0 + 1.0 / self.shape)

    def to_config(self):
        return {"kind": "weibull", "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True, eq=False)
class Tabulated(SojournDistribution):
    """Survival given on a grid; log-survival is interpolated linearly.

    The hazard is therefore piecewise constant and the last segment's
    hazard is used beyond the final grid point.
    """

    t: np.ndarray
    survival_values: np.ndarray
    kind = "table"

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        sf = np.asarray(self.survival_values, dtype=float)
        if t.ndim != 1 or t.shape != sf.shape or len(t) < 2:
            raise DomainError("table needs matching 1-d t and survival columns of length >= 2")
        if t[0] != 0.0 or sf[0] != 1.0:
            raise DomainError("table must start at t=0 with survival 1")
        if np.any(np.diff(t) <= 0):
            raise DomainError("table times must be strictly increasing")
        if np.any(np.diff(sf) >= 0) or sf[-1] <= 0:
            raise DomainError("table survival column must be strictly decreasing and positive")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "survival_values", sf)
        cumhaz = -np.log(sf)
        object.__setattr__(self, "_cumhaz", cumhaz)
        object.__setattr__(self, "_rates", np.diff(cumhaz) / np.diff(t))

    def cumulative_hazard(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        inside = np.interp(t, self.t, self._cumhaz)
        beyond = self._cumhaz[-1] + self._rates[-1] * (t - self.t[-1])
        return np.where(t <= self.t[-1], inside, beyond)

    def survival(self, t):
        return np.exp(-self.cumulative_hazard(t))

    def hazard(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        idx = np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, len(self._rates) - 1)
        return self._rates[idx]

    def density(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= 0, self.hazard(t) * self.survival(t), 0.0)

    def sample(self, u):
        target = -np.log1p(-np.asarray(u, dtype=float))
        inside = np.interp(target, self._cumhaz, self.t)
        beyond = self.t[-1] + (target - self._cumhaz[-1]) / self._rates[-1]
        return np.where(target <= self._cumhaz[-1], inside, beyond)

    def to_config(self):
        return {"kind": "table", "t": self.t.tolist(), "survival": self.survival_values.tolist()}


@dataclass(frozen=True, eq=False)
class HazardDistribution(SojournDistribution):
    """Sojourn law specified by its hazard rate function.

    The cumulative hazard is integrated on ``grid`` and interpolated by
    cubic Hermite splines using the exact hazard as the derivative, so
    ``log survival`` equals minus the integrated hazard at the grid nodes.
    Past the grid end the last hazard value is continued.
    """

    hazard_fn: object
    grid: np.ndarray
    kind = "hazard"

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
            raise DomainError("hazard grid must start at 0 and increase strictly")
        rates = np.asarray(self.hazard_fn(grid), dtype=float)
        cumhaz = np.zeros(len(grid))
        cumhaz[1:] = np.cumsum(cell_integrals(self.hazard_fn, grid, 16))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "_cumhaz", cumhaz)
        object.__setattr__(self, "_spline", CubicHermiteSpline(grid, cumhaz, rates))
        object.__setattr__(self, "_tail_rate", float(rates[-1]))

    def cumulative_hazard(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        end = self.grid[-1]
        inside = self._spline(np.minimum(t, end))
        beyond = self._cumhaz[-1] + self._tail_rate * (t - end)
        return np.where(t <= end, inside, beyond)

    def survival(self, t):
        return np.exp(-self.cumulative_hazard(t))

    def hazard(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        end = self.grid[-1]
        return np.where(t <= end, self.hazard_fn(np.minimum(t, end)), self._tail_rate)

    def density(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t >= 0, self.hazard(t) * self.survival(t), 0.0)

    def sample(self, u):
        target = -np.log1p(-np.asarray(u, dtype=float))
        t = np.interp(target, self._cumhaz, self.grid)
        end = self.grid[-1]
        beyond = end + (target - self._cumhaz[-1]) / max(self._tail_rate, 1e-300)
        t = np.where(target <= self._cumhaz[-1], t, beyond)
        for _ in range(3):
            rate = self.hazard(t)
            step = (self.cumulative_hazard(t) - target) / np.where(rate > 0, rate, np.inf)
            t = np.maximum(t - step, 0.0)
        return t

    def to_config(self):
        return {"kind": "table", "t": self.grid.tolist(),
                "survival": self.survival(self.grid).tolist()}


def distribution_from_config(spec: dict) -> SojournDistribution:
    kind = spec.get("kind")
    if kind == "exponential":
        return Exponential(float(spec["rate"]))
    if kind == "gamma":
        return Gamma(float(spec["shape"]), float(spec["rate"]))
    if kind == "weibull":
        return Weibull(float(spec["shape"]), float(spec["scale"]))
    if kind == "table":
        return Tabulated(np.asarray(spec["t"], float), np.asarray(spec["survival"], float))
    raise DomainError(f"unknown distribution kind {kind!r}")


def conditional_survival(dist: SojournDistribution, t, s) -> float:
    """P(T > t | T > s) = survival(t) / survival(s) for 0 <= s < t."""
    t = float(t)
    s = float(s)
    if s < 0 or s >= t:
        raise DomainError(f"conditional survival needs 0 <= s < t, got s={s}, t={t}")
    denom = float(dist.survival(s))
    if denom <= 0.0:
        raise DegenerateConditionError(f"survival({s}) is zero")
    return float(dist.survival(t)) / denom


def sample_sojourn(dist: SojournDistribution, u) -> float:
    """Inverse-CDF realisation of one sojourn from a uniform variate in (0, 1)."""
    u = float(u)
    if not 0.0 < u < 1.0:
        raise DomainError(f"uniform variate must lie in (0, 1), got {u}")
    return float(dist.sample(u))


@dataclass(frozen=True)
class SwitchingModel:
    """Sojourn laws for both states plus the starting convention.

    ``prev_sojourn=None`` draws the virtual previous sojourn T_0 from the
    law of the state opposite to ``initial_state``; a number fixes it.
    """

    dist0: SojournDistribution
    dist1: SojournDistribution
    initial_state: int = 0
    prev_sojourn: float | None = None

    def __post_init__(self):
        if self.initial_state not in (0, 1):
            raise DomainError("initial_state must be 0 or 1")
        if self.prev_sojourn is not None and self.prev_sojourn < 0:
            raise DomainError("fixed previous sojourn must be nonnegative")

    def dist(self, state: int) -> SojournDistribution:
        return self.dist0 if state == 0 else self.dist1

    @property
    def dists(self) -> tuple[SojournDistribution, SojournDistribution]:
        return (self.dist0, self.dist1)

    def starting_in(self, state: int) -> "SwitchingModel":
        return SwitchingModel(self.dist0, self.dist1, state, self.prev_sojourn)


@dataclass(frozen=True, eq=False)
class SwitchingFlow:
    """Realised switching times on [0, horizon].

    ``sojourns`` holds T_1..T_N for the N switches up to the horizon;
    ``censored_sojourn`` is the sojourn that straddles the horizon.
    """

    initial_state: int
    prev_sojourn_T0: float
    sojourns: np.ndarray
    censored_sojourn: float
    horizon: float
    switch_times: np.ndarray = field(init=False)

    def __post_init__(self):
        sojourns = np.asarray(self.sojourns, dtype=float)
        object.__setattr__(self, "sojourns", sojourns)
        object.__setattr__(self, "switch_times", np.cumsum(sojourns))

    @property
    def n_switches(self) -> int:
        return len(self.sojourns)

    def state_of_segment(self, n: int) -> int:
        """State on [tau_n, tau_{n+1})."""
        return self.initial_state ^ (n % 2)

    def segment_origins(self) -> np.ndarray:
        return np.concatenate([[0.0], self.switch_times])

    def segment_sojourns(self) -> np.ndarray:
        """Full length of every segment, the last one censored."""
        return np.concatenate([self.sojourns, [self.censored_sojourn]])


def generate_flow(model: SwitchingModel, horizon: float, seed: int, replication: int = 0,
                  max_switches: int = MAX_SWITCHES) -> SwitchingFlow:
    """Draw sojourns alternately until the first switch beyond ``horizon``."""
    if not horizon > 0:
        raise DomainError("horizon must be positive")
    rng = make_rng(seed, replication)
    first = model.initial_state
    u0 = open_uniform(rng)
    if model.prev_sojourn is None:
        t0 = float(model.dist(1 - first).sample(u0))
    else:
        t0 = float(model.prev_sojourn)
    chunks: list[np.ndarray] = []
    clock = 0.0
    count = 0
    block = 64
    parity = 0  # state offset of the next sojourn relative to the initial state
    while True:
        u = open_uniform(rng, block)
        draws = np.empty(block)
        own = np.arange(block) % 2 == 0 if parity == 0 else np.arange(block) % 2 == 1
        draws[own] = model.dist(first).sample(u[own])
        draws[~own] = model.dist(1 - first).sample(u[~own])
        if np.any(draws <= 0):
            raise DomainError("sampled a non-positive sojourn; atomic sojourn laws are unsupported")
        times = clock + np.cumsum(draws)
        beyond = np.nonzero(times > horizon)[0]
        if len(beyond):
            k = beyond[0]
            chunks.append(draws[:k])
            count += k
            if count > max_switches:
                raise ExplosionError(f"more than {max_switches} switches before horizon {horizon}")
            sojourns = np.concatenate(chunks) if chunks else np.empty(0)
            return SwitchingFlow(first, t0, sojourns, float(draws[k]), float(horizon))
        chunks.append(draws)
        count += block
        if count > max_switches:
            raise ExplosionError(f"more than {max_switches} switches before horizon {horizon}")
        clock = float(times[-1])
        parity ^= block % 2
        block = min(block * 2, 1 << 16)


def state_at(flow: SwitchingFlow, t: float) -> tuple[int, float, float]:
    """State at time t with the last switching time and the elapsed time since it."""
    if not 0.0 <= t <= flow.horizon:
        raise DomainError(f"t={t} outside [0, {flow.horizon}]")
    n = int(np.searchsorted(flow.switch_times, t, side="right"))
    last = 0.0 if n == 0 else float(flow.switch_times[n - 1])
    return flow.state_of_segment(n), last, t - last
