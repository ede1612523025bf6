"""Volterra systems for the moments and the density of the jump-telegraph process.

Two routes are provided for the moments:

* ``grid``: product-trapezoidal time stepping of the coupled renewal system
  (any sojourn laws);
* ``closed_form_exp``: the explicit resolvent for exponential sojourns,
  evaluated on Gauss-Legendre panels with spectral accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .process import RegimeAverages, RegimeSpec, simulate_batch
from .quadrature import cell_integrals, gauss_legendre, gl_nodes
from .switching import DegenerateConditionError, DomainError, Exponential, SwitchingModel


class MethodMismatchError(DomainError):
    """Requested method does not apply to the given model."""


# --- exponential helpers --------------------------------------------------------

def phi_lambda(lam: float, t):
    """(1 - exp(-2 lam t)) / (2 lam), stable for small t."""
    t = np.asarray(t, dtype=float)
    if lam <= 0:
        raise DomainError("lambda must be positive")
    return -np.expm1(-2.0 * lam * t) / (2.0 * lam)


@dataclass(frozen=True)
class MatrixExpLambda:
    """exp(t Lambda) for the two-state generator with rates lambda0, lambda1."""

    lambda0: float
    lambda1: float

    @property
    def half_sum(self) -> float:
        return 0.5 * (self.lambda0 + self.lambda1)

    @property
    def generator(self) -> np.ndarray:
        return np.array([[-self.lambda0, self.lambda0], [self.lambda1, -self.lambda1]])

    @property
    def L(self) -> np.ndarray:
        return np.array([[0.0, self.lambda0], [self.lambda1, 0.0]])

    def __call__(self, t: float) -> np.ndarray:
        return np.eye(2) + phi_lambda(self.half_sum, t) * self.generator


def _exp_rates(dists) -> tuple[float, float]:
    if not all(isinstance(d, Exponential) for d in dists):
        raise MethodMismatchError("closed-form solution needs exponential sojourns")
    return dists[0].rate, dists[1].rate


# --- curves ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MomentCurves:
    t: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    sigma0: np.ndarray | None = None
    sigma1: np.ndarray | None = None
    s_grid: np.ndarray | None = None
    cond_mu0: np.ndarray | None = None  # shape (len(s_grid), len(t))
    cond_mu1: np.ndarray | None = None

    @property
    def grid(self) -> np.ndarray:
        return self.t

    def mu(self, i: int) -> np.ndarray:
        return self.mu0 if i == 0 else self.mu1

    def sigma(self, i: int) -> np.ndarray:
        return self.sigma0 if i == 0 else self.sigma1


@dataclass(frozen=True, eq=False)
class VolterraPairProblem:
    """u_i(t) = g_i(t) + int_0^t u_{1-i}(t - v) f_i(v) dv on a uniform grid."""

    dists: tuple
    forcings: tuple
    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        step = np.diff(grid)
        if grid[0] != 0.0 or np.any(step <= 0) or not np.allclose(step, step[0], rtol=1e-9, atol=0):
            raise DomainError("grid must be uniform, start at 0 and have positive step")
        object.__setattr__(self, "grid", grid)

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0])


def uniform_grid(t_max: float, dt: float) -> np.ndarray:
    n = int(round(t_max / dt))
    if abs(n * dt - t_max) > 1e-9 * max(1.0, t_max):
        raise DomainError(f"t_max={t_max} is not a multiple of dt={dt}")
    return np.arange(n + 1) * dt


# --- product-integration weights ---------------------------------------------------

def _density_weights(dist, grid: np.ndarray, start: float = 0.0, scale: float = 1.0):
    """Left/right node weights for int f(v) y(v) dv with y piecewise linear.

    Cell j spans [start + grid_j, start + grid_{j+1}] in the kernel variable.
    Moments come from the survival function, so densities singular at 0 are fine.
    """
    a = start + grid[:-1]
    b = start + grid[1:]
    d = b - a
    sa = dist.survival(a)
    sb = dist.survival(b)
    m0 = sa - sb
    m1 = -d * sb + cell_integrals(dist.survival, np.concatenate([a, b[-1:]]), 8)  # int (v-a) f dv
    right = m1 / d
    left = m0 - right
    return left * scale, right * scale


def _kernel_weights(kernel, grid: np.ndarray, n: int = 8):
    """Left/right node weights for int K(v) y(v) dv with a smooth kernel K."""
    a = grid[:-1]
    b = grid[1:]
    xs, ws = gl_nodes(a, b, n)
    kv = kernel(xs) * ws
    frac = (xs - a[:, None]) / (b - a)[:, None]
    right = np.sum(kv * frac, axis=-1)
    left = np.sum(kv, axis=-1) - right
    return left, right


def _convolve(left: np.ndarray, right: np.ndarray, y: np.ndarray) -> np.ndarray:
    """c_n = sum_j [left_j y_{n-j} + right_j y_{n-j-1}] over cells j < n.

    This is int_0^{t_n} K(v) y(t_n - v) dv for y linear on the grid cells.
    """
    n = len(y)
    out = np.zeros(n)
    if n < 2:
        return out
    cl = fftconvolve(left, y)[:n]
    cr = fftconvolve(right, y)[: n - 1]
    out[1:] = cl[1:] + cr
    k = np.arange(1, min(n, len(left)))
    out[k] -= left[k] * y[0]
    return out


def _convolve_direct(left, right, y):
    n = len(y)
    out = np.zeros(n)
    for k in range(1, n):
        out[k] = np.dot(left[:k], y[k:0:-1]) + np.dot(right[:k], y[k - 1::-1])
    return out


def solve_volterra_pair(problem: VolterraPairProblem):
    """Product-trapezoidal forward stepping; second order in the step size."""
    grid = problem.grid
    n = len(grid)
    g0 = np.asarray(problem.forcings[0], dtype=float)
    g1 = np.asarray(problem.forcings[1], dtype=float)
    if g0.shape != grid.shape or g1.shape != grid.shape:
        raise DomainError("forcings must be sampled on the grid")
    left0, right0 = _density_weights(problem.dists[0], grid)
    left1, right1 = _density_weights(problem.dists[1], grid)
    u0 = np.zeros(n)
    u1 = np.zeros(n)
    u0[0], u1[0] = g0[0], g1[0]
    a00, a11 = left0[0], left1[0]
    det = 1.0 - a00 * a11
    for k in range(1, n):
        # contributions from already-known values u(t_{k-j}), j >= 1
        r0 = g0[k] + np.dot(left0[1:k], u1[k - 1:0:-1]) + np.dot(right0[:k], u1[k - 1::-1])
        r1 = g1[k] + np.dot(left1[1:k], u0[k - 1:0:-1]) + np.dot(right1[:k], u0[k - 1::-1])
        u0[k] = (r0 + a00 * r1) / det
        u1[k] = (r1 + a11 * r0) / det
    if not (np.all(np.isfinite(u0)) and np.all(np.isfinite(u1))):
        raise FloatingPointError("Volterra solution overflowed")
    return u0, u1


# --- forcings ------------------------------------------------------------------------

def mean_forcing(regime: RegimeSpec, dists, t_grid, s: float | None = None, averages=None):
    """a_i(t) = int_0^t (survival_i c-bar_i + f_i h_i) du, or the conditional a_i(t | s)."""
    t = np.asarray(t_grid, dtype=float)
    avg = averages or RegimeAverages(regime, dists)
    out = []
    for i in (0, 1):
        dist = dists[i]

        def integrand(u, i=i, dist=dist):
            return dist.survival(u) * avg.c_bar(i, u) + dist.density(u) * avg.h(i, u)

        lo = 0.0 if s is None else float(s)
        pts = np.concatenate([[lo], np.maximum(t, lo)]) if s is not None else np.concatenate([[0.0], t])
        # integrate cell by cell along the sorted evaluation points
        order = np.argsort(pts, kind="stable")
        sorted_pts = pts[order]
        cum = np.zeros(len(pts))
        cum[1:] = np.cumsum(cell_integrals(integrand, sorted_pts, 16))
        vals = np.empty(len(pts))
        vals[order] = cum
        a = vals[1:] - vals[0]
        if s is not None:
            if np.any(t < s):
                raise DomainError("conditional forcing needs t >= s")
            sf = float(dist.survival(s))
            if sf < 1e-300:
                raise DegenerateConditionError(f"survival_{i}({s}) underflows")
            a = float(avg.l_bar(i, s)) + a / sf
        out.append(a)
    return out[0], out[1]


def _grid_forcing_terms(avg: RegimeAverages, dists, grid, i: int, exact: bool):
    """Cumulative integrals of the known (mu-independent) parts of b_i."""
    dist = dists[i]

    def A(u):
        return avg.l_bar(i, u) + avg.h(i, u)

    pieces = {
        "I0": lambda u: dist.density(u),
        "I1": lambda u: A(u) * dist.density(u),
        "I2": lambda u: A(u) ** 2 * dist.density(u),
    }
    if exact:
        pieces["IV"] = lambda u: avg.l_var(i, u) * dist.density(u)
    out = {}
    for key, fn in pieces.items():
        cum = np.zeros(len(grid))
        cum[1:] = np.cumsum(cell_integrals(fn, grid, 8))
        out[key] = cum
    if "IV" not in out:
        out["IV"] = np.zeros(len(grid))
    return out, A


def variance_forcing(regime: RegimeSpec, dists, mean_curves: MomentCurves, t_grid=None,
                     mode: str = "exact", averages=None):
    """b_i on the uniform grid of ``mean_curves``.

    ``mode='exact'`` averages the square over the previous sojourn (adds the
    tau-variance of l_i); ``mode='literal'`` squares the averaged quantities.
    Both agree for velocities that ignore the previous sojourn.
    """
    if mode not in ("exact", "literal"):
        raise DomainError(f"unknown variance mode {mode!r}")
    grid = np.asarray(mean_curves.t if t_grid is None else t_grid, dtype=float)
    if len(grid) != len(mean_curves.t) or not np.allclose(grid, mean_curves.t):
        raise DomainError("mean curves must cover the variance grid")
    avg = averages or RegimeAverages(regime, dists)
    mus = (np.asarray(mean_curves.mu0), np.asarray(mean_curves.mu1))
    out = []
    for i in (0, 1):
        dist = dists[i]
        terms, A = _grid_forcing_terms(avg, dists, grid, i, mode == "exact")
        m = mus[i]
        nu = mus[1 - i]
        lf, rf = _density_weights(dist, grid)
        la, ra = _kernel_weights(lambda u: A(u) * dist.density(u), grid)
        conv_f_nu = _convolve(lf, rf, nu)
        conv_f_nu2 = _convolve(lf, rf, nu * nu)
        conv_af_nu = _convolve(la, ra, nu)
        sf = dist.survival(grid)
        lbar = avg.l_bar(i, grid)
        lbar = np.where(grid == 0, 0.0, lbar)
        b = sf * (lbar - m) ** 2
        b += terms["I2"] - 2 * m * terms["I1"] + m * m * terms["I0"]
        b += 2 * (conv_af_nu - m * conv_f_nu) + conv_f_nu2
        if mode == "exact":
            b += sf * avg.l_var(i, grid) + terms["IV"]
        out.append(b)
    return out[0], out[1]


# --- grid route --------------------------------------------------------------------

def mean_curves(regime: RegimeSpec, dists, t_max: float, dt: float = 1e-3, averages=None) -> MomentCurves:
    grid = uniform_grid(t_max, dt)
    avg = averages or RegimeAverages(regime, dists)
    a0, a1 = mean_forcing(regime, dists, grid, averages=avg)
    mu0, mu1 = solve_volterra_pair(VolterraPairProblem(tuple(dists), (a0, a1), grid))
    return MomentCurves(grid, mu0, mu1)


def variance_curves(regime: RegimeSpec, dists, t_max: float, dt: float = 1e-3, method: str = "grid",
                    mode: str = "exact", averages=None, t_eval=None) -> MomentCurves:
    """Means and variances on a uniform grid.

    ``method='grid'`` time-steps both Volterra systems; ``method='closed_form_exp'``
    evaluates the exponential-case resolvent and interpolates to the grid.
    """
    if method == "grid":
        avg = averages or RegimeAverages(regime, dists)
        mc = mean_curves(regime, dists, t_max, dt, avg)
        b0, b1 = variance_forcing(regime, dists, mc, mode=mode, averages=avg)
        s0, s1 = solve_volterra_pair(VolterraPairProblem(tuple(dists), (b0, b1), mc.t))
        return MomentCurves(mc.t, mc.mu0, mc.mu1, np.maximum(s0, 0.0), np.maximum(s1, 0.0))
    if method == "closed_form_exp":
        sol = ClosedFormExp(regime, dists, t_max, mode=mode, averages=averages)
        grid = uniform_grid(t_max, dt) if t_eval is None else np.asarray(t_eval, float)
        mu0, mu1 = sol.mu(grid)
        s0, s1 = sol.sigma(grid)
        return MomentCurves(grid, mu0, mu1, np.maximum(s0, 0.0), np.maximum(s1, 0.0))
    raise MethodMismatchError(f"unknown method {method!r}")


# --- closed-form route ----------------------------------------------------------------

class PanelFunction:
    """Values on Gauss-Legendre panels over [0, T] with in-panel polynomial interpolation."""

    def __init__(self, t_max: float, width: float, order: int = 16):
        n_panels = max(1, int(math.ceil(t_max / width - 1e-12)))
        self.t_max = float(t_max)
        self.width = self.t_max / n_panels
        self.order = order
        self.edges = np.linspace(0.0, self.t_max, n_panels + 1)
        x, w = gauss_legendre(order)
        self.ref_x = x
        self.ref_w = w
        self.nodes = self.edges[:-1, None] + self.width * x[None, :]
        # barycentric weights for the reference nodes
        diff = x[:, None] - x[None, :]
        np.fill_diagonal(diff, 1.0)
        self.bary = 1.0 / np.prod(diff, axis=1)
        # integration matrix: int_0^{x_k} ell_j(s) ds on the reference panel
        V = np.vander(2 * x - 1, order, increasing=True)
        coeffs = np.linalg.inv(V)  # monomial coefficients (in 2x-1) of each Lagrange basis poly
        powers = np.arange(order)
        z = 2 * x - 1
        prim = (z[:, None] ** (powers + 1) - (-1.0) ** (powers + 1)) / (powers + 1) / 2.0
        self.int_matrix = prim @ coeffs  # rows: upper limit node, cols: basis

    @property
    def flat_nodes(self) -> np.ndarray:
        return self.nodes.ravel()

    def cumulative(self, values: np.ndarray) -> np.ndarray:
        """Running integral from 0 to every node."""
        v = values.reshape(self.nodes.shape)
        within = self.width * (v @ self.int_matrix.T)
        totals = self.width * (v @ self.ref_w)
        offsets = np.concatenate([[0.0], np.cumsum(totals)[:-1]])
        return (within + offsets[:, None]).ravel()

    def cumulative_decay(self, values: np.ndarray, rate: float) -> np.ndarray:
        """int_0^t exp(-rate (t - u)) g(u) du at every node."""
        v = values.reshape(self.nodes.shape)
        rel = self.nodes - self.edges[:-1, None]
        grow = np.exp(rate * rel)
        within = self.width * ((v * grow) @ self.int_matrix.T)  # int_{p}^{x} e^{rate(u-p)} g du
        panel_total = self.width * ((v * grow) @ self.ref_w)
        out = np.empty_like(v)
        carry = 0.0
        decay_panel = math.exp(-rate * self.width)
        for k in range(v.shape[0]):
            out[k] = np.exp(-rate * rel[k]) * (carry + within[k])
            carry = decay_panel * (carry + panel_total[k])
        return out.ravel()

    def interpolate(self, values: np.ndarray, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        v = values.reshape(self.nodes.shape)
        k = np.clip(((t / self.width)).astype(int), 0, self.nodes.shape[0] - 1)
        x = (t - self.edges[k]) / self.width
        diff = x[..., None] - self.ref_x
        exact = np.isclose(diff, 0.0, atol=1e-15)
        diff = np.where(exact, 1.0, diff)
        terms = self.bary / diff
        num = np.sum(terms * v[k], axis=-1)
        den = np.sum(terms, axis=-1)
        res = num / den
        hit = np.any(exact, axis=-1)
        if np.any(hit):
            res[hit] = v[k[hit], np.argmax(exact[hit], axis=-1)]
        return res


class ClosedFormExp:
    """Exponential-sojourn solution mu = a + int (I + phi(t-u) Lambda) L a du (same for sigma).

    All integrals are evaluated on Gauss-Legendre panels narrower than
    1 / (lambda0 + lambda1), which gives near machine-precision curves that are
    independent of the time-stepping solver.
    """

    def __init__(self, regime: RegimeSpec, dists, t_max: float, mode: str = "exact", order: int = 16,
                 averages=None):
        self.l0, self.l1 = _exp_rates(dists)
        self.regime = regime
        self.dists = tuple(dists)
        self.mode = mode
        self.avg = averages or RegimeAverages(regime, dists)
        lam_sum = self.l0 + self.l1
        self.panels = PanelFunction(t_max, min(0.05, 1.0 / lam_sum), order)
        self.M = MatrixExpLambda(self.l0, self.l1)
        self._a = self._forcing_a()
        self._mu = self._resolve(self._a)
        self._b = None
        self._sigma = None

    def _forcing_a(self):
        t = self.panels.flat_nodes
        out = []
        for i in (0, 1):
            d = self.dists[i]
            integrand = d.survival(t) * self.avg.c_bar(i, t) + d.density(t) * self.avg.h(i, t)
            out.append(self.panels.cumulative(integrand))
        return np.array(out)

    def _resolve(self, g: np.ndarray) -> np.ndarray:
        """g + int_0^t (I + phi(t-u) Lambda) L g(u) du at every node."""
        Lg = self.M.L @ g
        lam2 = self.l0 + self.l1
        C1 = np.array([self.panels.cumulative(Lg[k]) for k in (0, 1)])
        E = np.array([self.panels.cumulative_decay(Lg[k], lam2) for k in (0, 1)])
        return g + C1 + (self.M.generator @ (C1 - E)) / lam2

    def a(self, t):
        return tuple(self.panels.interpolate(self._a[i], t) for i in (0, 1))

    def mu(self, t):
        t = np.asarray(t, dtype=float)
        return tuple(np.where(t == 0, 0.0, self.panels.interpolate(self._mu[i], t)) for i in (0, 1))

    def _forcing_b_constant(self):
        """b_i for constant c_i, h_i: every convolution is an exponential decay, so O(N)."""
        P = self.panels
        t = P.flat_nodes
        (c0, c1), (h0, h1) = self.regime.constants()
        out = np.zeros((2, len(t)))
        for i, (c, h, lam) in enumerate(((c0, h0, self.l0), (c1, h1, self.l1))):
            m = self._mu[i]
            nu = self._mu[1 - i]

            def E(g):
                return lam * P.cumulative_decay(g, lam)

            D = c * t + h - m
            b = np.exp(-lam * t) * (c * t - m) ** 2
            b += D * D * E(np.ones_like(t)) + c * c * E(t * t) + E(nu * nu)
            b += -2 * D * c * E(t) + 2 * D * E(nu) - 2 * c * E(t * nu)
            out[i] = b
        return out

    def _forcing_b(self):
        if self.regime.is_constant():
            return self._forcing_b_constant()
        P = self.panels
        t_nodes = P.flat_nodes
        out = np.zeros((2, len(t_nodes)))
        for i in (0, 1):
            dist = self.dists[i]
            m_all = self._mu[i]
            nu = self._mu[1 - i]
            lbar = self.avg.l_bar(i, t_nodes)
            sf = dist.survival(t_nodes)
            b = sf * (lbar - m_all) ** 2
            if self.mode == "exact":
                b = b + sf * self.avg.l_var(i, t_nodes)
            # substitute v = t - u so mu_{1-i} is needed at panel nodes (full panels)
            for j, tj in enumerate(t_nodes):
                k = int(j // P.order)
                m = m_all[j]
                full_v = P.nodes[:k].ravel()
                full_w = np.tile(P.ref_w * P.width, k)
                pv, pw = gl_nodes(P.edges[k], tj, P.order)
                v = np.concatenate([full_v, pv])
                w = np.concatenate([full_w, pw])
                nu_v = np.concatenate([nu[: k * P.order], P.interpolate(nu, pv)])
                u = tj - v
                A = self.avg.l_bar(i, u) + self.avg.h(i, u)
                integrand = (A + nu_v - m) ** 2
                if self.mode == "exact":
                    integrand = integrand + self.avg.l_var(i, u)
                b[j] += np.dot(w, integrand * dist.density(u))
            out[i] = b
        return out

    def b(self, t):
        if self._b is None:
            self._b = self._forcing_b()
        return tuple(self.panels.interpolate(self._b[i], t) for i in (0, 1))

    def sigma(self, t):
        if self._sigma is None:
            if self._b is None:
                self._b = self._forcing_b()
            self._sigma = self._resolve(self._b)
        t = np.asarray(t, dtype=float)
        return tuple(np.where(t == 0, 0.0, self.panels.interpolate(self._sigma[i], t)) for i in (0, 1))


def closed_form_mean_exp(lambda0: float, lambda1: float, a_curves, t_grid, order: int = 16):
    """mu(t) = a(t) + int_0^t (I + phi(t-u) Lambda) L a(u) du for callable forcings.

    ``a_curves`` is a pair of vectorised callables a_0(t), a_1(t).
    """
    t = np.asarray(t_grid, dtype=float)
    t_max = float(np.max(t)) if t.size else 0.0
    if t_max == 0:
        return np.zeros_like(t), np.zeros_like(t)
    P = PanelFunction(t_max, min(0.05, 1.0 / (lambda0 + lambda1)), order)
    nodes = P.flat_nodes
    g = np.array([np.asarray(a_curves[i](nodes), float) for i in (0, 1)])
    M = MatrixExpLambda(lambda0, lambda1)
    Lg = M.L @ g
    lam2 = lambda0 + lambda1
    C1 = np.array([P.cumulative(Lg[k]) for k in (0, 1)])
    E = np.array([P.cumulative_decay(Lg[k], lam2) for k in (0, 1)])
    resolved = g + C1 + (M.generator @ (C1 - E)) / lam2
    out = []
    for i in (0, 1):
        vals = P.interpolate(resolved[i], t)
        # the interpolant is exact for the forcing part; add the residual resolvent at t exactly
        vals = vals - P.interpolate(g[i], t) + np.asarray(a_curves[i](t), float)
        out.append(np.where(t == 0, 0.0, vals))
    return out[0], out[1]


# --- conditional mean ---------------------------------------------------------------

def conditional_mean(regime: RegimeSpec, dists, s: float, t_max: float, dt: float = 1e-3,
                     curves: MomentCurves | None = None, averages=None):
    """mu_i(t | s) for t on [s, t_max]; ``s`` must be a grid multiple of ``dt``."""
    avg = averages or RegimeAverages(regime, dists)
    mc = curves if curves is not None else mean_curves(regime, dists, t_max, dt, avg)
    grid = mc.t
    dt = float(grid[1] - grid[0])
    m = int(round(s / dt))
    if abs(m * dt - s) > 1e-9 or m >= len(grid):
        raise DomainError("s must be a grid node below t_max")
    t = grid[m:]
    a0, a1 = mean_forcing(regime, dists, t, s=s, averages=avg)
    result = []
    for i, a in ((0, a0), (1, a1)):
        dist = dists[i]
        sf = float(dist.survival(s))
        if sf < 1e-300:
            raise DegenerateConditionError(f"survival_{i}({s}) underflows")
        nu = mc.mu(1 - i)
        # kernel cells [s + j dt, s + (j+1) dt]
        cells = grid[: len(t)]
        left, right = _density_weights(dist, cells, start=s, scale=1.0 / sf) if len(t) > 1 else (np.zeros(0), np.zeros(0))
        conv = np.zeros(len(t))
        for k in range(1, len(t)):
            # u_j = s + j dt, t_{m+k} - u_j = t_{k - j}
            conv[k] = np.dot(left[:k], nu[k:0:-1]) + np.dot(right[:k], nu[k - 1::-1])
        result.append(a + conv)
    return t, result[0], result[1]


# --- density -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DensitySurface:
    """Absolutely continuous densities on x-bins plus the singular atoms.

    ``p0``/``p1`` have shape (len(t_grid), len(x_grid)) and hold bin-averaged
    density values at the bin centres ``x_grid``; ``singular_atoms[i][k]`` is
    the (location, mass) pair of state i at ``t_grid[k]``.
    """

    x_grid: np.ndarray
    x_edges: np.ndarray
    t_grid: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    singular_atoms: tuple

    def p(self, i: int) -> np.ndarray:
        return self.p0 if i == 0 else self.p1

    def total_mass(self, i: int) -> np.ndarray:
        dx = np.diff(self.x_edges)
        return self.p(i) @ dx + np.array([m for _, m in self.singular_atoms[i]])

    def bin_masses(self, i: int, k: int = -1) -> np.ndarray:
        return self.p(i)[k] * np.diff(self.x_edges)


def _deposit(edges: np.ndarray, x: np.ndarray, mass: np.ndarray) -> np.ndarray:
    """Linear (cloud-in-cell) deposit of point masses onto bins."""
    dx = edges[1] - edges[0]
    n = len(edges) - 1
    pos = (x - edges[0]) / dx - 0.5  # in units of bin centres
    k = np.floor(pos).astype(int)
    w = pos - k
    out = np.zeros(n + 2)
    np.add.at(out, np.clip(k + 1, 0, n + 1), mass * (1 - w))
    np.add.at(out, np.clip(k + 2, 0, n + 1), mass * w)
    return out[1:-1]


def _shift(masses: np.ndarray, shift: float, dx: float) -> np.ndarray:
    """Move bin masses by ``shift`` with linear redistribution (mass preserving)."""
    q = shift / dx
    k = math.floor(q)
    w = q - k
    n = len(masses)
    out = np.zeros(n)
    for off, wt in ((k, 1 - w), (k + 1, w)):
        if wt == 0:
            continue
        if off >= 0:
            if off < n:
                out[off:] += wt * masses[: n - off]
        else:
            if -off < n:
                out[: n + off] += wt * masses[-off:]
    return out


def density_surface(regime: RegimeSpec, dists, t: float, s: float = 0.0, x_grid=None,
                    dt: float = 1e-3, n_x: int = 1201, sub: int = 4) -> DensitySurface:
    """Solve the coupled density system forward in time on a bin grid.

    Needs velocities that ignore the previous sojourn.  Atoms sit at l_i(t)
    with mass survival_i(t | s); the rest is carried as bin masses.
    """
    if regime.tau_dependent:
        raise DomainError("density_surface needs velocities independent of the previous sojourn; use mc_density")
    if not 0 <= s < t:
        raise DomainError("need 0 <= s < t")
    grid = uniform_grid(t, dt) if abs(round(t / dt) * dt - t) < 1e-12 else np.linspace(0, t, int(math.ceil(t / dt)) + 1)
    dt = float(grid[1] - grid[0])
    nt = len(grid)

    def l(i, u):
        return regime.antiderivative(i, 0.0, u)

    def h(i, u):
        return regime.h(i, u)

    if x_grid is None:
        reach = 0.0
        for i in (0, 1):
            uu = np.linspace(0, t, 257)
            reach = max(reach, float(np.max(np.abs(l(i, uu)))), float(np.max(np.abs(h(i, uu)))))
        span = 1.25 * (2 * reach + 0.1)
        edges = np.linspace(-span, span, n_x + 1)
    else:
        xg = np.asarray(x_grid, float)
        dxg = xg[1] - xg[0]
        edges = np.concatenate([xg - dxg / 2, [xg[-1] + dxg / 2]])
    dx = float(edges[1] - edges[0])
    nb = len(edges) - 1

    # per-cell quadrature of the atom channel: sub-nodes inside each u-cell
    sub_x, sub_w = gauss_legendre(sub)
    masses = [np.zeros((nt, nb)), np.zeros((nt, nb))]
    atoms = [[(0.0, 1.0)], [(0.0, 1.0)]]
    weights = [_density_weights(dists[i], grid) for i in (0, 1)]
    shifts = [None, None]
    for i in (0, 1):
        shifts[i] = l(i, grid) + h(i, grid)  # displacement + jump after a first switch at u

    def atom_channel(i, n, lo=0.0, cond_sf=1.0):
        # mass of paths switching once in (lo, t_n) and not again: lands at L_i(u) + l_{1-i}(t_n - u)
        tn = grid[n]
        if tn <= lo:
            return np.zeros(nb)
        cells = np.linspace(lo, tn, max(1, int(round((tn - lo) / dt))) + 1)
        a = cells[:-1, None]
        w = (cells[1:] - cells[:-1])[:, None]
        u = (a + w * sub_x).ravel()
        wt = (w * sub_w).ravel()
        j = 1 - i
        mass = wt * dists[i].density(u) * dists[j].survival(tn - u) / cond_sf
        x = l(i, u) + h(i, u) + l(j, tn - u)
        return _deposit(edges, x, mass)

    def ac_channel(i, n, k_state_masses, current=None):
        # sum_j W_j shift(m_{1-i}[n - j], L_i(u_j)), j = 0..n
        left, right = weights[i]
        other = k_state_masses
        acc = np.zeros(nb)
        for jj in range(0, n + 1):
            wgt = 0.0
            if jj < n:
                wgt += left[jj]
            if jj >= 1:
                wgt += right[jj - 1]
            if wgt == 0.0:
                continue
            src = other[n - jj] if not (jj == 0 and current is not None) else current
            if not np.any(src):
                continue
            acc += wgt * _shift(src, float(shifts[i][jj]), dx)
        return acc

    for n in range(1, nt):
        base = [atom_channel(0, n), atom_channel(1, n)]
        rest = []
        for i in (0, 1):
            left, right = weights[i]
            other = masses[1 - i]
            acc = np.zeros(nb)
            for jj in range(1, n + 1):
                wgt = (left[jj] if jj < n else 0.0) + right[jj - 1]
                src = other[n - jj]
                if wgt and np.any(src):
                    acc += wgt * _shift(src, float(shifts[i][jj]), dx)
            rest.append(base[i] + acc)
        # implicit u = 0 term couples the current time level; fixed-point iterate
        cur = [rest[0].copy(), rest[1].copy()]
        for _ in range(50):
            new0 = rest[0] + weights[0][0][0] * _shift(cur[1], float(shifts[0][0]), dx)
            new1 = rest[1] + weights[1][0][0] * _shift(cur[0], float(shifts[1][0]), dx)
            delta = max(np.max(np.abs(new0 - cur[0])), np.max(np.abs(new1 - cur[1])))
            cur = [new0, new1]
            if delta < 1e-15:
                break
        masses[0][n], masses[1][n] = cur
        for i in (0, 1):
            atoms[i].append((float(l(i, grid[n])), float(dists[i].survival(grid[n]))))

    if s > 0:
        # conditional slice at the final time only
        n = nt - 1
        out = []
        cond_atoms = []
        for i in (0, 1):
            dist = dists[i]
            sf = float(dist.survival(s))
            if sf <= 0:
                raise DegenerateConditionError(f"survival_{i}({s}) is zero")
            m = int(round(s / dt))
            acc = atom_channel(i, n, lo=grid[m], cond_sf=sf)
            left, right = _density_weights(dist, grid[: n - m + 1], start=grid[m], scale=1.0 / sf)
            shift_c = l(i, grid[m:]) + h(i, grid[m:])
            other = masses[1 - i]
            for jj in range(0, n - m + 1):
                wgt = (left[jj] if jj < n - m else 0.0) + (right[jj - 1] if jj >= 1 else 0.0)
                src = other[n - m - jj]
                if wgt and np.any(src):
                    acc += wgt * _shift(src, float(shift_c[jj]), dx)
            out.append(acc)
            cond_atoms.append([(float(l(i, t)), float(dist.survival(t)) / sf)])
        centres = 0.5 * (edges[:-1] + edges[1:])
        return DensitySurface(centres, edges, np.array([t]), out[0][None, :] / dx, out[1][None, :] / dx,
                              tuple(cond_atoms))

    centres = 0.5 * (edges[:-1] + edges[1:])
    return DensitySurface(centres, edges, grid, masses[0] / dx, masses[1] / dx, (atoms[0], atoms[1]))


# --- Monte Carlo density ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MCDensity:
    edges: np.ndarray
    counts: np.ndarray  # switched paths only
    n_paths: int
    atom_fraction: float
    atom_location_mean: float
    atom_location_std: float

    @property
    def density(self) -> np.ndarray:
        return self.counts / (self.n_paths * np.diff(self.edges))

    @property
    def atom_standard_error(self) -> float:
        p = self.atom_fraction
        return math.sqrt(p * (1 - p) / self.n_paths)


def mc_density(model: SwitchingModel, regime: RegimeSpec, t: float, bins, n_paths: int, seed: int,
               s: float = 0.0) -> MCDensity:
    """Histogram of X(t) over simulated paths; no-switch paths are tallied as the atom."""
    if n_paths < 10**4:
        raise DomainError("mc_density needs at least 10^4 paths")
    batch = simulate_batch(model, regime, [t], n_paths, seed, elapsed=s)
    x = batch.X[:, 0]
    moved = batch.n_switches[:, 0] > 0
    counts, edges = np.histogram(x[moved], bins=bins)
    stay = x[~moved]
    return MCDensity(edges, counts, n_paths, float(np.mean(~moved)),
                     float(stay.mean()) if stay.size else float("nan"),
                     float(stay.std()) if stay.size else float("nan"))
