"""Historical volatility HV_i(t) = sqrt(sigma_i(t) / t) and its closed forms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analytic import ClosedFormExp, phi_lambda, variance_curves
from .process import RegimeSpec
from .switching import DomainError, Exponential


@dataclass(frozen=True)
class SymmetricHVParams:
    """Constant regimes with a common switching rate."""

    lam: float
    c0: float
    c1: float
    h0: float
    h1: float

    def __post_init__(self):
        if self.lam <= 0:
            raise DomainError("rate must be positive")

    @classmethod
    def from_model(cls, regime: RegimeSpec, dists) -> "SymmetricHVParams":
        if not regime.is_constant():
            raise DomainError("symmetric closed form needs constant regimes")
        if not all(isinstance(d, Exponential) for d in dists) or dists[0].rate != dists[1].rate:
            raise DomainError("symmetric closed form needs equal exponential rates")
        (c0, c1), (h0, h1) = regime.constants()
        return cls(dists[0].rate, c0, c1, h0, h1)

    @property
    def c(self) -> float:
        return 0.5 * (self.c0 - self.c1)

    @property
    def B(self) -> float:
        return 0.5 * (self.h0 + self.h1)

    @property
    def b(self) -> float:
        return 0.5 * (self.h0 - self.h1)

    def gamma(self, i: int) -> float:
        h = self.h0 if i == 0 else self.h1
        return -2 * self.c * (self.c / self.lam + (-1) ** i * h)


@dataclass(frozen=True, eq=False)
class VolatilityCurve:
    t: np.ndarray
    hv0: np.ndarray
    hv1: np.ndarray
    limits: tuple | None = None  # (small_t_0, small_t_1, large_t)
    method: str = ""

    def hv(self, i: int) -> np.ndarray:
        return self.hv0 if i == 0 else self.hv1


def hv_limits(c0: float, c1: float, h0: float, h1: float, lambda0: float, lambda1: float):
    """Small-time limits sqrt(lambda_i) |h_i| and the common large-time limit."""
    if not c0 > c1:
        raise DomainError("limits are stated for c0 > c1")
    lam = 0.5 * (lambda0 + lambda1)
    B = 0.5 * (h0 + h1)
    c = 0.5 * (c0 - c1)
    small = (math.sqrt(lambda0) * abs(h0), math.sqrt(lambda1) * abs(h1))
    large = math.sqrt(lambda0 * lambda1 / (2 * lam**3) * ((lambda0 * B + c) ** 2 + (lambda1 * B - c) ** 2))
    return small[0], small[1], large


def _model_limits(regime: RegimeSpec, dists):
    if not (regime.is_constant() and all(isinstance(d, Exponential) for d in dists)):
        return None
    (c0, c1), (h0, h1) = regime.constants()
    if not c0 > c1:
        return None
    return hv_limits(c0, c1, h0, h1, dists[0].rate, dists[1].rate)


def hv_symmetric(params: SymmetricHVParams, t_grid) -> VolatilityCurve:
    t = np.asarray(t_grid, dtype=float)
    if np.any(t <= 0):
        raise DomainError("t_grid must be positive")
    lam, c, B, b = params.lam, params.c, params.B, params.b
    cb = c + lam * b
    phi1 = phi_lambda(lam, t)
    phi2 = phi_lambda(2 * lam, t)
    curves = []
    for i in (0, 1):
        hv2 = (c * c / lam + lam * B * B + cb * cb * phi2 / (lam * t) + params.gamma(i) * phi1 / t
               + (-1) ** i * 2 * B * cb * np.exp(-2 * lam * t))
        curves.append(np.sqrt(np.maximum(hv2, 0.0)))
    small = (math.sqrt(lam) * abs(params.h0), math.sqrt(lam) * abs(params.h1))
    large = math.sqrt(c * c / lam + lam * B * B)
    return VolatilityCurve(t, curves[0], curves[1], (small[0], small[1], large), "symmetric")


def _grid_step(t_max: float, dt: float | None, max_steps: int) -> float:
    if dt is None:
        dt = 1e-3
    steps = max(1, int(math.ceil(t_max / dt - 1e-9)))
    steps = min(steps, max_steps)
    return t_max / steps


def hv_curve(regime: RegimeSpec, dists, t_grid, method: str = "grid", dt: float | None = None,
             mode: str = "exact", max_steps: int = 20000) -> VolatilityCurve:
    """HV_i on ``t_grid`` from the variance Volterra solution.

    ``method='grid'`` solves on a uniform grid (step ``dt``, capped at
    ``max_steps`` steps) and interpolates; ``method='closed_form_exp'`` uses the
    exponential-sojourn resolvent.
    """
    t = np.asarray(t_grid, dtype=float)
    if np.any(t <= 0):
        raise DomainError("t_grid must be positive")
    t_max = float(np.max(t))
    if method == "closed_form_exp":
        sol = ClosedFormExp(regime, dists, t_max, mode=mode)
        s0, s1 = sol.sigma(t)
    elif method == "grid":
        step = _grid_step(t_max, dt, max_steps)
        mc = variance_curves(regime, dists, t_max, step, mode=mode)
        s0 = np.interp(t, mc.t, mc.sigma0)
        s1 = np.interp(t, mc.t, mc.sigma1)
    else:
        raise DomainError(f"unknown method {method!r}")
    hv0 = np.sqrt(np.maximum(s0, 0.0) / t)
    hv1 = np.sqrt(np.maximum(s1, 0.0) / t)
    return VolatilityCurve(t, hv0, hv1, _model_limits(regime, dists), method)


def hv_moving_average(sigma: float, lambda0: float, lambda1: float, t_grid) -> np.ndarray:
    """Volatility curve of the moving-average comparison model.

    Here lambda0 may be negative; only lambda1 > 0 and lambda0 + lambda1 > 0 are needed.
    """
    if not (lambda1 > 0 and lambda0 + lambda1 > 0):
        raise DomainError("need lambda1 > 0 and lambda0 + lambda1 > 0")
    t = np.asarray(t_grid, dtype=float)
    lam = 0.5 * (lambda0 + lambda1)
    ratio = np.where(t > 0, phi_lambda(lam, np.where(t > 0, t, 1.0)) / np.where(t > 0, t, 1.0), 1.0)
    return sigma / (lambda0 + lambda1) * np.sqrt(lambda1**2 + lambda0 * (2 * lambda1 + lambda0) * ratio)


def mc_hv(batch, k: int) -> tuple[float, float]:
    """sqrt(sample variance / t) at ``batch.times[k]`` with a delta-method standard error."""
    x = batch.X[:, k]
    t = float(batch.times[k])
    n = len(x)
    d = x - x.mean()
    s2 = float(np.mean(d * d)) * n / (n - 1)
    m4 = float(np.mean(d**4))
    se_var = math.sqrt(max(m4 - s2 * s2, 0.0) / n)
    hv = math.sqrt(s2 / t)
    return hv, se_var / (2 * hv * t)
