"""Quadrature helpers shared by the analytic, martingale and market modules."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message: str, error_estimate: float):
        super().__init__(f"{message} (error estimate {error_estimate:.3e})")
        self.error_estimate = error_estimate


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the n-point rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gl_nodes(a, b, n: int):
    """Map the n-point rule onto [a, b] (broadcasting over array endpoints).

    Returns nodes and weights with a trailing axis of length n.
    """
    x, w = gauss_legendre(n)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    return a + (b - a) * x, (b - a) * w


def adaptive_gl(func, a: float, b: float, atol: float = 1e-10, n: int = 10,
                max_depth: int = 40) -> float:
    """Adaptive Gauss-Legendre on [a, b] by interval bisection.

    Each panel compares the n-point and 2n-point rules; panels whose
    difference exceeds their share of ``atol`` are split.
    """
    if a == b:
        return 0.0
    total = 0.0
    worst = 0.0
    stack = [(float(a), float(b), 0)]
    length = float(b - a)
    while stack:
        lo, hi, depth = stack.pop()
        xs, ws = gl_nodes(lo, hi, n)
        xl, wl = gl_nodes(lo, hi, 2 * n)
        coarse = float(np.dot(ws, func(xs)))
        fine = float(np.dot(wl, func(xl)))
        err = abs(fine - coarse)
        share = atol * (hi - lo) / abs(length)
        if err <= max(share, 1e-15 * abs(fine)) or depth >= max_depth:
            if err > max(share, 1e-15 * abs(fine)):
                worst = max(worst, err)
            total += fine
        else:
            mid = 0.5 * (lo + hi)
            stack.append((lo, mid, depth + 1))
            stack.append((mid, hi, depth + 1))
    if worst > 0.0:
        raise QuadratureError("adaptive Gauss-Legendre did not converge", worst)
    return total


def cell_integrals(func, grid: np.ndarray, n: int = 8) -> np.ndarray:
    """Integral of ``func`` over every cell of ``grid`` (length len(grid)-1)."""
    xs, ws = gl_nodes(grid[:-1], grid[1:], n)
    return np.sum(func(xs) * ws, axis=-1)


def cumulative_integral(func, grid: np.ndarray, n: int = 8) -> np.ndarray:
    """Running integral from grid[0] to every grid node, via per-cell GL."""
    out = np.zeros(len(grid))
    out[1:] = np.cumsum(cell_integrals(func, grid, n))
    return out


def expectation_nodes(dist, n: int = 256, eps: float | None = None):
    """GL nodes/weights for E[g(tau)] with tau ~ dist, truncated at its support bound.

    Weights are density(node) * GL weight, so ``np.dot(w, g(nodes))``
    approximates the expectation.
    """
    upper = dist.support_truncation(eps) if eps is not None else dist.support_truncation()
    # split at a few quantile-ish points so a peaked density is resolved
    edges = np.unique(np.concatenate([[0.0], upper * np.array([0.02, 0.1, 0.3]), [upper]]))
    per = max(n // (len(edges) - 1), 8)
    xs, ws = gl_nodes(edges[:-1], edges[1:], per)
    xs = xs.ravel()
    ws = ws.ravel() * dist.density(xs)
    return xs, ws
