"""BFGS with a backtracking Armijo line search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["BFGSResult", "bfgs_minimize"]


@dataclass
class BFGSResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    converged: bool
    message: str


def _backtrack(fun, x, f0, g0, p, c1=1e-4, shrink=0.5, max_tries=60):
    slope = float(g0 @ p)
    t = 1.0
    for _ in range(max_tries):
        x_new = x + t * p
        f_new = fun(x_new)
        if np.isfinite(f_new) and f_new <= f0 + c1 * t * slope:
            return t, x_new, f_new
        t *= shrink
    return None


def _rounding_step(fun, grad, x, f0, gnorm, p):
    # near the minimizer f differences drop below rounding; accept the full
    # step if f is unchanged to rounding and the gradient shrinks
    x_new = x + p
    f_new = fun(x_new)
    if np.isfinite(f_new) and f_new <= f0 + 64 * np.finfo(float).eps * max(abs(f0), 1.0):
        if np.linalg.norm(grad(x_new)) < gnorm:
            return 1.0, x_new, f_new
    return None


def bfgs_minimize(
    fun: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    *,
    gtol: float = 1e-8,
    maxiter: int = 500,
    stall_iters: int = 20,
    stall_rtol: float = 1e-12,
) -> BFGSResult:
    """Minimize ``fun`` from ``x0`` until ``||grad|| <= gtol`` or ``maxiter`` iterations.

    Also stops, unconverged, when ``fun`` has improved by no more than
    ``stall_rtol * |f|`` over ``stall_iters`` iterations (typical at a kink of a
    piecewise-linear model, where the gradient does not vanish).
    """
    x = np.array(x0, dtype=np.float64)
    n = x.size
    f = float(fun(x))
    g = np.asarray(grad(x), dtype=np.float64)
    hinv = np.eye(n)
    fresh = True
    history = [f]
    for it in range(maxiter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= gtol:
            return BFGSResult(x, f, gnorm, it, True, "gradient tolerance reached")
        p = -hinv @ g
        if g @ p >= 0:
            hinv, fresh = np.eye(n), True
            p = -g
        step = _backtrack(fun, x, f, g, p)
        if step is None:
            step = _rounding_step(fun, grad, x, f, gnorm, p)
        if step is None:
            if fresh:
                return BFGSResult(x, f, gnorm, it, False, "line search failed")
            hinv, fresh = np.eye(n), True
            continue
        t, x_new, f_new = step
        g_new = np.asarray(grad(x_new), dtype=np.float64)
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if fresh:
                hinv = (sy / float(y @ y)) * np.eye(n)
            rho = 1.0 / sy
            hy = hinv @ y
            hinv = hinv - rho * (np.outer(s, hy) + np.outer(hy, s)) + (rho * rho * float(y @ hy) + rho) * np.outer(s, s)
            fresh = False
        x, f, g = x_new, float(f_new), g_new
        history.append(f)
        if len(history) > stall_iters and history[-stall_iters - 1] - f <= stall_rtol * max(abs(f), 1.0):
            gnorm = float(np.linalg.norm(g))
            return BFGSResult(x, f, gnorm, it + 1, gnorm <= gtol, "stalled")
    gnorm = float(np.linalg.norm(g))
    return BFGSResult(x, f, gnorm, maxiter, gnorm <= gtol, "iteration cap reached")
