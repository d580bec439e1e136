"""High-accuracy evaluation of the penalty objective and related quantities."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import InfeasiblePointError, as_vector
from .inner import StepNormTol, kkt_residual, lagrangian_oracles, pgd_min, pgda_saddle

__all__ = [
    "AccuracyWarning",
    "GapReport",
    "InnerSolution",
    "solve_inner",
    "penalty_value",
    "penalty_gradient",
    "gap_report",
    "flatness_delta",
    "free_bias",
    "smoothness_probe",
    "joint_smoothness_probe",
]

PRECISION = 1e-10
MAX_INNER = 200_000


class AccuracyWarning(RuntimeWarning):
    """An inner solve hit its step budget before reaching the requested precision."""


@dataclass(frozen=True, eq=False)
class InnerSolution:
    y_g: np.ndarray
    y_gamma: np.ndarray
    lam_g: np.ndarray | None
    lam_gamma: np.ndarray | None
    residuals: tuple


@dataclass(frozen=True, eq=False)
class GapReport:
    x: np.ndarray
    phi_val: float
    f_gamma_val: float
    value_gap: float
    y_g: np.ndarray
    y_gamma: np.ndarray
    solution_gap: float
    inner_residuals: tuple


def _etas(problem, gamma, eta, eta_g):
    c = problem.constants
    l_g1 = None if c is None else c.l_g1
    if eta is None:
        if l_g1 is None:
            raise ValueError("inner step size required: problem has no l_g1")
        eta = 1.0 / (l_g1 + (c.l_f1 or 0.0) / gamma)
    if eta_g is None:
        eta_g = eta if l_g1 is None else 1.0 / l_g1
    return eta, eta_g


def solve_inner(problem, gamma, x, precision=PRECISION, eta_inner=None,
                eta_lambda=None, eta_g=None, max_steps=MAX_INNER):
    """Solve the lower-level and penalized problems at ``x`` to ``precision``.

    ``eta_g`` steps the lower-level solve (default ``1 / l_g1``) and
    ``eta_inner`` the penalized one (default ``1 / (l_g1 + l_f1 / gamma)``).
    The penalized solve is warm-started from the lower-level solution.
    """
    x = as_vector(x, problem.d_x, "x")
    eta, eta_g = _etas(problem, gamma, eta_inner, eta_g)
    stop = StepNormTol(precision, max_steps)
    y0 = problem.initial_y()
    if problem.coupled is None:
        y_g, k1 = pgd_min(lambda v: problem.grad_y_g(x, v), problem.set_y, y0, eta_g,
                          stop, full_output=True)
        pen = problem.grad_y_penalized(gamma)
        y_gam, k2 = pgd_min(lambda v: pen(x, v), problem.set_y, y_g, eta, stop,
                            full_output=True)
        lam_g = lam_gam = None
        res = (kkt_residual(problem, x, y_g), kkt_residual(problem, x, y_gam, which=gamma))
    else:
        b = problem.constants.b_lambda if problem.constants is not None else None
        eta_l = eta if eta_lambda is None else eta_lambda
        d_c = problem.coupled.d_c
        sg = pgda_saddle(*lagrangian_oracles(problem, x), problem.set_y, d_c, b,
                         y0, None, eta_g, eta_l, stop)
        sy = pgda_saddle(*lagrangian_oracles(problem, x, gamma), problem.set_y, d_c, b,
                         sg.y, sg.lam, eta, eta_l, stop)
        y_g, lam_g, y_gam, lam_gam = sg.y, sg.lam, sy.y, sy.lam
        k1, k2 = sg.steps, sy.steps
        res = (sg.residual, sy.residual)
    if max(k1, k2) >= max_steps:
        warnings.warn(f"inner solve at x={x.tolist()} used its full budget of {max_steps} "
                      f"steps; residuals {res}", AccuracyWarning, stacklevel=3)
    return InnerSolution(y_g, y_gam, lam_g, lam_gam, res)


def _penalty_from(problem, gamma, x, sol):
    val = problem.f(x, sol.y_gamma) + gamma * (problem.g(x, sol.y_gamma)
                                               - problem.g(x, sol.y_g))
    if problem.coupled is not None:
        val += gamma * (sol.lam_gamma @ problem.constraint(x, sol.y_gamma)
                        - sol.lam_g @ problem.constraint(x, sol.y_g))
    return float(val)


def _gradient_from(problem, gamma, x, sol):
    grad = problem.grad_x_f(x, sol.y_gamma) + gamma * (
        problem.grad_x_g(x, sol.y_gamma) - problem.grad_x_g(x, sol.y_g))
    if problem.coupled is not None:
        grad = grad + gamma * (problem.constraint_jac_x(x, sol.y_gamma).T @ sol.lam_gamma
                               - problem.constraint_jac_x(x, sol.y_g).T @ sol.lam_g)
    return grad


def penalty_value(problem, gamma, x, precision=PRECISION, **kw):
    """``F_gamma(x) = f(x, y_gamma) + gamma * (g(x, y_gamma) - g(x, y_g))``.

    With coupled constraints the multiplier terms of both Lagrangians are
    added; they vanish at exact saddle points.
    """
    sol = solve_inner(problem, gamma, x, precision, **kw)
    return _penalty_from(problem, gamma, as_vector(x), sol)


def penalty_gradient(problem, gamma, x, precision=PRECISION, **kw):
    """Gradient of ``F_gamma`` from high-accuracy inner solutions."""
    sol = solve_inner(problem, gamma, x, precision, **kw)
    return _gradient_from(problem, gamma, as_vector(x), sol)


def gap_report(problem, gamma, x, precision=PRECISION, **kw):
    x = as_vector(x, problem.d_x, "x")
    sol = solve_inner(problem, gamma, x, precision, **kw)
    phi = float(problem.f(x, sol.y_g))
    fg = _penalty_from(problem, gamma, x, sol)
    return GapReport(x, phi, fg, abs(phi - fg), sol.y_g, sol.y_gamma,
                     float(np.linalg.norm(sol.y_g - sol.y_gamma)), sol.residuals)


def flatness_delta(problem, gamma, x, c_mod, alpha, precision=PRECISION, **kw):
    """``max(0, |f(x, y_g) - f(x, y_gamma)| - c_mod * ||y_g - y_gamma||^alpha)``."""
    if c_mod < 0:
        raise ValueError("c_mod must be nonnegative")
    x = as_vector(x, problem.d_x, "x")
    sol = solve_inner(problem, gamma, x, precision, **kw)
    df = abs(problem.f(x, sol.y_g) - problem.f(x, sol.y_gamma))
    if c_mod == 0:
        return float(df)
    return float(max(0.0, df - c_mod * np.linalg.norm(sol.y_g - sol.y_gamma) ** alpha))


def free_bias(problem, gamma, x, precision=PRECISION, **kw):
    """Norm of the term the value-function-free update drops from ``grad F_gamma``."""
    x = as_vector(x, problem.d_x, "x")
    sol = solve_inner(problem, gamma, x, precision, **kw)
    grad = _gradient_from(problem, gamma, x, sol)
    return float(np.linalg.norm(grad - problem.grad_x_f(x, sol.y_gamma)))


def _second_difference(fun, h):
    return (fun(h) - 2 * fun(0.0) + fun(-h)) / (h * h)


def smoothness_probe(problem, gamma, x, direction=None, h=1e-3, precision=PRECISION,
                     **kw):
    """Central second difference of ``F_gamma`` along a unit direction.

    When the estimates at ``h`` and ``h / 2`` disagree by more than 10% the
    Richardson extrapolation of the two is returned instead.
    """
    x = as_vector(x, problem.d_x, "x")
    d = np.ones(problem.d_x) if direction is None else as_vector(direction, problem.d_x)
    d = d / np.linalg.norm(d)
    for s in (h, -h):
        if not problem.set_x.contains(x + s * d, tol=1e-12):
            raise InfeasiblePointError("probe point x +/- h*d leaves set_x")
    cache = {}

    def value(s):
        if s not in cache:
            cache[s] = penalty_value(problem, gamma, x + s * d, precision, **kw)
        return cache[s]

    coarse = _second_difference(value, h)
    fine = _second_difference(value, h / 2)
    if abs(coarse - fine) > 0.1 * max(abs(coarse), abs(fine), 1e-12):
        return float((4 * fine - coarse) / 3)
    return float(coarse)


def joint_smoothness_probe(problem, gamma, x, y, direction=None, h=1e-3):
    """Second difference of ``f + gamma * (g - v)`` in ``y`` at fixed ``x``.

    ``v(x)`` is constant in ``y`` and drops out of the stencil.
    """
    x = as_vector(x, problem.d_x, "x")
    y = as_vector(y, problem.d_y, "y")
    d = np.ones(problem.d_y) if direction is None else as_vector(direction, problem.d_y)
    d = d / np.linalg.norm(d)

    def value(s):
        v = y + s * d
        return problem.f(x, v) + gamma * problem.g(x, v)

    return float(_second_difference(value, h))
