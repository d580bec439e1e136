"""Inner solvers: projected gradient descent and projected gradient descent-ascent."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import (
    Box,
    NonNegOrthant,
    NumericalError,
    as_vector,
)

__all__ = [
    "FixedSteps",
    "StepNormTol",
    "InnerStop",
    "SaddlePoint",
    "pgd_min",
    "pgda_saddle",
    "kkt_residual",
    "ETA_REF",
    "lagrangian_oracles",
]

ETA_REF = 1e-2
ACTIVE_TOL = 1e-8


@dataclass(frozen=True)
class FixedSteps:
    k: int

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError("FixedSteps requires k >= 1")

    @property
    def max_steps(self):
        return int(self.k)

    def done(self, step_norm):
        return False


@dataclass(frozen=True)
class StepNormTol:
    tol: float
    max_steps: int

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("StepNormTol requires tol > 0")
        if int(self.max_steps) < 1:
            raise ValueError("StepNormTol requires max_steps >= 1")

    def done(self, step_norm):
        return step_norm <= self.tol


InnerStop = Union[FixedSteps, StepNormTol]


@dataclass(frozen=True)
class SaddlePoint:
    y: np.ndarray
    lam: np.ndarray
    residual: float
    steps: int = 0
    min_active_lambda: Optional[float] = None

    @property
    def strictly_complementary(self):
        """True when every active constraint carries a positive multiplier."""
        return self.min_active_lambda is None or self.min_active_lambda > 0


def _finite(v, what, iterate):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NumericalError(f"non-finite {what}", iterate)
    return v


def pgd_min(grad, feasible_set, y0, eta, stop, full_output=False):
    """Projected gradient descent ``y <- P(y - eta * grad(y))``.

    Returns the last iterate, or ``(y, steps)`` when ``full_output`` is set.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    y = feasible_set.project(as_vector(y0, feasible_set.dim, "y0"))
    steps = 0
    for _ in range(stop.max_steps):
        d = _finite(grad(y), "gradient", y)
        y_new = feasible_set._proj(y - eta * d)
        steps += 1
        step = np.sqrt(np.dot(y_new - y, y_new - y))
        y = y_new
        if stop.done(step):
            break
    return (y, steps) if full_output else y


def _multiplier_set(d_c, b_lambda):
    if b_lambda is None:
        return NonNegOrthant(d_c)
    return Box(np.zeros(d_c), np.full(d_c, float(b_lambda)))


def _kkt(set_y, y, grad_y, cval, lam):
    gg = (y - set_y.project(y - ETA_REF * grad_y)) / ETA_REF
    return float(np.linalg.norm(gg) + np.linalg.norm(np.maximum(cval, 0.0))
                 + abs(np.dot(lam, cval)))


def _min_active(cval, lam):
    active = np.abs(cval) <= ACTIVE_TOL
    return float(lam[active].min()) if np.any(active) else None


def pgda_saddle(grad_y_L, constraint, set_y, d_c, b_lambda, y0, lambda0=None,
                eta_y=0.1, eta_lambda=0.1, stop=StepNormTol(1e-10, 10000)):
    """Alternating projected descent in ``y`` and ascent in ``lambda``.

    ``grad_y_L(y, lam)`` is the y-gradient of the Lagrangian and
    ``constraint(y)`` returns ``c(x, y)`` at the fixed outer point.
    """
    if not (eta_y > 0 and eta_lambda > 0):
        raise ValueError("step sizes must be positive")
    lam_set = _multiplier_set(d_c, b_lambda)
    y = set_y.project(as_vector(y0, set_y.dim, "y0"))
    lam = np.zeros(d_c) if lambda0 is None else lam_set.project(
        as_vector(lambda0, d_c, "lambda0"))
    steps = 0
    for _ in range(stop.max_steps):
        d = _finite(grad_y_L(y, lam), "gradient", y)
        y_new = set_y._proj(y - eta_y * d)
        cval = _finite(constraint(y_new), "constraint value", y_new)
        lam_new = lam_set._proj(lam + eta_lambda * cval)
        steps += 1
        dy, dl = y_new - y, lam_new - lam
        step = np.sqrt(np.dot(dy, dy) + np.dot(dl, dl))
        y, lam = y_new, lam_new
        if stop.done(step):
            break
    cval = np.asarray(constraint(y), dtype=float)
    res = _kkt(set_y, y, np.asarray(grad_y_L(y, lam), dtype=float), cval, lam)
    return SaddlePoint(y, lam, res, steps, _min_active(cval, lam))


def kkt_residual(problem, x, y, lam=None, which="lower_g"):
    """KKT residual of the lower-level Lagrangian at ``(y, lam)``.

    ``which`` is ``"lower_g"`` for ``g`` or a positive ``gamma`` for the
    penalized objective ``f / gamma + g``.
    """
    x = as_vector(x, problem.d_x, "x")
    y = as_vector(y, problem.d_y, "y")
    if which == "lower_g":
        grad = np.asarray(problem.grad_y_g(x, y), dtype=float)
    else:
        gamma = float(which)
        grad = problem.grad_y_penalized(gamma)(x, y)
    if problem.coupled is None:
        return _kkt(problem.set_y, y, grad, np.zeros(0), np.zeros(0))
    lam = np.zeros(problem.coupled.d_c) if lam is None else as_vector(
        lam, problem.coupled.d_c, "lambda")
    if np.any(lam < 0):
        raise ValueError("lambda must be nonnegative")
    grad = grad + problem.constraint_jac_y(x, y).T @ lam
    return _kkt(problem.set_y, y, grad, problem.constraint(x, y), lam)


def lagrangian_oracles(problem, x, gamma=None):
    """Return ``(grad_y_L, constraint)`` closures at fixed ``x``.

    ``gamma=None`` gives the Lagrangian of ``g``; otherwise of ``f / gamma + g``.
    """
    gy = problem.grad_y_g if gamma is None else problem.grad_y_penalized(gamma)

    def grad_y_L(y, lam):
        return gy(x, y) + problem.constraint_jac_y(x, y).T @ lam

    def constraint(y):
        return problem.constraint(x, y)

    return grad_y_L, constraint
