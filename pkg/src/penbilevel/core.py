"""Vectors, feasible sets, problem oracles and the projected-gradient metric.

Every vector in the package is a 1-d ``float64`` numpy array. Feasible sets
are immutable and expose an exact Euclidean projection.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "BilevelError",
    "DimensionError",
    "InfeasiblePointError",
    "NumericalError",
    "UnsupportedProblemError",
    "ConfigError",
    "IngestionError",
    "DataError",
    "as_vector",
    "FeasibleSet",
    "AllSpace",
    "Box",
    "Ball",
    "NonNegOrthant",
    "project",
    "generalized_gradient",
    "fd_gradient_check",
    "CoupledConstraint",
    "ProblemConstants",
    "BilevelProblem",
]

MEMBERSHIP_TOL = 1e-12
_EPS = np.finfo(float).eps


class BilevelError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(BilevelError, ValueError):
    pass


class InfeasiblePointError(BilevelError, ValueError):
    pass


class UnsupportedProblemError(BilevelError, ValueError):
    pass


class ConfigError(BilevelError, ValueError):
    pass


class IngestionError(BilevelError, ValueError):
    pass


class DataError(BilevelError, ValueError):
    pass


class NumericalError(BilevelError, ArithmeticError):
    """A non-finite value appeared; ``iterate`` holds the offending point."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = None if iterate is None else np.array(iterate, dtype=float)


def as_vector(value, dim=None, name="vector"):
    """Convert scalars/sequences to a finite 1-d float array."""
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-d, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries", arr)
    return arr


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.flags.writeable = False
    return arr


class FeasibleSet:
    """Closed convex set with an exact projection."""

    dim: int

    def project(self, q):
        return self._proj(self._check(q))

    def _proj(self, q):
        """Projection without argument validation, for inner loops."""
        raise NotImplementedError

    def contains(self, q, tol=MEMBERSHIP_TOL):
        q = as_vector(q, self.dim)
        return bool(np.linalg.norm(self.project(q) - q, ord=np.inf) <= tol)

    def _check(self, q):
        return as_vector(q, self.dim, "point")


@dataclass(frozen=True)
class AllSpace(FeasibleSet):
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError("dim must be positive")

    def _proj(self, q):
        return q.copy()


@dataclass(frozen=True)
class NonNegOrthant(FeasibleSet):
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError("dim must be positive")

    def _proj(self, q):
        return np.maximum(q, 0.0)


@dataclass(frozen=True, eq=False)
class Box(FeasibleSet):
    lower: np.ndarray
    upper: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        lower = as_vector(self.lower, name="lower")
        upper = as_vector(self.upper, lower.shape[0], name="upper")
        if np.any(lower > upper):
            raise ValueError("Box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", _frozen(lower))
        object.__setattr__(self, "upper", _frozen(upper))
        object.__setattr__(self, "dim", lower.shape[0])

    @classmethod
    def interval(cls, lo, hi, dim=1):
        return cls(np.full(dim, float(lo)), np.full(dim, float(hi)))

    def _proj(self, q):
        return np.minimum(np.maximum(q, self.lower), self.upper)

    def __repr__(self):
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


@dataclass(frozen=True, eq=False)
class Ball(FeasibleSet):
    center: np.ndarray
    radius: float
    dim: int = field(init=False)

    def __post_init__(self):
        center = as_vector(self.center, name="center")
        if not self.radius > 0:
            raise ValueError("Ball radius must be positive")
        object.__setattr__(self, "center", _frozen(center))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "dim", center.shape[0])

    def _proj(self, q):
        d = q - self.center
        norm = np.linalg.norm(d)
        if norm <= self.radius:
            return q.copy()
        p = self.center + (self.radius / norm) * d
        # Shrink by a few ulps until the membership test used above passes,
        # which makes the projection exactly idempotent.
        while np.linalg.norm(p - self.center) > self.radius:
            p = self.center + (p - self.center) * (1.0 - 4 * _EPS)
        return p

    def __repr__(self):
        return f"Ball(center={self.center.tolist()}, radius={self.radius})"


def project(feasible_set, q):
    """Euclidean projection of ``q`` onto ``feasible_set``."""
    return feasible_set.project(q)


def generalized_gradient(feasible_set, x, grad, eta):
    """Projected-gradient mapping ``(x - P(x - eta * grad)) / eta``.

    Vanishes exactly at points satisfying the first-order variational
    inequality over ``feasible_set``.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    x = as_vector(x, feasible_set.dim, "x")
    grad = as_vector(grad, feasible_set.dim, "grad")
    if not feasible_set.contains(x, tol=1e-9):
        raise InfeasiblePointError("x is not in the feasible set")
    return (x - feasible_set.project(x - eta * grad)) / eta


def fd_gradient_check(value, grad, point, h=1e-6):
    """Max relative error of ``grad`` against central differences of ``value``.

    Per coordinate the error is ``|fd_i - g_i| / max(1, |g_i|)``.
    """
    point = as_vector(point, name="point")
    g = as_vector(grad(point), point.shape[0], "grad")
    err = 0.0
    for i in range(point.shape[0]):
        e = np.zeros_like(point)
        e[i] = h
        fd = (float(value(point + e)) - float(value(point - e))) / (2 * h)
        err = max(err, abs(fd - g[i]) / max(1.0, abs(g[i])))
    return err


@dataclass(frozen=True)
class CoupledConstraint:
    """Coupled constraint ``c(x, y) <= 0`` with its Jacobians.

    ``jac_x`` returns a ``(d_c, d_x)`` array and ``jac_y`` a ``(d_c, d_y)``
    array.
    """

    d_c: int
    eval: Callable
    jac_x: Callable
    jac_y: Callable


@dataclass(frozen=True)
class ProblemConstants:
    l_f0: Optional[float] = None
    l_f1: Optional[float] = None
    l_g1: Optional[float] = None
    mu_g: Optional[float] = None
    l_g2: Optional[float] = None
    b_lambda: Optional[float] = None

    def __post_init__(self):
        for name in ("l_f0", "l_f1", "l_g1", "mu_g", "l_g2", "b_lambda"):
            val = getattr(self, name)
            if val is not None and not val >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.mu_g is not None and not self.mu_g > 0:
            raise ValueError("mu_g must be positive")
        if self.mu_g is not None and self.l_g1 is not None and self.l_g1 < self.mu_g:
            raise ValueError("l_g1 must be >= mu_g")


@dataclass(frozen=True)
class BilevelProblem:
    """Oracle bundle for ``min_x f(x, y*(x))`` with ``y*(x) = argmin_y g(x, y)``.

    All oracles take ``(x, y)`` as 1-d arrays. ``f`` and ``g`` return floats,
    gradient oracles return arrays of the matching dimension.
    """

    f: Callable
    grad_x_f: Callable
    grad_y_f: Callable
    g: Callable
    grad_x_g: Callable
    grad_y_g: Callable
    set_x: FeasibleSet
    set_y: FeasibleSet
    coupled: Optional[CoupledConstraint] = None
    constants: Optional[ProblemConstants] = None
    name: str = "custom"

    @property
    def d_x(self):
        return self.set_x.dim

    @property
    def d_y(self):
        return self.set_y.dim

    @property
    def is_coupled(self):
        return self.coupled is not None

    def initial_x(self):
        return self.set_x.project(np.zeros(self.d_x))

    def initial_y(self):
        return self.set_y.project(np.zeros(self.d_y))

    def grad_y_penalized(self, gamma):
        """``y``-gradient of ``f / gamma + g`` as a function of ``(x, y)``."""
        inv = 1.0 / gamma
        return lambda x, y: inv * self.grad_y_f(x, y) + self.grad_y_g(x, y)

    def constraint(self, x, y):
        return np.atleast_1d(np.asarray(self.coupled.eval(x, y), dtype=float))

    def constraint_jac_x(self, x, y):
        return np.asarray(self.coupled.jac_x(x, y), dtype=float).reshape(
            self.coupled.d_c, self.d_x)

    def constraint_jac_y(self, x, y):
        return np.asarray(self.coupled.jac_y(x, y), dtype=float).reshape(
            self.coupled.d_c, self.d_y)
