"""Penalty-based outer loops: JNT-PBGD, ALT-PBGD, PBGD-Free and PBGD-BLOCC.

Every algorithm minimizes the penalty objective
``F_gamma(x) = min_y [f + gamma * g](x, y) - gamma * min_y g(x, y)`` (with
coupled constraints inside both minimizations when present) and returns an
immutable :class:`TrajectoryRecord`.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import inner as _inner
from .core import (
    ConfigError,
    NumericalError,
    UnsupportedProblemError,
    as_vector,
)
from .inner import FixedSteps, StepNormTol

__all__ = [
    "PenaltyConfig",
    "IterationRecord",
    "TrajectoryRecord",
    "jnt_pbgd",
    "alt_pbgd",
    "pbgd_free",
    "pbgd_blocc",
    "pbgd_free_cc",
    "ALGORITHMS",
    "run_algorithm",
]

DIVERGENCE_NORM = 1e8


@dataclass(frozen=True)
class PenaltyConfig:
    """Hyperparameters shared by every outer algorithm.

    ``None`` step sizes are filled from the problem's constants, see
    :meth:`resolve`.
    """

    gamma: float = 10.0
    eta_outer: Optional[float] = None
    inner_stop: Optional[object] = None
    eta_inner_y: Optional[float] = None
    eta_inner_lambda: Optional[float] = None
    max_outer: int = 1000
    outer_tol: float = 1e-6
    record_every: int = 1
    seed: int = 0
    timing: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if self.eta_outer is not None and not self.eta_outer > 0:
            raise ConfigError("eta_outer must be positive")
        for name in ("eta_inner_y", "eta_inner_lambda"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ConfigError(f"{name} must be positive")
        if int(self.max_outer) < 1:
            raise ConfigError("max_outer must be >= 1")
        if self.outer_tol < 0:
            raise ConfigError("outer_tol must be nonnegative")
        if int(self.record_every) < 1:
            raise ConfigError("record_every must be >= 1")

    def resolve(self, problem, algorithm):
        """Return a copy with every ``None`` field replaced by its default."""
        c = problem.constants
        eta = self.eta_outer
        if eta is None:
            if algorithm == "jnt":
                if c is None or c.l_g1 is None:
                    raise ConfigError("eta_outer is required: problem has no l_g1")
                eta = 1.0 / (2 * self.gamma * c.l_g1)
            else:
                if c is None or None in (c.l_f1, c.l_g1, c.mu_g):
                    raise ConfigError("eta_outer is required: problem lacks l_f1/l_g1/mu_g")
                eta = 1.0 / (2 * c.l_f1 * (1 + c.l_g1 / c.mu_g))
        eta_y = self.eta_inner_y
        if eta_y is None:
            if c is None or c.l_g1 is None:
                raise ConfigError("eta_inner_y is required: problem has no l_g1")
            eta_y = 1.0 / (c.l_g1 + (c.l_f1 or 0.0) / self.gamma)
        eta_lam = self.eta_inner_lambda if self.eta_inner_lambda is not None else eta_y
        stop = self.inner_stop
        if stop is None:
            tol = self.outer_tol if self.outer_tol > 0 else 1e-8
            stop = StepNormTol(1e-8, max(1, math.ceil(10 * math.log(1 / min(tol, 0.5)))))
        return replace(self, eta_outer=eta, eta_inner_y=eta_y,
                       eta_inner_lambda=eta_lam, inner_stop=stop)

    def to_dict(self):
        d = asdict(self)
        stop = self.inner_stop
        if isinstance(stop, FixedSteps):
            d["inner_stop"] = {"kind": "fixed", "k": stop.k}
        elif isinstance(stop, StepNormTol):
            d["inner_stop"] = {"kind": "step_norm", "tol": stop.tol,
                               "max_steps": stop.max_steps}
        return d


@dataclass(frozen=True, eq=False)
class IterationRecord:
    """State at outer iterate ``x_t`` and the step taken from it."""

    t: int
    x: np.ndarray
    y_gamma: np.ndarray
    y_g: Optional[np.ndarray]
    lambda_gamma: Optional[np.ndarray]
    lambda_g: Optional[np.ndarray]
    g_t_norm: float
    gg_metric: float
    inner_steps_used: int
    wall_ms: Optional[float] = None


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    algorithm: str
    iterations: tuple
    terminal: str
    x_final: np.ndarray
    y_final: np.ndarray
    lambda_final: Optional[np.ndarray]
    n_iter: int
    config: PenaltyConfig
    total_wall_ms: float = field(default=0.0)

    @property
    def final_gg_metric(self):
        return self.iterations[-1].gg_metric if self.iterations else float("nan")

    def column(self, name):
        """Stack a field over the recorded iterations into an array."""
        return np.array([getattr(r, name) for r in self.iterations])


def _check_uncoupled(problem):
    if problem.coupled is not None:
        raise UnsupportedProblemError(
            "this algorithm handles uncoupled lower levels only; use pbgd_blocc or pbgd_free_cc")


def _check_coupled(problem):
    if problem.coupled is None:
        raise UnsupportedProblemError("this algorithm requires a coupled constraint")


def _start(problem, x0, y0):
    x = problem.initial_x() if x0 is None else as_vector(x0, problem.d_x, "x0")
    y = problem.initial_y() if y0 is None else as_vector(y0, problem.d_y, "y0")
    if not problem.set_x.contains(x, tol=1e-9):
        raise ValueError("x0 is not in set_x")
    if not problem.set_y.contains(y, tol=1e-9):
        raise ValueError("y0 is not in set_y")
    return problem.set_x.project(x), problem.set_y.project(y)


def _bad(*vecs):
    for v in vecs:
        if v is None:
            continue
        if not np.all(np.isfinite(v)) or np.linalg.norm(v) > DIVERGENCE_NORM:
            return True
    return False


class _Loop:
    """Bookkeeping shared by the outer loops: recording and termination."""

    def __init__(self, name, config):
        self.name = name
        self.cfg = config
        self.records = []
        self.t0 = time.perf_counter()
        self.terminal = "max_iters"

    def record(self, t, last, **kw):
        if t % self.cfg.record_every == 0 or last:
            if self.cfg.timing:
                kw["wall_ms"] = (time.perf_counter() - self.t0) * 1e3
            self.records.append(IterationRecord(t=t, **kw))

    def finish(self, x, y, lam, n_iter):
        return TrajectoryRecord(
            self.name, tuple(self.records), self.terminal, x, y, lam, n_iter,
            self.cfg, (time.perf_counter() - self.t0) * 1e3)


def _outer(name, problem, config, x, step, callback=None):
    """Drive ``step(t, x) -> (x_new, info)`` until a stopping rule fires.

    ``info`` holds the record fields besides ``t``, ``x`` and ``gg_metric``,
    plus ``y_out``/``lam_out`` for the final state and optionally
    ``gg_override`` for the stacked JNT metric. ``callback(t, x_new, y, lam)``
    may return True to stop with terminal status ``converged``.
    """
    loop = _Loop(name, config)
    eta = config.eta_outer
    y_out = lam_out = None
    n_iter = 0
    for t in range(int(config.max_outer)):
        try:
            x_new, info = step(t, x)
        except (NumericalError, FloatingPointError, OverflowError):
            loop.terminal = "diverged"
            break
        y_out, lam_out = info.pop("y_out"), info.pop("lam_out", None)
        gg = info.pop("gg_override", None)
        if gg is None:
            gg = float(np.linalg.norm(x - x_new) / eta)
        n_iter = t + 1
        diverged = _bad(x_new, y_out, lam_out) or not math.isfinite(gg)
        converged = not diverged and gg < config.outer_tol
        if not diverged and not converged and callback is not None:
            converged = bool(callback(t, x_new, y_out, lam_out))
        last = diverged or converged or t == config.max_outer - 1
        loop.record(t, last, x=x, gg_metric=gg, **info)
        if diverged:
            loop.terminal = "diverged"
            break
        x = x_new
        if converged:
            loop.terminal = "converged"
            break
    return loop.finish(x, y_out, lam_out, n_iter)


def jnt_pbgd(problem, config, x0=None, y0=None, callback=None):
    """Joint projected step on ``(x, y)`` for ``f + gamma * (g - v)``."""
    _check_uncoupled(problem)
    cfg = config.resolve(problem, "jnt")
    x, y = _start(problem, x0, y0)
    gamma, eta = cfg.gamma, cfg.eta_outer
    state = {"y": y, "y_g": problem.initial_y()}

    def step(t, x):
        y = state["y"]
        y_g, k = _inner.pgd_min(lambda v: problem.grad_y_g(x, v), problem.set_y,
                                state["y_g"], cfg.eta_inner_y, cfg.inner_stop,
                                full_output=True)
        gx = problem.grad_x_f(x, y) + gamma * (problem.grad_x_g(x, y)
                                                - problem.grad_x_g(x, y_g))
        gy = problem.grad_y_f(x, y) + gamma * problem.grad_y_g(x, y)
        x_new = problem.set_x.project(x - eta * gx)
        y_new = problem.set_y.project(y - eta * gy)
        gg = math.sqrt(np.sum((x - x_new) ** 2) + np.sum((y - y_new) ** 2)) / eta
        state["y"], state["y_g"] = y_new, y_g
        return x_new, dict(
            y_gamma=y, y_g=y_g, lambda_gamma=None, lambda_g=None,
            g_t_norm=float(math.sqrt(gx @ gx + gy @ gy)), inner_steps_used=k,
            gg_override=gg, y_out=y_new)

    return _outer("jnt", problem, cfg, x, step, callback)


def alt_pbgd(problem, config, x0=None, y0=None, callback=None):
    """Alternating scheme: solve both inner problems, then step in ``x``."""
    _check_uncoupled(problem)
    cfg = config.resolve(problem, "alt")
    x, y = _start(problem, x0, y0)
    gamma, eta = cfg.gamma, cfg.eta_outer
    grad_pen = problem.grad_y_penalized(gamma)
    state = {"y_g": y, "y_gamma": y}

    def step(t, x):
        y_g, k1 = _inner.pgd_min(lambda v: problem.grad_y_g(x, v), problem.set_y,
                                 state["y_g"], cfg.eta_inner_y, cfg.inner_stop,
                                 full_output=True)
        y_gam, k2 = _inner.pgd_min(lambda v: grad_pen(x, v), problem.set_y,
                                   state["y_gamma"], cfg.eta_inner_y, cfg.inner_stop,
                                   full_output=True)
        g_t = problem.grad_x_f(x, y_gam) + gamma * (problem.grad_x_g(x, y_gam)
                                                     - problem.grad_x_g(x, y_g))
        state["y_g"], state["y_gamma"] = y_g, y_gam
        return problem.set_x.project(x - eta * g_t), dict(
            y_gamma=y_gam, y_g=y_g, lambda_gamma=None, lambda_g=None,
            g_t_norm=float(np.linalg.norm(g_t)), inner_steps_used=k1 + k2,
            y_out=y_gam)

    return _outer("alt", problem, cfg, x, step, callback)


def pbgd_free(problem, config, x0=None, y0=None, mode="naive", callback=None):
    """Value-function-free update: ``x <- P(x - eta * grad_x f(x, y_gamma))``.

    ``mode="naive"`` solves the penalized inner problem to ``inner_stop``;
    ``mode="single_loop"`` takes one projected step per outer iteration.
    """
    _check_uncoupled(problem)
    if mode not in ("naive", "single_loop"):
        raise ValueError("mode must be 'naive' or 'single_loop'")
    cfg = config.resolve(problem, "free")
    x, y = _start(problem, x0, y0)
    eta = cfg.eta_outer
    grad_pen = problem.grad_y_penalized(cfg.gamma)
    stop = cfg.inner_stop if mode == "naive" else FixedSteps(1)
    state = {"y_gamma": y}

    def step(t, x):
        y_gam, k = _inner.pgd_min(lambda v: grad_pen(x, v), problem.set_y,
                                  state["y_gamma"], cfg.eta_inner_y, stop,
                                  full_output=True)
        g_t = problem.grad_x_f(x, y_gam)
        state["y_gamma"] = y_gam
        return problem.set_x.project(x - eta * g_t), dict(
            y_gamma=y_gam, y_g=None, lambda_gamma=None, lambda_g=None,
            g_t_norm=float(np.linalg.norm(g_t)), inner_steps_used=k, y_out=y_gam)

    return _outer(f"free_{'naive' if mode == 'naive' else 'single'}",
                  problem, cfg, x, step, callback)


def _saddle(problem, cfg, x, gamma, y0, lam0):
    grad_y_L, cons = _inner.lagrangian_oracles(problem, x, gamma)
    b = problem.constants.b_lambda if problem.constants is not None else None
    return _inner.pgda_saddle(grad_y_L, cons, problem.set_y, problem.coupled.d_c, b,
                              y0, lam0, cfg.eta_inner_y, cfg.eta_inner_lambda,
                              cfg.inner_stop)


def pbgd_blocc(problem, config, x0=None, y0=None, callback=None):
    """Coupled-constraint scheme with saddle solves for both Lagrangians."""
    _check_coupled(problem)
    cfg = config.resolve(problem, "blocc")
    x, y = _start(problem, x0, y0)
    gamma, eta = cfg.gamma, cfg.eta_outer
    d_c = problem.coupled.d_c
    state = {"g": (y, np.zeros(d_c)), "gamma": (y, np.zeros(d_c))}

    def step(t, x):
        sg = _saddle(problem, cfg, x, None, *state["g"])
        sy = _saddle(problem, cfg, x, gamma, *state["gamma"])
        g_t = (problem.grad_x_f(x, sy.y)
               + gamma * (problem.grad_x_g(x, sy.y) - problem.grad_x_g(x, sg.y))
               + gamma * (problem.constraint_jac_x(x, sy.y).T @ sy.lam
                          - problem.constraint_jac_x(x, sg.y).T @ sg.lam))
        state["g"], state["gamma"] = (sg.y, sg.lam), (sy.y, sy.lam)
        return problem.set_x.project(x - eta * g_t), dict(
            y_gamma=sy.y, y_g=sg.y, lambda_gamma=sy.lam, lambda_g=sg.lam,
            g_t_norm=float(np.linalg.norm(g_t)), inner_steps_used=sg.steps + sy.steps,
            y_out=sy.y, lam_out=sy.lam)

    return _outer("blocc", problem, cfg, x, step, callback)


def pbgd_free_cc(problem, config, x0=None, y0=None, callback=None):
    """Coupled PBGD-Free: one saddle solve on the penalized Lagrangian per step."""
    _check_coupled(problem)
    cfg = config.resolve(problem, "free_cc")
    x, y = _start(problem, x0, y0)
    eta = cfg.eta_outer
    state = {"gamma": (y, np.zeros(problem.coupled.d_c))}

    def step(t, x):
        sy = _saddle(problem, cfg, x, cfg.gamma, *state["gamma"])
        g_t = problem.grad_x_f(x, sy.y)
        state["gamma"] = (sy.y, sy.lam)
        return problem.set_x.project(x - eta * g_t), dict(
            y_gamma=sy.y, y_g=None, lambda_gamma=sy.lam, lambda_g=None,
            g_t_norm=float(np.linalg.norm(g_t)), inner_steps_used=sy.steps,
            y_out=sy.y, lam_out=sy.lam)

    return _outer("free_cc", problem, cfg, x, step, callback)


ALGORITHMS = {
    "jnt": jnt_pbgd,
    "alt": alt_pbgd,
    "free_naive": lambda p, c, x0=None, y0=None, callback=None: pbgd_free(
        p, c, x0, y0, "naive", callback),
    "free_single": lambda p, c, x0=None, y0=None, callback=None: pbgd_free(
        p, c, x0, y0, "single_loop", callback),
    "blocc": pbgd_blocc,
    "free_cc": pbgd_free_cc,
}

COUPLED_ALGORITHMS = frozenset({"blocc", "free_cc"})


def run_algorithm(name, problem, config, x0=None, y0=None, callback=None):
    """Dispatch by short name: jnt, alt, free_naive, free_single, blocc, free_cc."""
    if name not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)}")
    return ALGORITHMS[name](problem, config, x0, y0, callback=callback)
