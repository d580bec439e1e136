"""Built-in analytic problems and the SVM hyperparameter problem."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    AllSpace,
    BilevelProblem,
    Box,
    CoupledConstraint,
    DataError,
    IngestionError,
    NonNegOrthant,
    ProblemConstants,
)

__all__ = [
    "CATALOG",
    "make_example",
    "RawData",
    "SvmDataset",
    "SvmConfig",
    "load_csv_dataset",
    "split_standardize",
    "make_synthetic_dataset",
    "build_svm_problem",
    "svm_accuracy",
    "svm_upper_loss",
    "svm_dual_step",
    "run_svm",
]


@dataclass(frozen=True)
class CatalogEntry:
    """Listing metadata; ``eta_inner``/``eta_lambda`` are tuned inner steps
    based on the y-curvature alone, larger than the conservative defaults
    derived from ``ProblemConstants``."""

    regime: str
    gammas: tuple
    eta: float
    eta_inner: float
    eta_lambda: float | None
    summary: str


CATALOG = {
    "fig1_unconstrained": CatalogEntry(
        "uncoupled", (10.0,), 0.1, 0.5, None, "f = y, g = (x - y)^2, Y = R"),
    "fig1_box": CatalogEntry(
        "uncoupled", (10.0,), 0.1, 0.5, None, "f = y, g = (x - y)^2, Y = [-1/2, 1/2]"),
    "fig1_coupled": CatalogEntry(
        "coupled", (10.0,), 0.1, 0.5, 1.0, "f = y, g = (x - y)^2, y <= x/2"),
    "bias": CatalogEntry(
        "uncoupled", (10.0,), 0.05, 0.5, None, "f = x^2 + 10y, g = (y - x + 1)^2"),
    "example1": CatalogEntry(
        "uncoupled", (10.0,), 0.1, 0.13, None,
        "oscillatory f, g = 2(y - x)^2 + (x/2)sin^2(x + y), X = Y = [0, 3]"),
    "example2": CatalogEntry(
        "coupled", (10.0, 100.0), 0.05, 0.4, 0.6,
        "g = (y - 2x)^2 with y <= x, X = Y = [0, 3]"),
    "example3": CatalogEntry(
        "uncoupled", (15.0,), 0.05, 5e-5, None,
        "flat but steep f around y = x, g = (y - x)^2"),
    "quad_decoupled": CatalogEntry(
        "uncoupled", (10.0,), 0.05, 0.5, None, "f = x^2, g = y^2"),
}


def _s(v):
    return float(np.asarray(v).reshape(-1)[0])


def _scalar_problem(name, f, fx, fy, g, gx, gy, set_x, set_y, coupled=None,
                    constants=None):
    """Wrap scalar formulas in (x, y) -> array oracles."""
    return BilevelProblem(
        f=lambda x, y: float(f(_s(x), _s(y))),
        grad_x_f=lambda x, y: np.array([fx(_s(x), _s(y))], dtype=float),
        grad_y_f=lambda x, y: np.array([fy(_s(x), _s(y))], dtype=float),
        g=lambda x, y: float(g(_s(x), _s(y))),
        grad_x_g=lambda x, y: np.array([gx(_s(x), _s(y))], dtype=float),
        grad_y_g=lambda x, y: np.array([gy(_s(x), _s(y))], dtype=float),
        set_x=set_x, set_y=set_y, coupled=coupled, constants=constants,
        name=name)


def _fig1(name, params):
    set_y = Box.interval(-0.5, 0.5) if name == "fig1_box" else AllSpace(1)
    coupled = None
    if name == "fig1_coupled":
        coupled = CoupledConstraint(
            1,
            lambda x, y: np.array([_s(y) - 0.5 * _s(x)]),
            lambda x, y: np.array([[-0.5]]),
            lambda x, y: np.array([[1.0]]))
    return _scalar_problem(
        name,
        lambda x, y: y, lambda x, y: 0.0, lambda x, y: 1.0,
        lambda x, y: (x - y) ** 2, lambda x, y: 2 * (x - y), lambda x, y: -2 * (x - y),
        AllSpace(1), set_y, coupled,
        ProblemConstants(l_f0=1.0, l_f1=1.0, l_g1=2.0, mu_g=2.0))


def _bias(name, params):
    a = params.get("slope", 10.0)
    return _scalar_problem(
        name,
        lambda x, y: x * x + a * y, lambda x, y: 2 * x, lambda x, y: a,
        lambda x, y: (y - x + 1) ** 2,
        lambda x, y: -2 * (y - x + 1), lambda x, y: 2 * (y - x + 1),
        AllSpace(1), AllSpace(1),
        constants=ProblemConstants(l_f0=abs(a), l_f1=2.0, l_g1=2.0, mu_g=2.0))


def _upper_common(x):
    """x-only part of the upper objective shared by examples 1 and 2."""
    u = 4 * x - 2
    return 0.5 * np.log(u * u + 1) + x * x, 4 * u / (u * u + 1) + 2 * x


def _example1(name, params):
    def f(x, y):
        return np.exp(1 - y) / (2 + np.cos(4 * x)) + _upper_common(x)[0]

    def fx(x, y):
        d = 2 + np.cos(4 * x)
        return np.exp(1 - y) * 4 * np.sin(4 * x) / d ** 2 + _upper_common(x)[1]

    def fy(x, y):
        return -np.exp(1 - y) / (2 + np.cos(4 * x))

    def g(x, y):
        return 2 * (y - x) ** 2 + 0.5 * x * np.sin(x + y) ** 2

    def gx(x, y):
        return -4 * (y - x) + 0.5 * np.sin(x + y) ** 2 + 0.5 * x * np.sin(2 * (x + y))

    def gy(x, y):
        return 4 * (y - x) + 0.5 * x * np.sin(2 * (x + y))

    box = Box.interval(0.0, 3.0)
    # g_yy = 4 + x cos(2(x + y)) lies in [1, 7] on the box; l_f1 is a
    # grid-probed bound on the Hessian norm of f over the box
    return _scalar_problem(name, f, fx, fy, g, gx, gy, box, box,
                           constants=ProblemConstants(l_f0=np.e, l_f1=45.0,
                                                      l_g1=7.0, mu_g=1.0))


def _example2(name, params):
    def f(x, y):
        return np.exp(2 - y) / (2 + np.cos(4 * x)) + _upper_common(x)[0]

    def fx(x, y):
        d = 2 + np.cos(4 * x)
        return np.exp(2 - y) * 4 * np.sin(4 * x) / d ** 2 + _upper_common(x)[1]

    def fy(x, y):
        return -np.exp(2 - y) / (2 + np.cos(4 * x))

    coupled = CoupledConstraint(
        1,
        lambda x, y: np.array([_s(y) - _s(x)]),
        lambda x, y: np.array([[-1.0]]),
        lambda x, y: np.array([[1.0]]))
    box = Box.interval(0.0, 3.0)
    return _scalar_problem(
        name, f, fx, fy,
        lambda x, y: (y - 2 * x) ** 2, lambda x, y: -4 * (y - 2 * x),
        lambda x, y: 2 * (y - 2 * x),
        box, box, coupled,
        ProblemConstants(l_f0=np.e ** 2, l_f1=120.0, l_g1=2.0, mu_g=2.0))


def _example3(name, params):
    amp = params.get("amplitude", 10.0)
    width = params.get("width", 0.005)
    freq = params.get("frequency", 100.0)

    def fu(u):
        bump = amp * np.exp(-u * u / (2 * width ** 2))
        return (np.sin(u) + 2) * u * u + bump * np.sin(freq * u)

    def dfu(u):
        bump = amp * np.exp(-u * u / (2 * width ** 2))
        return (np.cos(u) * u * u + 2 * u * (np.sin(u) + 2)
                + bump * (freq * np.cos(freq * u) - u / width ** 2 * np.sin(freq * u)))

    return _scalar_problem(
        name,
        lambda x, y: fu(y - x), lambda x, y: -dfu(y - x), lambda x, y: dfu(y - x),
        lambda x, y: (y - x) ** 2, lambda x, y: -2 * (y - x), lambda x, y: 2 * (y - x),
        AllSpace(1), AllSpace(1),
        # |f_uu| peaks near 2.9e5 inside the bump
        constants=ProblemConstants(l_f1=6e5, l_g1=2.0, mu_g=2.0))


def _quad(name, params):
    return _scalar_problem(
        name,
        lambda x, y: x * x, lambda x, y: 2 * x, lambda x, y: 0.0,
        lambda x, y: y * y, lambda x, y: 0.0, lambda x, y: 2 * y,
        AllSpace(1), AllSpace(1),
        constants=ProblemConstants(l_f0=0.0, l_f1=2.0, l_g1=2.0, mu_g=2.0))


_BUILDERS = {
    "fig1_unconstrained": _fig1,
    "fig1_box": _fig1,
    "fig1_coupled": _fig1,
    "bias": _bias,
    "example1": _example1,
    "example2": _example2,
    "example3": _example3,
    "quad_decoupled": _quad,
}

_PARAMS = {"bias": {"slope"}, "example3": {"amplitude", "width", "frequency"}}


def make_example(name, params=None):
    """Build a catalog problem by name, e.g. ``make_example("bias")``."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(_BUILDERS)}")
    params = dict(params or {})
    unknown = set(params) - _PARAMS.get(name, set())
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    return _BUILDERS[name](name, params)


# -- SVM ------------------------------------------------------------------


@dataclass(frozen=True)
class RawData:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple = ()


@dataclass(frozen=True)
class SvmConfig:
    ridge_b: float = 1e-6
    split_fractions: tuple = (0.5, 0.25, 0.25)
    standardize: bool = True
    nonneg_c: bool = False
    lambda_cap: float | None = 1.0

    def __post_init__(self):
        fr = tuple(float(v) for v in self.split_fractions)
        if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1) > 1e-9:
            raise ValueError("split_fractions must be three positive reals summing to 1")
        object.__setattr__(self, "split_fractions", fr)
        if self.ridge_b < 0:
            raise ValueError("ridge_b must be nonnegative")
        if self.lambda_cap is not None and not self.lambda_cap > 0:
            raise ValueError("lambda_cap must be positive")


@dataclass(frozen=True)
class SvmDataset:
    features: np.ndarray
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    center: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)

    def split(self, which):
        idx = {"train": self.train, "val": self.val, "test": self.test}[which]
        return self.features[idx], self.labels[idx]

    def destandardize(self, z):
        return z * self.scale + self.center


def _matches(cell, positive):
    if cell == str(positive):
        return True
    try:
        return float(cell) == float(positive)
    except ValueError:
        return False


def load_csv_dataset(path, label_column=-1, positive_label=1):
    """Read a headed CSV of numeric features and a binary label column."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
            if label_column not in header:
                raise IngestionError(f"{path}: no column named {label_column!r}")
            li = header.index(label_column)
        else:
            li = int(label_column) % len(header)
        feats, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}:{row_no}: expected {len(header)} cells, got {len(row)}")
            vals = []
            for j, cell in enumerate(row):
                if j == li:
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise IngestionError(
                        f"{path}:{row_no}: non-numeric value {cell!r} in column "
                        f"{header[j]!r}") from None
            feats.append(vals)
            labels.append(row[li].strip())
    if not feats:
        raise IngestionError(f"{path}: no data rows")
    if len(set(labels)) > 2:
        raise DataError(f"{path}: label column {header[li]!r} is not binary: "
                        f"{sorted(set(labels))[:5]}")
    y = np.array([1.0 if _matches(c, positive_label) else -1.0 for c in labels])
    names = tuple(h for j, h in enumerate(header) if j != li)
    return RawData(np.array(feats, dtype=float), y, names)


def split_standardize(raw, config=SvmConfig(), seed=0):
    """Shuffle by ``seed``, split by fraction, standardize with train statistics."""
    z = np.asarray(raw.features, dtype=float)
    labels = np.asarray(raw.labels, dtype=float)
    n = z.shape[0]
    if n < 8:
        raise ValueError("need at least 8 rows")
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise DataError("labels must be +1 or -1")
    perm = np.random.default_rng(seed).permutation(n)
    fr = config.split_fractions
    n_tr = int(round(fr[0] * n))
    n_va = int(round(fr[1] * n))
    train, val, test = perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]
    if config.standardize:
        center = z[train].mean(axis=0)
        scale = z[train].std(axis=0)
        flat = scale == 0
        if np.any(flat):
            warnings.warn(f"zero-variance training columns {np.flatnonzero(flat).tolist()} "
                          "are centered but not scaled", RuntimeWarning, stacklevel=2)
            scale = np.where(flat, 1.0, scale)
    else:
        center, scale = np.zeros(z.shape[1]), np.ones(z.shape[1])
    return SvmDataset((z - center) / scale, labels, train, val, test, int(seed),
                      center, scale)


def make_synthetic_dataset(n=400, p=2, separation=2.0, noise=0.02, seed=0):
    """Two unit-variance Gaussians centered at +/- separation along the first axis.

    A fraction ``noise`` of labels is flipped at random.
    """
    rng = np.random.default_rng(seed)
    labels = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    z = rng.standard_normal((n, p))
    z[:, 0] += separation * labels
    flip = rng.random(n) < noise
    labels = np.where(flip, -labels, labels)
    return RawData(z, labels, tuple(f"z{i}" for i in range(p)))


def build_svm_problem(dataset, config=SvmConfig()):
    """Bilevel SVM: the outer variable is the per-sample margin slack ``c``."""
    z_tr, l_tr = dataset.split("train")
    z_va, l_va = dataset.split("val")
    if len(l_tr) == 0 or len(l_va) == 0:
        raise ValueError("train and validation splits must be nonempty")
    n_tr, p = z_tr.shape
    a_tr = np.hstack([z_tr, np.ones((n_tr, 1))]) * l_tr[:, None]
    a_va = np.hstack([z_va, np.ones((len(l_va), 1))]) * l_va[:, None]
    reg = np.ones(p + 1)
    reg[-1] = config.ridge_b
    jac_x = -np.eye(n_tr)
    jac_y = -a_tr

    def f(x, y):
        return float(np.mean(np.exp(1 - a_va @ y)) + 0.5 * x @ x)

    def grad_y_f(x, y):
        return -(np.exp(1 - a_va @ y) @ a_va) / len(l_va)

    def constraint(x, y):
        return 1 - a_tr @ y - x

    set_x = NonNegOrthant(n_tr) if config.nonneg_c else AllSpace(n_tr)
    return BilevelProblem(
        f=f,
        grad_x_f=lambda x, y: np.array(x, dtype=float),
        grad_y_f=grad_y_f,
        g=lambda x, y: float(0.5 * np.sum(reg * y * y)),
        grad_x_g=lambda x, y: np.zeros(n_tr),
        grad_y_g=lambda x, y: reg * y,
        set_x=set_x,
        set_y=AllSpace(p + 1),
        coupled=CoupledConstraint(n_tr, constraint, lambda x, y: jac_x,
                                  lambda x, y: jac_y),
        constants=ProblemConstants(l_g1=1.0, mu_g=max(config.ridge_b, 1e-12),
                                   b_lambda=config.lambda_cap),
        name="svm")


def svm_accuracy(dataset, split, w, b):
    """Fraction of ``split`` rows with ``sign(z.w + b)`` equal to the label."""
    z, labels = dataset.split(split)
    if len(labels) == 0:
        raise ValueError("empty split")
    pred = np.where(z @ np.asarray(w, dtype=float) + float(b) >= 0, 1.0, -1.0)
    return float(np.mean(pred == labels))


def svm_upper_loss(dataset, y):
    """Validation exponential loss at ``y = (w, b)`` without the slack term."""
    z, labels = dataset.split("val")
    margin = labels * (z @ y[:-1] + y[-1])
    return float(np.mean(np.exp(1 - margin)))


def svm_dual_step(dataset):
    """Multiplier step ``1 / ||A||^2`` for the training constraint matrix ``A``."""
    z, _ = dataset.split("train")
    a = np.hstack([z, np.ones((z.shape[0], 1))])
    return 1.0 / np.linalg.norm(a, 2) ** 2


def run_svm(dataset, config=SvmConfig(), algorithm="free_cc", gamma=20.0,
            eta_outer=0.05, eta_inner_y=0.5, eta_inner_lambda=None, inner_tol=1e-6,
            inner_max_steps=2000, max_outer=50, val_tol=1e-5, timing=False):
    """Fit the bilevel SVM, stopping when the validation loss changes by less
    than ``val_tol`` between outer iterations or after ``max_outer`` of them.

    Returns the trajectory; ``trajectory.y_final`` holds ``(w, b)``.
    """
    from .algorithms import COUPLED_ALGORITHMS, PenaltyConfig, run_algorithm
    from .inner import StepNormTol

    if algorithm not in COUPLED_ALGORITHMS:
        raise ValueError(f"SVM needs a coupled-constraint algorithm, got {algorithm!r}")
    problem = build_svm_problem(dataset, config)
    cfg = PenaltyConfig(
        gamma=gamma, eta_outer=eta_outer, eta_inner_y=eta_inner_y,
        eta_inner_lambda=eta_inner_lambda or svm_dual_step(dataset),
        inner_stop=StepNormTol(inner_tol, inner_max_steps), max_outer=max_outer,
        outer_tol=0.0, timing=timing)
    last = []

    def val_change_small(t, x, y, lam):
        loss = svm_upper_loss(dataset, y)
        done = bool(last) and abs(loss - last[-1]) < val_tol
        last.append(loss)
        return done

    return run_algorithm(algorithm, problem, cfg, callback=val_change_small)
