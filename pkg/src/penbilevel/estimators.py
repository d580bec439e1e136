"""scikit-learn style wrappers around the functional solvers."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .algorithms import PenaltyConfig, run_algorithm
from .inner import StepNormTol
from .problems import SvmConfig, SvmDataset, run_svm


class PenaltyBilevelSolver(BaseEstimator):
    """Run one penalty algorithm on a :class:`~penbilevel.core.BilevelProblem`.

    Parameters mirror :class:`~penbilevel.algorithms.PenaltyConfig`; step
    sizes left as ``None`` are derived from the problem's constants.

    Attributes
    ----------
    x_, y_ : ndarray
        Final outer iterate and the matching lower-level iterate.
    trajectory_ : TrajectoryRecord
    n_iter_ : int
    terminal_ : str
    """

    def __init__(self, algorithm="alt", gamma=10.0, eta_outer=None, eta_inner_y=None,
                 eta_inner_lambda=None, inner_tol=1e-8, inner_max_steps=None,
                 max_outer=1000, outer_tol=1e-6, seed=0):
        self.algorithm = algorithm
        self.gamma = gamma
        self.eta_outer = eta_outer
        self.eta_inner_y = eta_inner_y
        self.eta_inner_lambda = eta_inner_lambda
        self.inner_tol = inner_tol
        self.inner_max_steps = inner_max_steps
        self.max_outer = max_outer
        self.outer_tol = outer_tol
        self.seed = seed

    def _config(self):
        stop = None
        if self.inner_max_steps is not None:
            stop = StepNormTol(self.inner_tol, self.inner_max_steps)
        return PenaltyConfig(
            gamma=self.gamma, eta_outer=self.eta_outer, inner_stop=stop,
            eta_inner_y=self.eta_inner_y, eta_inner_lambda=self.eta_inner_lambda,
            max_outer=self.max_outer, outer_tol=self.outer_tol, seed=self.seed)

    def fit(self, problem, x0=None, y0=None):
        traj = run_algorithm(self.algorithm, problem, self._config(), x0, y0)
        self.trajectory_ = traj
        self.x_ = traj.x_final
        self.y_ = traj.y_final
        self.lambda_ = traj.lambda_final
        self.n_iter_ = traj.n_iter
        self.terminal_ = traj.terminal
        return self


class BilevelSVC(ClassifierMixin, BaseEstimator):
    """Linear SVM whose per-sample margin slacks are tuned on a held-out split.

    The training data is split into a lower-level part (fits ``w, b``) and a
    validation part (drives the slacks).

    Attributes
    ----------
    classes_ : ndarray of shape (2,)
    coef_ : ndarray of shape (n_features,)
    intercept_ : float
    slack_ : ndarray
        Learned per-sample slacks on the lower-level part.
    trajectory_ : TrajectoryRecord
    """

    def __init__(self, algorithm="free_cc", gamma=20.0, val_fraction=1 / 3,
                 ridge_b=1e-6, lambda_cap=1.0, eta_outer=0.05, eta_inner_y=0.5,
                 inner_tol=1e-6, inner_max_steps=2000, max_outer=50, val_tol=1e-5,
                 standardize=True, random_state=0):
        self.algorithm = algorithm
        self.gamma = gamma
        self.val_fraction = val_fraction
        self.ridge_b = ridge_b
        self.lambda_cap = lambda_cap
        self.eta_outer = eta_outer
        self.eta_inner_y = eta_inner_y
        self.inner_tol = inner_tol
        self.inner_max_steps = inner_max_steps
        self.max_outer = max_outer
        self.val_tol = val_tol
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"BilevelSVC is binary; got {len(self.classes_)} classes")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        labels = np.where(y == self.classes_[1], 1.0, -1.0)
        n = X.shape[0]
        perm = np.random.default_rng(self.random_state).permutation(n)
        n_val = max(1, int(round(self.val_fraction * n)))
        if n - n_val < 1:
            raise ValueError("too few samples for a train/validation split")
        train, val = perm[n_val:], perm[:n_val]
        if self.standardize:
            self.center_ = X[train].mean(axis=0)
            scale = X[train].std(axis=0)
            self.scale_ = np.where(scale == 0, 1.0, scale)
        else:
            self.center_, self.scale_ = np.zeros(X.shape[1]), np.ones(X.shape[1])
        ds = SvmDataset((X - self.center_) / self.scale_, labels, train, val,
                        np.array([], dtype=int), int(self.random_state),
                        self.center_, self.scale_)
        cfg = SvmConfig(ridge_b=self.ridge_b, lambda_cap=self.lambda_cap)
        traj = run_svm(ds, cfg, self.algorithm, self.gamma, self.eta_outer,
                       self.eta_inner_y, inner_tol=self.inner_tol,
                       inner_max_steps=self.inner_max_steps, max_outer=self.max_outer,
                       val_tol=self.val_tol)
        self.trajectory_ = traj
        self.coef_ = traj.y_final[:-1].copy()
        self.intercept_ = float(traj.y_final[-1])
        self.slack_ = traj.x_final.copy()
        self.n_features_in_ = X.shape[1]
        self.n_iter_ = traj.n_iter
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return (X - self.center_) / self.scale_ @ self.coef_ + self.intercept_

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self.classes_[(self.decision_function(X) >= 0).astype(int)]
