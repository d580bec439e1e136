import math

import numpy as np
import pytest

import penbilevel.inner as inner_mod
from penbilevel.algorithms import (
    ALGORITHMS,
    COUPLED_ALGORITHMS,
    PenaltyConfig,
    alt_pbgd,
    jnt_pbgd,
    pbgd_blocc,
    pbgd_free,
    pbgd_free_cc,
    run_algorithm,
)
from penbilevel.core import (
    AllSpace,
    BilevelProblem,
    ConfigError,
    CoupledConstraint,
    ProblemConstants,
    UnsupportedProblemError,
)
from penbilevel.diagnostics import penalty_gradient, penalty_value
from penbilevel.inner import FixedSteps, StepNormTol
from penbilevel.problems import CATALOG, make_example, run_svm, svm_accuracy
from tests.test_problems import tiny_dataset

EXACT = StepNormTol(1e-14, 10_000)


def _cfg(**kw):
    kw.setdefault("inner_stop", EXACT)
    kw.setdefault("eta_inner_y", 0.5)
    return PenaltyConfig(**kw)


def _scalar(f, fx, fy, g, gx, gy, coupled=None):
    s = lambda v: float(np.asarray(v).reshape(-1)[0])  # noqa: E731
    return BilevelProblem(
        f=lambda x, y: float(f(s(x), s(y))),
        grad_x_f=lambda x, y: np.array([fx(s(x), s(y))], dtype=float),
        grad_y_f=lambda x, y: np.array([fy(s(x), s(y))], dtype=float),
        g=lambda x, y: float(g(s(x), s(y))),
        grad_x_g=lambda x, y: np.array([gx(s(x), s(y))], dtype=float),
        grad_y_g=lambda x, y: np.array([gy(s(x), s(y))], dtype=float),
        set_x=AllSpace(1), set_y=AllSpace(1), coupled=coupled,
        constants=ProblemConstants(l_f1=2.0, l_g1=2.0, mu_g=2.0))


def _x_only_upper(coupled=None):
    # f = x^2 ignores y, g = (y - x)^2
    return _scalar(lambda x, y: x * x, lambda x, y: 2 * x, lambda x, y: 0.0,
                   lambda x, y: (y - x) ** 2, lambda x, y: -2 * (y - x),
                   lambda x, y: 2 * (y - x), coupled)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(gamma=0), dict(eta_outer=-1.0), dict(max_outer=0),
                                    dict(outer_tol=-1.0), dict(record_every=0),
                                    dict(eta_inner_y=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            PenaltyConfig(**kw)

    def test_defaults_from_constants(self):
        p = make_example("bias")
        c = PenaltyConfig(gamma=10).resolve(p, "alt")
        # 1 / (2 * l_f1 * (1 + l_g1 / mu_g)) with l_f1 = l_g1 = mu_g = 2
        assert c.eta_outer == pytest.approx(1 / 8)
        assert PenaltyConfig(gamma=10).resolve(p, "jnt").eta_outer == pytest.approx(1 / 40)
        assert c.eta_inner_y == pytest.approx(1 / 2.2)

    def test_missing_constants_require_eta(self):
        p = BilevelProblem(**{**make_example("bias").__dict__, "constants": None})
        with pytest.raises(ConfigError):
            PenaltyConfig().resolve(p, "alt")

    def test_unknown_algorithm(self):
        with pytest.raises(ConfigError):
            run_algorithm("newton", make_example("bias"), PenaltyConfig())


class TestJnt:
    def test_example1_small_step_converges(self):
        p = make_example("example1")
        tr = jnt_pbgd(p, _cfg(gamma=10, eta_outer=0.01, eta_inner_y=1 / 7.5,
                              inner_stop=StepNormTol(1e-10, 1000), outer_tol=1e-4,
                              max_outer=500), [0.0], [0.0])
        assert tr.terminal == "converged" and tr.final_gg_metric < 1e-4

    def test_example1_large_step_oscillates(self):
        p = make_example("example1")
        tr = jnt_pbgd(p, _cfg(gamma=10, eta_outer=0.1, eta_inner_y=1 / 7.5,
                              inner_stop=StepNormTol(1e-10, 1000), outer_tol=1e-4,
                              max_outer=300), [0.0], [0.0])
        assert tr.terminal != "converged"
        xs = tr.column("x")[:, 0]
        assert np.all(np.abs(np.diff(xs[200:])) > 1e-2)

    @pytest.mark.parametrize("gamma", [1.0, 5.0, 10.0])
    def test_decoupled_quadratics(self, gamma):
        p = make_example("quad_decoupled")
        tr = jnt_pbgd(p, _cfg(gamma=gamma, eta_outer=0.05, outer_tol=1e-6, max_outer=400),
                      [2.0], [-1.5])
        assert tr.terminal == "converged" and tr.final_gg_metric < 1e-6
        assert abs(tr.x_final[0]) < 1e-6 and abs(tr.y_final[0]) < 1e-6

    def test_rejects_coupled(self):
        with pytest.raises(UnsupportedProblemError):
            jnt_pbgd(make_example("example2"), _cfg(eta_outer=0.1))

    def test_divergence_terminates(self):
        p = make_example("quad_decoupled")
        tr = jnt_pbgd(p, _cfg(gamma=10, eta_outer=0.5, max_outer=500), [1.0], [1.0])
        assert tr.terminal == "diverged" and tr.n_iter < 500


class TestAlt:
    def test_bias_first_gradient(self):
        tr = alt_pbgd(make_example("bias"), _cfg(gamma=10, eta_outer=0.05, max_outer=1),
                      [0.0])
        r = tr.iterations[0]
        assert r.y_g[0] == pytest.approx(-1.0, abs=1e-12)
        assert r.y_gamma[0] == pytest.approx(-1.5, abs=1e-12)
        assert r.g_t_norm == pytest.approx(10.0, abs=1e-10)
        assert tr.x_final[0] == pytest.approx(-0.5, abs=1e-11)

    def test_bias_converges_to_minus_five(self):
        tr = alt_pbgd(make_example("bias"), _cfg(gamma=10, eta_outer=0.05, max_outer=2000),
                      [0.0])
        assert abs(tr.x_final[0] + 5) < 1e-2

    def test_example1_fast(self):
        tr = alt_pbgd(make_example("example1"),
                      _cfg(gamma=10, eta_outer=0.1, eta_inner_y=1 / 7.5,
                           inner_stop=StepNormTol(1e-10, 1000), outer_tol=1e-4,
                           max_outer=50), [0.0], [0.0])
        assert tr.terminal == "converged" and tr.final_gg_metric < 1e-4

    def test_gradient_estimator_matches_closed_form(self):
        tr = alt_pbgd(make_example("bias"), _cfg(gamma=10, eta_outer=0.05, max_outer=100),
                      [3.0])
        xs, gs = tr.column("x")[:, 0], tr.column("g_t_norm")
        np.testing.assert_allclose(gs, np.abs(2 * xs + 10), atol=1e-8, rtol=0)

    @pytest.mark.parametrize("eta", [0.05, 0.25, 0.5])
    def test_descent_under_exact_inner(self, eta):
        p = make_example("bias")
        tr = alt_pbgd(p, _cfg(gamma=10, eta_outer=eta, max_outer=40, outer_tol=0), [4.0])
        vals = [penalty_value(p, 10.0, r.x, eta_inner=0.5, eta_g=0.5) for r in tr.iterations]
        vals.append(penalty_value(p, 10.0, tr.x_final, eta_inner=0.5, eta_g=0.5))
        assert all(b <= a + 1e-10 for a, b in zip(vals, vals[1:]))

    def test_single_loop_mode_via_fixed_steps(self):
        tr = alt_pbgd(make_example("bias"),
                      _cfg(gamma=10, eta_outer=0.05, inner_stop=FixedSteps(1),
                           max_outer=3000), [0.0])
        assert abs(tr.x_final[0] + 5) < 1e-2
        assert set(tr.column("inner_steps_used")) == {2}


class TestFree:
    @pytest.mark.parametrize("x0", [0.0, 3.0])
    def test_bias_naive_goes_to_zero(self, x0):
        tr = pbgd_free(make_example("bias"), _cfg(gamma=10, eta_outer=0.05, max_outer=2000),
                       [x0], mode="naive")
        assert abs(tr.x_final[0]) < 1e-3

    @pytest.mark.parametrize("x0", [0.0, 3.0])
    def test_bias_single_loop_goes_to_zero(self, x0):
        tr = pbgd_free(make_example("bias"), _cfg(gamma=10, eta_outer=0.05, max_outer=2000),
                       [x0], mode="single_loop")
        assert abs(tr.x_final[0]) < 1e-3

    def test_y_free_upper_single_loop(self):
        # F_gamma = x^2 in closed form, so the true metric is |2 x_T|
        p = _x_only_upper()
        tr = pbgd_free(p, _cfg(gamma=10, eta_outer=0.05, max_outer=3000, outer_tol=1e-9),
                       [2.0], [0.0], mode="single_loop")
        assert abs(2 * tr.x_final[0]) < 1e-4

    def test_example3_naive_near_stationary(self):
        p = make_example("example3")
        tr = pbgd_free(p, _cfg(gamma=15, eta_outer=0.05, eta_inner_y=5e-5,
                               inner_stop=StepNormTol(1e-10, 20000), max_outer=500),
                       [2.0], mode="naive")
        h = 1e-4
        fd = (penalty_value(p, 15, tr.x_final + h, eta_inner=5e-5)
              - penalty_value(p, 15, tr.x_final - h, eta_inner=5e-5)) / (2 * h)
        assert abs(fd) <= 0.05

    def test_single_loop_never_solves_value_function(self, monkeypatch):
        calls = []
        real = inner_mod.pgd_min

        def spy(grad, set_y, y0, eta, stop, full_output=False):
            calls.append(stop)
            return real(grad, set_y, y0, eta, stop, full_output)

        monkeypatch.setattr(inner_mod, "pgd_min", spy)
        p = make_example("bias")
        g_calls = []
        counted = BilevelProblem(**{**p.__dict__,
                                    "g": lambda x, y: g_calls.append(1) or p.g(x, y)})
        cfg = _cfg(gamma=10, eta_outer=0.05, max_outer=25, outer_tol=0)
        tr = pbgd_free(counted, cfg, [3.0], mode="single_loop")
        assert len(calls) == tr.n_iter == 25
        assert all(isinstance(s, FixedSteps) and s.k == 1 for s in calls)
        assert not g_calls
        calls.clear()
        alt_pbgd(p, cfg, [3.0])
        assert len(calls) == 50

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            pbgd_free(make_example("bias"), _cfg(eta_outer=0.1), mode="fast")


class TestBlocc:
    def test_example2_closed_form_first_step(self):
        p = make_example("example2")
        gamma, eta = 10.0, 0.05
        tr = pbgd_blocc(p, _cfg(gamma=gamma, eta_outer=eta, eta_inner_y=0.4,
                                eta_inner_lambda=0.6, max_outer=1), [1.0], [1.0])
        r = tr.iterations[0]
        k = math.e / (2 + math.cos(4))
        assert r.y_g[0] == pytest.approx(1.0, abs=1e-9)
        assert r.y_gamma[0] == pytest.approx(1.0, abs=1e-9)
        assert r.lambda_g[0] == pytest.approx(2.0, abs=1e-9)
        assert r.lambda_gamma[0] == pytest.approx(2 + k / gamma, abs=1e-9)
        g_t = p.grad_x_f([1.0], [1.0])[0] - k
        assert tr.x_final[0] == pytest.approx(1.0 - eta * g_t, abs=1e-9)
        # cross-check against a finite-difference penalty gradient
        h = 1e-5
        kw = dict(eta_inner=0.4, eta_lambda=0.6)
        fd = (penalty_value(p, gamma, [1 + h], **kw) - penalty_value(p, gamma, [1 - h], **kw)) / (2 * h)
        assert fd == pytest.approx(g_t, abs=1e-4)

    @pytest.mark.parametrize("gamma", [10.0, 100.0])
    def test_example2_converges(self, gamma):
        tr = pbgd_blocc(make_example("example2"),
                        _cfg(gamma=gamma, eta_outer=0.05, eta_inner_y=0.4,
                             eta_inner_lambda=0.6, inner_stop=StepNormTol(1e-10, 10000),
                             outer_tol=1e-4, max_outer=1000), [0.0])
        assert tr.terminal == "converged"

    def test_rejects_uncoupled(self):
        with pytest.raises(UnsupportedProblemError):
            pbgd_blocc(make_example("bias"), _cfg(eta_outer=0.1))
        with pytest.raises(UnsupportedProblemError):
            pbgd_free_cc(make_example("bias"), _cfg(eta_outer=0.1))

    def test_free_cc_matches_blocc_when_upper_ignores_y(self):
        cons = CoupledConstraint(1, lambda x, y: np.array([y[0] - 0.5 * x[0]]),
                                 lambda x, y: np.array([[-0.5]]),
                                 lambda x, y: np.array([[1.0]]))
        p = _x_only_upper(cons)
        cfg = _cfg(gamma=10, eta_outer=0.1, eta_inner_lambda=0.5,
                   inner_stop=StepNormTol(1e-13, 10000), max_outer=60)
        a = pbgd_blocc(p, cfg, [1.5])
        b = pbgd_free_cc(p, cfg, [1.5])
        np.testing.assert_allclose(a.column("x"), b.column("x"), atol=1e-8, rtol=0)
        np.testing.assert_allclose(a.column("g_t_norm"), b.column("g_t_norm"), atol=1e-8)


class TestSvmTiny:
    @pytest.mark.parametrize("algo", sorted(COUPLED_ALGORITHMS))
    def test_training_accuracy(self, algo):
        ds = tiny_dataset()
        tr = run_svm(ds, algorithm=algo, gamma=20.0)
        w, b = tr.y_final[:-1], tr.y_final[-1]
        assert svm_accuracy(ds, "train", w, b) == 1.0


class TestInvariants:
    @pytest.mark.parametrize("name", sorted(CATALOG))
    def test_feasibility_all_algorithms(self, name):
        p = make_example(name)
        entry = CATALOG[name]
        algos = (sorted(COUPLED_ALGORITHMS) if p.is_coupled
                 else ["jnt", "alt", "free_naive", "free_single"])
        for algo in algos:
            eta = entry.eta if algo != "jnt" else min(entry.eta, 0.01)
            cfg = PenaltyConfig(gamma=entry.gammas[0], eta_outer=eta,
                                eta_inner_y=entry.eta_inner,
                                eta_inner_lambda=entry.eta_lambda, max_outer=30)
            x0 = p.set_x.project(np.full(p.d_x, 2.5))
            tr = run_algorithm(algo, p, cfg, x0)
            assert tr.terminal != "diverged", algo
            for r in tr.iterations:
                assert p.set_x.contains(r.x, tol=1e-12)
                for y in (r.y_gamma, r.y_g):
                    if y is not None:
                        assert p.set_y.contains(y, tol=1e-12)
                if r.lambda_gamma is not None:
                    assert np.all(r.lambda_gamma >= 0)
            assert p.set_x.contains(tr.x_final, tol=1e-12)
            ts = tr.column("t")
            assert np.all(np.diff(ts) > 0)

    @pytest.mark.parametrize("algo", sorted(ALGORITHMS))
    def test_determinism(self, algo):
        p = make_example("example2" if algo in COUPLED_ALGORITHMS else "example1")
        cfg = PenaltyConfig(gamma=10, eta_outer=0.01, eta_inner_y=0.13, eta_inner_lambda=0.6,
                            max_outer=40, seed=3)
        a, b = run_algorithm(algo, p, cfg), run_algorithm(algo, p, cfg)
        assert a.terminal == b.terminal and a.n_iter == b.n_iter
        for name in ("x", "y_gamma", "g_t_norm", "gg_metric", "inner_steps_used"):
            np.testing.assert_array_equal(a.column(name), b.column(name))
        np.testing.assert_array_equal(a.x_final, b.x_final)

    def test_record_every(self):
        tr = alt_pbgd(make_example("bias"),
                      _cfg(gamma=10, eta_outer=0.05, max_outer=23, outer_tol=0,
                           record_every=5), [0.0])
        assert list(tr.column("t")) == [0, 5, 10, 15, 20, 22]

    def test_callback_stops(self):
        tr = alt_pbgd(make_example("bias"), _cfg(eta_outer=0.05, max_outer=100),
                      callback=lambda t, x, y, lam: t == 4)
        assert tr.terminal == "converged" and tr.n_iter == 5

    def test_penalty_gradient_agrees_with_alt_estimate(self):
        p = make_example("example1")
        tr = alt_pbgd(p, _cfg(gamma=10, eta_outer=0.1, eta_inner_y=1 / 7.5,
                              inner_stop=StepNormTol(1e-12, 5000), max_outer=1), [1.3])
        g = penalty_gradient(p, 10.0, [1.3], eta_inner=0.13)
        assert tr.iterations[0].g_t_norm == pytest.approx(abs(g[0]), abs=1e-8)
