import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from penbilevel.core import (
    AllSpace,
    Ball,
    BilevelProblem,
    Box,
    DimensionError,
    InfeasiblePointError,
    NonNegOrthant,
    NumericalError,
    ProblemConstants,
    as_vector,
    fd_gradient_check,
    generalized_gradient,
    project,
)
from penbilevel.problems import make_example


def _sets():
    return [
        AllSpace(3),
        NonNegOrthant(3),
        Box([-1.0, 0.0, 2.0], [1.0, 0.5, 5.0]),
        Ball([0.5, -1.0, 2.0], 1.5),
    ]


class TestProject:
    def test_box_clamps_below(self):
        assert project(Box.interval(0, 3), [-1.0])[0] == 0.0

    def test_orthant_is_relu(self):
        np.testing.assert_array_equal(project(NonNegOrthant(2), [-1.0, 2.0]), [0.0, 2.0])

    def test_ball_radial_rescale(self):
        # ||(3, 4)|| = 5 so the nearest point is (3, 4) / 5
        p = project(Ball([0.0, 0.0], 1.0), [3.0, 4.0])
        np.testing.assert_allclose(p, [0.6, 0.8], atol=1e-15)

    def test_ball_center_maps_to_center(self):
        ball = Ball([1.0, 2.0], 0.5)
        np.testing.assert_array_equal(project(ball, [1.0, 2.0]), [1.0, 2.0])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            project(Box.interval(0, 1, dim=2), [1.0, 2.0, 3.0])

    def test_allspace_returns_copy(self):
        q = np.array([1.0, 2.0])
        p = project(AllSpace(2), q)
        p[0] = 9
        assert q[0] == 1.0

    def test_box_bounds_read_only(self):
        box = Box([0.0], [1.0])
        with pytest.raises(ValueError):
            box.lower[0] = 5.0

    def test_invalid_sets(self):
        with pytest.raises(ValueError):
            Box([1.0], [0.0])
        with pytest.raises(ValueError):
            Ball([0.0], 0.0)
        with pytest.raises(DimensionError):
            AllSpace(0)

    @pytest.mark.parametrize("s", _sets(), ids=lambda s: type(s).__name__)
    def test_idempotent_and_nonexpansive_1000(self, s):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            q1, q2 = rng.normal(scale=4, size=(2, s.dim))
            p1, p2 = s.project(q1), s.project(q2)
            np.testing.assert_array_equal(s.project(p1), p1)
            assert s.contains(p1)
            assert np.linalg.norm(p1 - p2) <= np.linalg.norm(q1 - q2) + 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
           st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_projection_properties_hypothesis(self, a, b):
        for s in _sets():
            p, q = s.project(a), s.project(b)
            np.testing.assert_array_equal(s.project(p), p)
            assert np.all(np.abs(s.project(p) - p) <= 1e-12)
            assert np.linalg.norm(p - q) <= np.linalg.norm(np.subtract(a, b)) + 1e-9


class TestGeneralizedGradient:
    def test_allspace_is_gradient(self):
        np.testing.assert_allclose(
            generalized_gradient(AllSpace(2), [0.3, 0.1], [2.0, -3.0], 0.1), [2.0, -3.0])

    def test_box_interior_direction(self):
        # project(0.2) = 0.2 is interior, so the metric equals grad
        np.testing.assert_allclose(generalized_gradient(Box.interval(0, 3), [0.0], [-2.0], 0.1),
                                   [-2.0])

    def test_box_boundary_stationary(self):
        assert generalized_gradient(Box.interval(0, 3), [0.0], [2.0], 0.1)[0] == 0.0

    def test_infeasible_point(self):
        with pytest.raises(InfeasiblePointError):
            generalized_gradient(Box.interval(0, 3), [4.0], [1.0], 0.1)

    def test_zero_exactly_at_vi_points(self):
        # min (x - 2)^2 over [0, 1] is stationary at x = 1, min ||x - c||^2 over
        # the unit ball is stationary at c / ||c||
        assert generalized_gradient(Box.interval(0, 1), [1.0], [2 * (1.0 - 2)], 0.3)[0] == 0.0
        c = np.array([3.0, 4.0])
        ball = Ball([0.0, 0.0], 1.0)
        x = ball.project(c)
        assert np.linalg.norm(generalized_gradient(ball, x, 2 * (x - c), 0.1)) <= 1e-12
        assert np.linalg.norm(generalized_gradient(NonNegOrthant(2), [0.0, 0.0], [1.0, 5.0],
                                                   0.5)) == 0.0

    def test_nonzero_off_stationary(self):
        assert abs(generalized_gradient(Box.interval(0, 1), [0.5], [1.0], 0.1)[0]) > 0.5


class TestFdCheck:
    def test_quadratic(self):
        err = fd_gradient_check(lambda x: float(x @ x), lambda x: 2 * x, [3.0], h=1e-5)
        assert err < 1e-8

    def test_constant(self):
        assert fd_gradient_check(lambda x: 7.0, lambda x: np.zeros(2), [1.0, -1.0]) == 0.0

    def test_example1_upper_gradient(self):
        p = make_example("example1")
        y = np.array([1.0])
        err = fd_gradient_check(lambda x: p.f(x, y), lambda x: p.grad_x_f(x, y), [1.0], h=1e-6)
        x = np.array([1.0])
        err = max(err, fd_gradient_check(lambda v: p.f(x, v), lambda v: p.grad_y_f(x, v),
                                         [1.0], h=1e-6))
        assert err < 1e-4

    def test_detects_wrong_gradient(self):
        # |2 - 3| / max(1, 3)
        err = fd_gradient_check(lambda x: float(x @ x), lambda x: 3 * x, [1.0])
        assert err == pytest.approx(1 / 3, abs=1e-8)


class TestTypes:
    def test_as_vector_rejects_nan(self):
        with pytest.raises(NumericalError):
            as_vector([1.0, np.nan])

    def test_as_vector_rejects_matrix(self):
        with pytest.raises(DimensionError):
            as_vector(np.eye(2))

    def test_constants_validation(self):
        with pytest.raises(ValueError):
            ProblemConstants(mu_g=0.0)
        with pytest.raises(ValueError):
            ProblemConstants(mu_g=2.0, l_g1=1.0)
        with pytest.raises(ValueError):
            ProblemConstants(l_f0=-1.0)
        assert ProblemConstants(mu_g=1.0, l_g1=1.0).l_g1 == 1.0

    def test_problem_dims_and_purity(self):
        p = make_example("example2")
        assert (p.d_x, p.d_y, p.is_coupled) == (1, 1, True)
        x, y = np.array([0.7]), np.array([0.2])
        assert p.f(x, y) == p.f(x, y)
        np.testing.assert_array_equal(p.grad_x_f(x, y), p.grad_x_f(x, y))
        assert p.constraint_jac_x(x, y).shape == (1, 1)

    def test_problem_is_frozen(self):
        p = make_example("bias")
        assert isinstance(p, BilevelProblem)
        with pytest.raises(AttributeError):
            p.name = "other"
