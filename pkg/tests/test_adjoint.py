"""Tests for adjoint paths and exact gradients of the discrete closed-loop cost."""
from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from feedback_learning.adjoint import (
    EscapeError,
    finite_difference_grad,
    grad_cost_continuous,
    grad_cost_discrete,
    solve_adjoint_continuous,
    solve_adjoint_discrete,
)
from feedback_learning.basis import build_basis, index_set, project
from feedback_learning.problem import ControlProblem, ObstacleParams, lqr_value, obstacle_problem
from feedback_learning.simulate import PolyField, QuadraticField, linear_feedback, rollout, value_feedback

SQB = math.sqrt(0.1)


@pytest.fixture(scope="module")
def obstacle():
    return obstacle_problem(ObstacleParams(gamma=10.0))


@pytest.fixture(scope="module")
def basis6(obstacle):
    return build_basis(1, index_set("full", 6, 2), obstacle.Omega)


def random_pair(basis, rng, scale=0.05):
    theta = project(basis, lambda y: lqr_value(0.1, y))
    theta = theta + scale * rng.standard_normal(basis.size) / (1 + basis.index_set.array.sum(axis=1)) ** 2
    y0 = np.array([rng.uniform(-5, 5), rng.uniform(-2, 2)])
    return theta, y0


def rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


class TestAdjointPaths:
    def test_zero_problem(self, basis6):
        zero = obstacle_problem()
        problem = ControlProblem(
            d=2, m=2, B=np.eye(2), beta=0.1, f=zero.f, Df=zero.Df,
            cost=lambda y: np.zeros(np.atleast_2d(y).shape[0]),
            cost_grad=lambda y: np.zeros_like(np.atleast_2d(y)),
            cost_hess=lambda y: np.zeros(np.atleast_2d(y).shape + (2,)),
            Omega=zero.Omega, omega=zero.omega, delta=zero.delta,
        )
        field = PolyField(basis6, np.zeros(basis6.size))
        traj = rollout(problem, value_feedback(problem, field), np.array([1.0, -1.0]), 1.0)
        for solver in (solve_adjoint_continuous, solve_adjoint_discrete):
            assert_array_equal(solver(problem, field, traj).p, 0.0)

    @pytest.mark.parametrize("solver", [solve_adjoint_continuous, solve_adjoint_discrete])
    def test_terminal_value_and_length(self, obstacle, basis6, rng, solver):
        theta, y0 = random_pair(basis6, rng)
        field = PolyField(basis6, theta)
        traj = rollout(obstacle, value_feedback(obstacle, field), y0, 1.0)
        path = solver(obstacle, field, traj)
        assert path.p.shape == traj.states.shape
        assert np.all(path.p[-1] == 0.0)

    def test_lqr_costate(self, lqr_problem):
        # long horizon so that the finite-horizon tail is negligible on [0, 2]
        field = QuadraticField(SQB * np.eye(2))
        errors = []
        for dt in (1 / 200, 1 / 400):
            traj = rollout(lqr_problem, value_feedback(lqr_problem, field), np.array([4.0, 1.5]), 5.0, dt)
            p = solve_adjoint_continuous(lqr_problem, field, traj).p
            head = traj.t <= 2.0
            err = np.abs(-p[head] - SQB * traj.states[head]).max() / np.abs(SQB * traj.states[0]).max()
            assert err < 5 * dt
            errors.append(err)
        assert errors[0] / errors[1] == pytest.approx(2.0, rel=0.1)

    def test_restart_gives_cost_to_go_gradient(self, obstacle, basis6, rng):
        theta, y0 = random_pair(basis6, rng)
        field = PolyField(basis6, theta)
        fb = value_feedback(obstacle, field)
        traj = rollout(obstacle, fb, y0, 1.0)
        p = solve_adjoint_discrete(obstacle, field, traj).p
        j0 = 160
        tail = rollout(obstacle, fb, traj.states[j0], 1.0 - traj.t[j0])
        assert_allclose(solve_adjoint_discrete(obstacle, field, tail).p, p[j0:], rtol=1e-12, atol=1e-14)
        h = 1e-6
        fd = np.array(
            [
                (rollout(obstacle, fb, traj.states[j0] + h * e, 0.6).cost - rollout(obstacle, fb, traj.states[j0] - h * e, 0.6).cost)
                / (2 * h)
                for e in np.eye(2)
            ]
        )
        assert rel(-p[j0], fd) < 1e-6

    def test_escaped_trajectory(self, lqr_problem, basis6):
        traj = rollout(lqr_problem, linear_feedback(np.eye(2) / SQB), np.array([4.9, 1.9]), 1.0)
        field = PolyField(basis6, np.zeros(basis6.size))
        with pytest.raises(EscapeError):
            solve_adjoint_continuous(lqr_problem, field, traj)


class TestGradient:
    def test_matches_finite_differences(self, obstacle, basis6, rng):
        for _ in range(5):
            theta, y0 = random_pair(basis6, rng)
            _, g = grad_cost_discrete(obstacle, basis6, theta, y0, 1.0)
            assert rel(g, finite_difference_grad(obstacle, basis6, theta, y0, 1.0)) <= 1e-6

    def test_batch_is_sum(self, obstacle, basis6, rng):
        theta, _ = random_pair(basis6, rng)
        Y0 = np.array([[1.0, 1.0], [-4.0, -1.0], [3.0, 0.5]])
        c, g = grad_cost_discrete(obstacle, basis6, theta, Y0, 1.0)
        parts = [grad_cost_discrete(obstacle, basis6, theta, y, 1.0) for y in Y0]
        assert c == pytest.approx(sum(p[0] for p in parts), rel=1e-14)
        assert_allclose(g, sum(p[1] for p in parts), rtol=1e-11, atol=1e-14)

    def test_constant_direction(self, obstacle, basis6, rng):
        theta, y0 = random_pair(basis6, rng)
        _, g = grad_cost_discrete(obstacle, basis6, theta, y0, 1.0)
        assert basis6.index_set.indices[0] == (0, 0)
        assert g[0] == 0.0

    def test_escape_raises(self, lqr_problem, basis6):
        theta = -project(basis6, lambda y: lqr_value(0.1, y))
        with pytest.raises(EscapeError):
            grad_cost_discrete(lqr_problem, basis6, theta, np.array([4.9, 1.9]), 1.0)

    def test_continuous_converges_to_discrete(self, obstacle, basis6, rng):
        theta, y0 = random_pair(basis6, rng)
        gaps = []
        for dt in (1 / 200, 1 / 400, 1 / 800):
            c_cont, g_cont = grad_cost_continuous(obstacle, basis6, theta, y0, 1.0, dt)
            c_disc, g_disc = grad_cost_discrete(obstacle, basis6, theta, y0, 1.0, dt)
            assert c_cont == c_disc
            gaps.append(rel(g_cont, g_disc))
        assert_allclose(np.array(gaps[:-1]) / gaps[1:], 2.0, rtol=0.15)

    def test_lqr_stationary_in_the_limit(self, lqr_problem):
        """At the exact LQR coefficients the gradient is pure first-order discretization bias.

        The horizon is long enough that the finite-horizon tail (of order
        exp(-2T/sqrt(beta))) is far below the tolerance; Richardson
        extrapolation over dt -> dt/4 then removes the bias.
        """
        basis = build_basis(1, index_set("full", 4, 2), lqr_problem.Omega)
        theta = project(basis, lambda y: lqr_value(0.1, y))
        Y0 = np.array([[1.0, 0.5], [-2.0, 1.0], [3.0, -1.5]])
        c1, g1 = grad_cost_discrete(lqr_problem, basis, theta, Y0, 4.0, 1 / 1600)
        c4, g4 = grad_cost_discrete(lqr_problem, basis, theta, Y0, 4.0, 1 / 6400)
        assert np.linalg.norm(g1) / np.linalg.norm(g4) == pytest.approx(4.0, rel=0.05)
        assert np.linalg.norm((4 * g4 - g1) / 3) / c4 < 1e-6
