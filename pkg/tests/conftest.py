"""Shared fixtures and the acceptance summary printed at the end of a run."""
from __future__ import annotations

import numpy as np
import pytest

from feedback_learning.basis import build_basis, index_set, project
from feedback_learning.problem import ObstacleParams, lqr_value, obstacle_problem

# filled by tests/test_acceptance.py; one (label, passed, detail) entry per criterion
ACCEPTANCE_LINES: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        label, ok, detail = ACCEPTANCE_LINES[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {label}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def lqr_problem():
    return obstacle_problem(ObstacleParams(gamma=0.0))


@pytest.fixture(scope="session")
def basis10(lqr_problem):
    return build_basis(1, index_set("full", 10, 2), lqr_problem.Omega)


@pytest.fixture(scope="session")
def theta_lqr(basis10, lqr_problem):
    return project(basis10, lambda y: lqr_value(lqr_problem.beta, y))
