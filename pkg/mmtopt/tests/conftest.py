"""Test configs."""
from pathlib import Path

import numpy as np
import pytest

from mmtopt.filtering import build_filter
from mmtopt.materials import (
    DatabaseInterval,
    HomogenizedDatabase,
    Tensor4,
    copolymer_classes,
    isotropic_tensor,
)
from mmtopt.mesh import Load, Support, apply_boundary_conditions, build_rect_mesh
from mmtopt.optimizer import Problem

TEST_DIR = Path(__file__).parent


def pytest_addoption(parser):
    parser.addoption(
        "--slow", action="store_true", default=False, help="Run long acceptance tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --slow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def stripes_tensor(m: float) -> Tensor4:
    """Orthotropic tensor, affine in m."""
    return Tensor4.from_entries(
        xxxx=600.0 + 300.0 * m, yyyy=300.0 + 100.0 * m, xxyy=140.0 + 20.0 * m, xyxy=90.0 + 10 * m
    )


def spots_tensor(m: float) -> Tensor4:
    """Isotropic tensor, quadratic in m."""
    return isotropic_tensor(300.0 + 400.0 * m + 300.0 * m**2, 0.3)


def make_database() -> HomogenizedDatabase:
    """Three-interval database with closed-form tensors."""
    intervals = []
    for pattern, samples, tensor in (
        ("a_spots", (-0.6, -0.4, -0.2), spots_tensor),
        ("stripes", (-0.2, 0.0, 0.2), stripes_tensor),
        ("b_spots", (0.2, 0.4, 0.6), spots_tensor),
    ):
        intervals.append(
            DatabaseInterval(
                pattern=pattern,
                samples=samples,
                tensors=tuple(tensor(m) for m in samples),
                seeds=(0, 1, 2),
            )
        )
    return HomogenizedDatabase(intervals=tuple(intervals), rho_a=10.0, rho_b=1.0)


@pytest.fixture
def database():
    return make_database()


@pytest.fixture
def beam_mesh():
    """5 x 1 strip, 10 triangles, clamped left edge, downward load at the bottom-right corner."""
    mesh = build_rect_mesh(5.0, 1.0, 5, 1)
    return apply_boundary_conditions(
        mesh,
        [Support(where="x == 0")],
        [Load(nearest=(5.0, 0.0), force=(0.0, -1.0))],
    )


@pytest.fixture
def gradient_problem(beam_mesh, database):
    """10-element problem with an orientable stripe class and an isotropic spot class."""
    classes = copolymer_classes(database)[1:]
    return Problem(
        mesh=beam_mesh, classes=classes, mass_budget=10.0, filter=build_filter(beam_mesh, 1.2)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
