import numpy as np
import pytest
from scipy.spatial import Delaunay

from staggdg.mesh import build_staggered_mesh, generate_rect_mesh


def perturbed_rect(nx, ny, amount=0.08, seed=0, box=(0.0, 1.0, 0.0, 1.0), periodic=(False, False)):
    """Structured mesh with interior nodes moved by up to ``amount`` cell widths."""
    xmin, xmax, ymin, ymax = box
    nodes, tris = generate_rect_mesh(xmin, xmax, ymin, ymax, nx, ny)
    rng = np.random.default_rng(seed)
    tol = 1e-12
    inner = (
        (nodes[:, 0] > xmin + tol)
        & (nodes[:, 0] < xmax - tol)
        & (nodes[:, 1] > ymin + tol)
        & (nodes[:, 1] < ymax - tol)
    )
    h = np.array([(xmax - xmin) / nx, (ymax - ymin) / ny])
    nodes[inner] += rng.uniform(-amount, amount, (int(inner.sum()), 2)) * h
    return build_staggered_mesh(nodes, tris, periodic)


def random_delaunay(n_points, seed):
    """Delaunay mesh of the unit square from random interior points."""
    rng = np.random.default_rng(seed)
    side = np.linspace(0.0, 1.0, 5)[1:-1]
    border = np.concatenate(
        [
            [[0, 0], [1, 0], [1, 1], [0, 1]],
            np.stack([side, np.zeros_like(side)], 1),
            np.stack([side, np.ones_like(side)], 1),
            np.stack([np.zeros_like(side), side], 1),
            np.stack([np.ones_like(side), side], 1),
        ]
    )
    pts = np.concatenate([border, rng.uniform(0.05, 0.95, (n_points, 2))])
    tri = Delaunay(pts)
    return build_staggered_mesh(pts, tri.simplices)


@pytest.fixture(scope="session")
def open_mesh():
    return perturbed_rect(5, 4, seed=1)


@pytest.fixture(scope="session")
def periodic_mesh():
    return perturbed_rect(6, 5, seed=2, periodic=(True, True))


@pytest.fixture(scope="session")
def channel_mesh():
    return perturbed_rect(6, 3, seed=3, box=(0.0, 2.0, 0.0, 1.0), periodic=(False, True))


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
