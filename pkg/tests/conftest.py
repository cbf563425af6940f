import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from refield.morphable import Camera, FaceParams, Mesh, synthetic_model
from refield.geometry import posed_mesh

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def model():
    return synthetic_model()


@pytest.fixture(scope="session")
def camera():
    return Camera.default(128)


@pytest.fixture(scope="session")
def frontal_mesh(model):
    return posed_mesh(model, FaceParams.neutral(model))


def plane_mesh(z=10.0, half=5.0, n=4, uv_span=(0.0, 1.0)) -> Mesh:
    """Fronto-parallel grid at depth ``z`` facing the camera (normal (0,0,-1))."""
    g = np.linspace(-half, half, n + 1)
    xs, ys = np.meshgrid(g, g)
    verts = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)], axis=1)
    lo, hi = uv_span
    uv = np.stack([(xs.ravel() + half) / (2 * half), (ys.ravel() + half) / (2 * half)], axis=1)
    uv = lo + (hi - lo) * uv
    tris = []
    for r in range(n):
        for c in range(n):
            a = r * (n + 1) + c
            b, d, e = a + 1, a + n + 1, a + n + 2
            # winding chosen so that face normals point to -z (toward the camera)
            tris += [[a, d, b], [b, d, e]]
    return Mesh(verts, np.array(tris), uv, "camera")


def small_camera(size=8, focal=None):
    return Camera(focal if focal is not None else float(size), (size / 2, size / 2), size, size)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
