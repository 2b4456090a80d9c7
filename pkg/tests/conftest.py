import numpy as np
import pytest

from diffproj import core, ident

# Verdict lines recorded by the acceptance suite; replayed after the
# run so they survive pytest's output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_rotation(rng):
    A = rng.standard_normal((3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_F(rng, spread=0.4):
    """Random deformation gradient with positive determinant."""
    Q1 = random_rotation(rng)
    Q2 = random_rotation(rng)
    sig = 1.0 + spread * (2.0 * rng.random(3) - 1.0)
    return Q1 @ np.diag(sig) @ Q2.T


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def library():
    return ident.scene_library()


def single_tet_scene(model="arap", **mat_kw):
    v = np.array([[0.0, 0.0, 0.0],
                  [1.0, 0.0, 0.0],
                  [0.0, 1.0, 0.0],
                  [0.0, 0.0, 1.0]]) * 0.3
    t = np.array([[0, 1, 2, 3]])
    kw = dict(stiffness=1e4, E=5e4, nu=0.3)
    kw.update(mat_kw)
    return core.Scene(
        vertices=v, elements=t,
        masses=core.lumped_masses(v, t, density=1000.0),
        materials=[core.MaterialParams(model=model, **kw)],
        bindings=[core.BindingSpec(0, v[0], compliance=1e-6)],
        h=0.01)
