import numpy as np
import pytest

from pointpose.geometry import RigidTransform, TriMesh


def random_rotation(rng) -> np.ndarray:
    """Uniform-ish random rotation via QR, independent of the library path."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1.0
    return q


def random_transform(rng, translation_scale=1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng),
                          rng.normal(scale=translation_scale, size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_cube_mesh():
    verts = np.array([
        [0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
        [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1],
    ], dtype=float)
    faces = np.array([
        [0, 1, 3], [0, 3, 2], [4, 7, 5], [4, 6, 7],
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
        [1, 5, 7], [1, 7, 3], [0, 2, 6], [0, 6, 4],
    ])
    return TriMesh(verts, faces)
