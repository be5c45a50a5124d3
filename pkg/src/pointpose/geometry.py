"""Rigid-body math: transforms, boxes, the 9-point box parameterization,
Kabsch alignment and mesh utilities.

All lengths are meters. Point sets are float64 arrays of shape (N, 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, InvalidInputError

ROTATION_TOL = 1e-9


def as_points(pts) -> np.ndarray:
    """Coerce input to a float64 (N, 3) array."""
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"expected (N, 3) points, got shape {arr.shape}")
    return arr


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=np.float64)


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion: p -> rotation @ p + translation.

    The rotation must be orthonormal with determinant +1 (checked to 1e-9
    on construction). Instances are immutable.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise InvalidInputError(f"rotation must be 3x3, got {r.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidInputError("transform contains non-finite values")
        err = np.linalg.norm(r.T @ r - np.eye(3))
        if err > ROTATION_TOL or abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise InvalidInputError(
                f"rotation is not orthonormal with det +1 (error {err:.3e})"
            )
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidInputError(f"expected 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, pts) -> np.ndarray:
        """Transform one point (3,) or a point set (N, 3)."""
        arr = np.asarray(pts, dtype=np.float64)
        if arr.ndim == 1:
            return self.rotation @ arr + self.translation
        return arr @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.array(self.min, dtype=np.float64).reshape(3)
        hi = np.array(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise InvalidInputError("Aabb min exceeds max")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def of_points(cls, pts) -> "Aabb":
        arr = as_points(pts)
        if len(arr) == 0:
            raise InvalidInputError("cannot bound an empty point set")
        return cls(arr.min(axis=0), arr.max(axis=0))

    def corners(self) -> np.ndarray:
        """The 8 corners in canonical order: corner b has coordinate
        (max if bit set else min) with bit0 -> x, bit1 -> y, bit2 -> z."""
        out = np.empty((8, 3))
        for b in range(8):
            out[b, 0] = self.max[0] if b & 1 else self.min[0]
            out[b, 1] = self.max[1] if b & 2 else self.min[1]
            out[b, 2] = self.max[2] if b & 4 else self.min[2]
        return out

    def overlaps(self, other: "Aabb") -> bool:
        return bool(np.all(self.min < other.max) and np.all(other.min < self.max))


@dataclass(frozen=True)
class ControlPoints:
    """The 9-point box parameterization of a rigid model: the 8 corners of
    its tight axis-aligned box plus the vertex centroid (index 8)."""

    corners: np.ndarray  # (8, 3)
    centroid: np.ndarray  # (3,)

    def __post_init__(self):
        c = np.array(self.corners, dtype=np.float64)
        m = np.array(self.centroid, dtype=np.float64).reshape(3)
        if c.shape != (8, 3):
            raise InvalidInputError(f"corners must be (8, 3), got {c.shape}")
        c.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "corners", c)
        object.__setattr__(self, "centroid", m)

    def as_array(self) -> np.ndarray:
        """All 9 points as a (9, 3) array, centroid last."""
        return np.vstack([self.corners, self.centroid])


class TriMesh:
    """A triangle mesh: (V, 3) float64 vertices, (F, 3) int vertex indices.

    The diameter (maximum pairwise vertex distance) is computed lazily and
    cached on first access.
    """

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (
            self.faces.min() < 0 or self.faces.max() >= len(self.vertices)
        ):
            raise InvalidInputError("face index out of range")
        self._diameter = None

    @property
    def diameter(self) -> float:
        if self._diameter is None:
            self._diameter = model_diameter(self.vertices)
        return self._diameter

    def __repr__(self):
        return f"TriMesh({len(self.vertices)} vertices, {len(self.faces)} faces)"


def fit_control_points(mesh: TriMesh) -> ControlPoints:
    """Fit the model-frame box corners and centroid to a mesh.

    Corners are the tight axis-aligned box of the vertex set in canonical
    order; the centroid is the arithmetic mean of the vertices. Degenerate
    (flat or linear) boxes are accepted.
    """
    if len(mesh.vertices) == 0:
        raise InvalidInputError("cannot fit control points to an empty mesh")
    box = Aabb.of_points(mesh.vertices)
    return ControlPoints(box.corners(), mesh.vertices.mean(axis=0))


def model_diameter(vertices) -> float:
    """Exact maximum pairwise Euclidean distance over vertices.

    Quadratic in the vertex count, evaluated in row blocks to bound memory.
    """
    pts = as_points(vertices)
    n = len(pts)
    if n < 2:
        raise InvalidInputError("diameter needs at least 2 vertices")
    best = 0.0
    block = 512
    for i in range(0, n, block):
        chunk = pts[i : i + block]
        d2 = np.sum((chunk[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def kabsch_align(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping src onto dst.

    Uses centroid subtraction and SVD of the cross-covariance, with the
    reflection corrected so the rotation determinant is always +1.

    Raises AlignmentError on size mismatch or when the centered source set
    is (near-)collinear, tested as smallest singular value < 1e-9 * largest.
    """
    a = as_points(src)
    b = as_points(dst)
    if a.shape != b.shape:
        raise AlignmentError(f"size mismatch: {a.shape} vs {b.shape}")
    if len(a) < 3:
        raise AlignmentError("alignment needs at least 3 correspondences")

    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    a0 = a - ca
    b0 = b - cb

    sv = np.linalg.svd(a0, compute_uv=False)
    if sv[0] <= 0.0 or sv[-1] < 1e-9 * sv[0]:
        raise AlignmentError("source points are collinear or coincident")

    h = a0.T @ b0
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cb - rot @ ca)


def transform_points(t: RigidTransform, pts) -> np.ndarray:
    """Apply a rigid transform to a point set."""
    return t.apply(as_points(pts))
