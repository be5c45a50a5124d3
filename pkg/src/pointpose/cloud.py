"""Point-cloud container, spatial index, sampling and grouping.

The attribute layout follows the 9-channel convention used by the
predictor: position (3), color (3), normal (3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError

DEFAULT_COLOR = 0.5  # mid-gray for clouds without color


class PointCloud:
    """Positions with optional colors, normals and per-point labels.

    positions: (N, 3) float64. colors: (N, 3) in [0, 1]. normals: (N, 3)
    unit vectors. class_ids / instance_ids: (N,) int32, class 0 is
    background. Treated as immutable after construction.
    """

    def __init__(self, positions, colors=None, normals=None, class_ids=None,
                 instance_ids=None):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if not np.all(np.isfinite(self.positions)):
            raise InvalidInputError("positions contain non-finite values")
        self.colors = None if colors is None else np.asarray(colors, dtype=np.float64).reshape(n, 3)
        self.normals = None if normals is None else np.asarray(normals, dtype=np.float64).reshape(n, 3)
        self.class_ids = None if class_ids is None else np.asarray(class_ids, dtype=np.int32).reshape(n)
        self.instance_ids = None if instance_ids is None else np.asarray(instance_ids, dtype=np.int32).reshape(n)
        if (self.class_ids is None) != (self.instance_ids is None):
            raise InvalidInputError("class and instance labels must come together")

    def __len__(self):
        return len(self.positions)

    @property
    def labeled(self) -> bool:
        return self.class_ids is not None

    def attributes(self) -> np.ndarray:
        """The (N, 9) attribute rows: position, color, normal. Missing
        colors default to mid-gray, missing normals to zero."""
        n = len(self)
        out = np.zeros((n, 9))
        out[:, 0:3] = self.positions
        out[:, 3:6] = self.colors if self.colors is not None else DEFAULT_COLOR
        if self.normals is not None:
            out[:, 6:9] = self.normals
        return out

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices)
        return PointCloud(
            self.positions[idx],
            None if self.colors is None else self.colors[idx],
            None if self.normals is None else self.normals[idx],
            None if self.class_ids is None else self.class_ids[idx],
            None if self.instance_ids is None else self.instance_ids[idx],
        )


class SpatialIndex:
    """kd-tree over positions with deterministic nearest-neighbor queries.

    Exact ties are broken toward the lowest point index, matching the
    brute-force reference.
    """

    def __init__(self, positions):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.positions)

    def __len__(self):
        return len(self.positions)

    def nearest(self, queries) -> np.ndarray:
        """Index of the nearest point for each query, ties to lowest index."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        dist, idx = self._tree.query(q, k=2 if len(self) > 1 else 1)
        if len(self) == 1:
            return np.zeros(len(q), dtype=np.int64)
        best = idx[:, 0].copy()
        # re-resolve only queries where the second candidate is (near-)tied
        close = dist[:, 1] - dist[:, 0] <= 1e-12 * (1.0 + dist[:, 0])
        for row in np.nonzero(close)[0]:
            r = dist[row, 0] + 1e-12 * (1.0 + dist[row, 0])
            cands = self._tree.query_ball_point(q[row], r)
            d2 = np.sum((self.positions[cands] - q[row]) ** 2, axis=1)
            order = sorted(zip(d2, cands))
            best[row] = order[0][1]
        return best

    def nearest_within(self, queries, max_dist: float):
        """Gated nearest neighbor. Returns (distances, indices); entries with
        no neighbor inside max_dist get distance inf and index len(self)."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        dist, idx = self._tree.query(q, distance_upper_bound=max_dist)
        return dist, idx

    def within_radius(self, query, radius: float) -> list:
        return self._tree.query_ball_point(np.asarray(query, dtype=np.float64), radius)

    def knn(self, queries, k: int):
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        return dist, idx


@dataclass
class GroupedSample:
    """Fixed-size neighborhoods around sampled keypoints.

    features has shape (K, G, 9); member positions are stored relative to
    their keypoint, so the keypoint itself maps to the origin.
    """

    keypoint_indices: np.ndarray  # (K,)
    features: np.ndarray  # (K, G, 9)
    group_radius: float


def farthest_point_sampling(positions, k: int, seed_rule="lowest_index") -> np.ndarray:
    """Greedy max-min subset selection of k point indices.

    Each selected point (after the seed) maximizes the minimum distance to
    all previously selected points; ties go to the lowest index. seed_rule
    is "lowest_index" (default) or "nearest_centroid".
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidInputError(f"need 1 <= k <= {n}, got {k}")
    if seed_rule == "lowest_index":
        seed = 0
    elif seed_rule == "nearest_centroid":
        seed = int(np.argmin(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
    else:
        raise InvalidInputError(f"unknown seed rule {seed_rule!r}")

    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed
    # in-place column arithmetic: the K*N inner loop is memory bound
    x = np.ascontiguousarray(pts[:, 0])
    y = np.ascontiguousarray(pts[:, 1])
    z = np.ascontiguousarray(pts[:, 2])
    acc = np.empty(n)
    tmp = np.empty(n)

    def accumulate_d2(idx, out):
        np.subtract(x, x[idx], out=out)
        np.multiply(out, out, out=out)
        np.subtract(y, y[idx], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        np.add(out, tmp, out=out)
        np.subtract(z, z[idx], out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        np.add(out, tmp, out=out)

    mind2 = np.empty(n)
    accumulate_d2(seed, mind2)
    for i in range(1, k):
        nxt = int(np.argmax(mind2))  # argmax takes the lowest index on ties
        chosen[i] = nxt
        accumulate_d2(nxt, acc)
        np.minimum(mind2, acc, out=mind2)
    return chosen


def random_sampling(positions, k: int, seed) -> np.ndarray:
    """k distinct indices drawn uniformly without replacement."""
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidInputError(f"need 1 <= k <= {n}, got {k}")
    rng = np.random.default_rng(seed)
    return rng.choice(n, size=k, replace=False).astype(np.int64)


def group_neighbors(cloud: PointCloud, keypoint_indices, g: int, radius: float,
                    index: SpatialIndex | None = None) -> GroupedSample:
    """Gather up to g nearest neighbors within radius around each keypoint.

    Neighbors are ordered nearest-first with ties to the lowest index; when
    fewer than g fall inside the radius the nearest member (the keypoint
    itself, at distance zero) is repeated to pad. Member positions are
    re-expressed relative to the keypoint.
    """
    if g < 1:
        raise InvalidInputError("group size must be >= 1")
    if radius <= 0:
        raise InvalidInputError("group radius must be positive")
    kp = np.asarray(keypoint_indices, dtype=np.int64).reshape(-1)
    if len(kp) and (kp.min() < 0 or kp.max() >= len(cloud)):
        raise InvalidInputError("keypoint index out of range")
    if index is None:
        index = SpatialIndex(cloud.positions)

    attrs = cloud.attributes()
    centers = cloud.positions[kp]
    dist, idx = index.knn(centers, min(g, len(cloud)))
    n = len(cloud)

    features = np.empty((len(kp), g, 9))
    for row in range(len(kp)):
        d_row, i_row = dist[row], idx[row]
        ok = np.isfinite(d_row) & (d_row <= radius) & (i_row < n)
        members = i_row[ok]
        d_mem = d_row[ok]
        # deterministic nearest-first order even under exact distance ties
        order = np.lexsort((members, d_mem))
        members = members[order]
        if len(members) == 0:  # cannot happen: the keypoint is its own neighbor
            members = np.array([kp[row]])
        if len(members) < g:
            members = np.concatenate(
                [members, np.full(g - len(members), members[0], dtype=np.int64)]
            )
        rows = attrs[members].copy()
        rows[:, 0:3] -= centers[row]
        features[row] = rows
    return GroupedSample(kp, features, float(radius))


def estimate_normals(cloud: PointCloud, k: int):
    """Per-point normals from the k-nearest-neighbor covariance.

    The normal is the eigenvector of the smallest eigenvalue, sign-oriented
    toward the sensor origin (the negative position direction). Returns
    (cloud_with_normals, degenerate_mask); degenerate neighborhoods (zero
    covariance) fall back to (0, 0, 1) and are flagged in the mask.
    """
    n = len(cloud)
    if k < 3:
        raise InvalidInputError("normal estimation needs k >= 3")
    if n < k:
        raise InvalidInputError(f"cloud has {n} points, needs >= k = {k}")
    index = SpatialIndex(cloud.positions)
    _, idx = index.knn(cloud.positions, k)
    nbrs = cloud.positions[idx]  # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k

    degenerate = np.einsum("nii->n", cov) < 1e-18
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]  # eigenvector of the smallest eigenvalue

    # orient toward the origin; canonicalize the ambiguous on-plane case
    toward = np.einsum("ni,ni->n", normals, cloud.positions)
    normals[toward > 0] *= -1.0
    amb = toward == 0
    if np.any(amb):
        lead = np.argmax(np.abs(normals[amb]), axis=1)
        sign = np.sign(normals[amb, lead])
        sign[sign == 0] = 1.0
        normals[amb] *= sign[:, None]
    normals[degenerate] = (0.0, 0.0, 1.0)

    out = PointCloud(cloud.positions, cloud.colors, normals,
                     cloud.class_ids, cloud.instance_ids)
    return out, degenerate
