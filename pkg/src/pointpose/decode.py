"""Pose recovery from per-keypoint predictions.

Pipeline: threshold on class and confidence, rebuild box-point hypotheses
by adding the predicted offsets back onto the keypoints, voxel-grid class
voting, non-maxima suppression on box centroids, cluster averaging plus
rigid alignment against the model box points, then ICP refinement against
the scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import PointCloud, SpatialIndex, farthest_point_sampling
from .errors import AlignmentError, InvalidInputError, PoseSolveError
from .geometry import ControlPoints, RigidTransform, kabsch_align


@dataclass
class IcpConfig:
    max_iterations: int = 50
    convergence_eps: float = 1e-6        # m, minimum RMS improvement
    max_correspondence_dist: float = 0.02  # m

    def __post_init__(self):
        if (self.max_iterations <= 0 or self.convergence_eps <= 0
                or self.max_correspondence_dist <= 0):
            raise InvalidInputError("ICP settings must be positive")


@dataclass
class DecodeConfig:
    tau: float = 0.8
    voxel_edge: float = 0.1              # m
    nms_center_dist: float = 0.1         # m
    icp: IcpConfig = field(default_factory=IcpConfig)

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidInputError("tau must be in [0, 1]")
        if self.voxel_edge <= 0 or self.nms_center_dist <= 0:
            raise InvalidInputError("voxel edge and NMS distance must be positive")

    @classmethod
    def for_model(cls, diameter: float, tau: float = 0.8,
                  voxel_edge: float | None = None,
                  nms_center_dist: float | None = None,
                  icp: IcpConfig | None = None) -> "DecodeConfig":
        """Fill the distance defaults from the model diameter: voxel edge
        diameter/2, suppression radius diameter/2."""
        return cls(
            tau=tau,
            voxel_edge=voxel_edge if voxel_edge is not None else diameter / 2.0,
            nms_center_dist=(nms_center_dist if nms_center_dist is not None
                             else 0.5 * diameter),
            icp=icp if icp is not None else IcpConfig(),
        )


@dataclass
class BoxHypothesis:
    control_points_world: np.ndarray  # (9, 3), centroid at index 8
    class_id: int
    confidence: float
    source_keypoint: int

    @property
    def centroid(self) -> np.ndarray:
        return self.control_points_world[8]


@dataclass
class PoseEstimate:
    class_id: int
    pose: RigidTransform
    score: float
    refined: bool = False


def reconstruct_hypotheses(pred, keypoint_positions, cfg: DecodeConfig) -> list:
    """Keep keypoints whose argmax class is foreground and whose confidence
    clears tau; each yields the 9 box points keypoint + offset."""
    positions = np.asarray(keypoint_positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) != len(pred):
        raise InvalidInputError("prediction and keypoints are misaligned")
    classes = pred.class_probs.argmax(axis=1)
    keep = (classes > 0) & (pred.confidence >= cfg.tau)
    out = []
    for k in np.nonzero(keep)[0]:
        cp = positions[k][None, :] + pred.offsets[k]
        out.append(BoxHypothesis(cp, int(classes[k]), float(pred.confidence[k]), int(k)))
    return out


def voxel_vote(hyps: list, voxel_edge: float) -> list:
    """Bin hypotheses by the voxel containing their predicted centroid and
    keep, per voxel, only the majority class (ties to the class with the
    larger summed confidence, then the lower class id)."""
    if voxel_edge <= 0:
        raise InvalidInputError("voxel edge must be positive")
    bins = {}
    for h in hyps:
        key = tuple(np.floor(h.centroid / voxel_edge).astype(np.int64))
        bins.setdefault(key, []).append(h)

    keep = set()
    for members in bins.values():
        votes = {}
        for h in members:
            count, conf_sum = votes.get(h.class_id, (0, 0.0))
            votes[h.class_id] = (count + 1, conf_sum + h.confidence)
        winner = max(votes.items(), key=lambda kv: (kv[1][0], kv[1][1], -kv[0]))[0]
        keep.update(id(h) for h in members if h.class_id == winner)
    return [h for h in hyps if id(h) in keep]


def nms(hyps: list, center_dist: float) -> list:
    """Greedy suppression by descending confidence: a hypothesis is dropped
    when its centroid lies within center_dist of an already-kept hypothesis
    of the same class. Ties order by lower source keypoint."""
    order = sorted(hyps, key=lambda h: (-h.confidence, h.source_keypoint))
    kept = []
    for h in order:
        crowded = any(
            k.class_id == h.class_id
            and np.linalg.norm(k.centroid - h.centroid) <= center_dist
            for k in kept
        )
        if not crowded:
            kept.append(h)
    return kept


def solve_pose(cluster: list, model_cp: ControlPoints) -> PoseEstimate:
    """Average the 9 world-frame box points over the cluster, then solve the
    rigid transform from the model-frame box points onto the average."""
    if not cluster:
        raise PoseSolveError("empty hypothesis cluster")
    mean_cp = np.mean([h.control_points_world for h in cluster], axis=0)
    try:
        pose = kabsch_align(model_cp.as_array(), mean_cp)
    except AlignmentError as exc:
        raise PoseSolveError(f"degenerate averaged box points: {exc}") from None
    score = float(np.mean([h.confidence for h in cluster]))
    return PoseEstimate(cluster[0].class_id, pose, score, refined=False)


def icp_refine(estimate: PoseEstimate, model_points, scene: PointCloud,
               cfg: IcpConfig, index: SpatialIndex | None = None,
               return_history: bool = False):
    """Point-to-point ICP against the scene.

    Each iteration gates nearest neighbors at max_correspondence_dist and
    re-solves the absolute pose from the gated pairs. The residual is the
    RMS over all model points of the nearest-neighbor distance clamped at
    the gate, a pose-only function, so points entering the gate lower it
    rather than distorting the mean; an update is accepted only if it
    lowers this residual, making the recorded sequence non-increasing.
    Stops when the improvement drops below convergence_eps or after
    max_iterations. Fewer than 3 correspondences at any iteration returns
    the input estimate with refined left false.
    """
    model_points = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(model_points) == 0:
        raise InvalidInputError("ICP needs model points")
    if index is None:
        index = SpatialIndex(scene.positions)
    gate = cfg.max_correspondence_dist

    def survey(pose):
        moved = pose.apply(model_points)
        dist, idx = index.nearest_within(moved, gate)
        valid = idx < len(index)
        rms = float(np.sqrt(np.mean(np.minimum(np.where(valid, dist, gate),
                                               gate) ** 2)))
        return valid, idx, rms

    pose = estimate.pose
    valid, idx, rms = survey(pose)
    if valid.sum() < 3:
        return (estimate, []) if return_history else estimate
    history = [rms]

    for _ in range(cfg.max_iterations):
        try:
            candidate = kabsch_align(model_points[valid],
                                     scene.positions[idx[valid]])
        except AlignmentError:
            break
        new_valid, new_idx, new_rms = survey(candidate)
        if new_valid.sum() < 3:
            return (estimate, []) if return_history else estimate
        if new_rms > rms:
            break  # reject a worsening update and stop
        improvement = rms - new_rms
        pose, valid, idx, rms = candidate, new_valid, new_idx, new_rms
        history.append(rms)
        if improvement < cfg.convergence_eps:
            break

    refined = replace(estimate, pose=pose, refined=True)
    return (refined, history) if return_history else refined


def subsample_model_points(mesh, limit: int = 2048) -> np.ndarray:
    """Mesh vertices for ICP, reduced by farthest point sampling when large."""
    verts = mesh.vertices
    if len(verts) <= limit:
        return verts
    return verts[farthest_point_sampling(verts, limit)]


def decode(pred, keypoint_positions, model_cp: ControlPoints, model_points,
           scene: PointCloud, cfg: DecodeConfig,
           index: SpatialIndex | None = None) -> list:
    """Full pose recovery for one scene, sorted by score descending.

    Filter, rebuild hypotheses, vote, suppress; each surviving seed then
    collects the voted hypotheses (same class, within the suppression
    radius, nearest seed wins) and its cluster is solved and ICP-refined.
    """
    hyps = reconstruct_hypotheses(pred, keypoint_positions, cfg)
    if not hyps:
        return []
    voted = voxel_vote(hyps, cfg.voxel_edge)
    seeds = nms(voted, cfg.nms_center_dist)
    if not seeds:
        return []

    clusters = [[] for _ in seeds]
    for h in voted:
        best, best_d = -1, np.inf
        for si, s in enumerate(seeds):
            if s.class_id != h.class_id:
                continue
            d = float(np.linalg.norm(s.centroid - h.centroid))
            if d <= cfg.nms_center_dist and d < best_d:
                best, best_d = si, d
        if best >= 0:
            clusters[best].append(h)

    if index is None and len(scene):
        index = SpatialIndex(scene.positions)
    estimates = []
    for cluster in clusters:
        if not cluster:
            continue
        est = solve_pose(cluster, model_cp)
        if index is not None:
            est = icp_refine(est, model_points, scene, cfg.icp, index=index)
        estimates.append(est)
    estimates.sort(key=lambda e: -e.score)
    return estimates
