"""Pose-accuracy metrics and dataset-level scoring.

ADD is the mean distance between model vertices under the estimated and
the true pose; ADD-S replaces the per-vertex pairing with the nearest
true-posed vertex, for objects whose symmetry makes the pairing ambiguous.
A pose counts as correct when the metric is strictly below a fraction of
the model diameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import SpatialIndex, farthest_point_sampling
from .errors import DataError, InvalidInputError
from .geometry import RigidTransform


@dataclass
class EvalConfig:
    threshold_fraction: float = 0.10
    adds_vertex_limit: int = 4096

    def __post_init__(self):
        if self.threshold_fraction <= 0:
            raise InvalidInputError("threshold fraction must be positive")


@dataclass
class ModelInfo:
    """What the scorer needs to know about one object class."""

    vertices: np.ndarray
    diameter: float
    symmetric: bool = False


@dataclass
class ClassScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class Scoreboard:
    per_class: dict = field(default_factory=dict)  # class_id -> ClassScore

    def overall(self) -> ClassScore:
        total = ClassScore()
        for s in self.per_class.values():
            total.tp += s.tp
            total.fp += s.fp
            total.fn += s.fn
        return total

    def mean_f1(self) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean([s.f1 for s in self.per_class.values()]))

    def mean_recall(self) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean([s.recall for s in self.per_class.values()]))


def add_metric(model_vertices, gt_pose: RigidTransform, est_pose: RigidTransform) -> float:
    """Mean distance between corresponding vertices under the two poses."""
    verts = np.asarray(model_vertices, dtype=np.float64).reshape(-1, 3)
    if len(verts) == 0:
        raise InvalidInputError("ADD needs model vertices")
    return float(np.linalg.norm(est_pose.apply(verts) - gt_pose.apply(verts), axis=1).mean())


def adds_metric(model_vertices, gt_pose: RigidTransform, est_pose: RigidTransform) -> float:
    """Mean distance from each estimated-pose vertex to the nearest
    true-pose vertex (symmetric-object variant)."""
    verts = np.asarray(model_vertices, dtype=np.float64).reshape(-1, 3)
    if len(verts) == 0:
        raise InvalidInputError("ADD-S needs model vertices")
    gt = gt_pose.apply(verts)
    est = est_pose.apply(verts)
    dist, _ = SpatialIndex(gt).knn(est, 1)
    return float(dist[:, 0].mean())


def is_correct(metric_value: float, diameter: float, cfg: EvalConfig) -> bool:
    """Strictly below threshold_fraction of the model diameter."""
    if diameter <= 0:
        raise InvalidInputError("diameter must be positive")
    return metric_value < cfg.threshold_fraction * diameter


def pose_error(model: ModelInfo, gt_pose, est_pose, vertex_limit: int = 4096) -> float:
    verts = model.vertices
    if model.symmetric and len(verts) > 0:
        if len(verts) > vertex_limit:
            verts = verts[farthest_point_sampling(verts, vertex_limit)]
        return adds_metric(verts, gt_pose, est_pose)
    return add_metric(verts, gt_pose, est_pose)


@dataclass
class SceneResult:
    scene_id: int
    estimates: list   # of PoseEstimate (class_id, pose, score)
    instances: list   # of (class_id, gt_pose) or InstanceRecord


def _instance_fields(inst):
    if isinstance(inst, tuple):
        return int(inst[0]), inst[1]
    return int(inst.class_id), inst.pose


def score_dataset(scene_results, models: dict, cfg: EvalConfig) -> Scoreboard:
    """Greedy matching per scene.

    Estimates are taken in descending score order; each matches the
    unmatched same-class instance with the smallest pose error, counting a
    true positive only when that error passes the diameter threshold.
    Everything unmatched becomes a false positive (estimates) or a false
    negative (instances).
    """
    seen = set()
    board = Scoreboard()

    def score_for(class_id) -> ClassScore:
        return board.per_class.setdefault(class_id, ClassScore())

    for result in scene_results:
        if result.scene_id in seen:
            raise DataError(f"duplicate scene id {result.scene_id}")
        seen.add(result.scene_id)

        instances = [_instance_fields(i) for i in result.instances]
        matched = [False] * len(instances)
        for est in sorted(result.estimates, key=lambda e: -e.score):
            model = models.get(est.class_id)
            if model is None:
                raise DataError(f"estimate references unknown class {est.class_id}")
            best, best_err = -1, np.inf
            for j, (cls, gt_pose) in enumerate(instances):
                if matched[j] or cls != est.class_id:
                    continue
                err = pose_error(model, gt_pose, est.pose, cfg.adds_vertex_limit)
                if err < best_err:
                    best, best_err = j, err
            if best >= 0 and is_correct(best_err, model.diameter, cfg):
                matched[best] = True
                score_for(est.class_id).tp += 1
            else:
                score_for(est.class_id).fp += 1
        for j, (cls, _pose) in enumerate(instances):
            if not matched[j]:
                score_for(cls).fn += 1
    return board


def threshold_sweep(scene_results, models: dict, fractions) -> list:
    """Recall at each threshold fraction, as (fraction, recall) pairs."""
    out = []
    for frac in fractions:
        board = score_dataset(scene_results, models, EvalConfig(threshold_fraction=frac))
        total = board.overall()
        out.append((float(frac), total.recall))
    return out
