import numpy as np
import pytest

from pointpose.decode import PoseEstimate
from pointpose.errors import DataError
from pointpose.geometry import RigidTransform
from pointpose.metrics import (EvalConfig, ModelInfo, SceneResult, add_metric,
                               adds_metric, is_correct, score_dataset,
                               threshold_sweep)

from conftest import random_transform


def brute_force_add(verts, gt, est):
    total = 0.0
    for v in verts:
        total += np.linalg.norm(est.apply(v) - gt.apply(v))
    return total / len(verts)


def brute_force_adds(verts, gt, est):
    gt_pts = [gt.apply(v) for v in verts]
    total = 0.0
    for v in verts:
        p = est.apply(v)
        total += min(np.linalg.norm(p - q) for q in gt_pts)
    return total / len(verts)


class TestAdd:
    def test_identical_poses(self, rng):
        verts = rng.normal(size=(30, 3))
        t = random_transform(rng)
        assert add_metric(verts, t, t) == 0.0

    def test_pure_translation_offset(self, rng):
        verts = rng.normal(size=(25, 3))
        gt = random_transform(rng)
        est = RigidTransform(gt.rotation, gt.translation + [0.01, 0.0, 0.0])
        assert add_metric(verts, gt, est) == pytest.approx(0.01, abs=1e-15)

    def test_matches_brute_force(self, rng):
        verts = rng.normal(size=(200, 3))
        for _ in range(20):
            gt, est = random_transform(rng), random_transform(rng)
            assert add_metric(verts, gt, est) == pytest.approx(
                brute_force_add(verts, gt, est), abs=1e-12)

    def test_invariant_under_common_left_composition(self, rng):
        verts = rng.normal(size=(40, 3))
        gt, est, g = (random_transform(rng) for _ in range(3))
        a = add_metric(verts, gt, est)
        b = add_metric(verts, g.compose(gt), g.compose(est))
        assert a == pytest.approx(b, abs=1e-12)


class TestAddS:
    def test_identical_poses(self, rng):
        verts = rng.normal(size=(30, 3))
        t = random_transform(rng)
        assert adds_metric(verts, t, t) == 0.0

    def test_rotated_square(self):
        square = np.array([[1.0, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]])
        gt = RigidTransform.identity()
        quarter_turn = RigidTransform(
            np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1.0]]), np.zeros(3))
        assert adds_metric(square, gt, quarter_turn) == pytest.approx(0.0, abs=1e-12)
        assert add_metric(square, gt, quarter_turn) == pytest.approx(2.0, abs=1e-12)

    def test_matches_brute_force(self, rng):
        verts = rng.normal(size=(60, 3))
        for _ in range(20):
            gt, est = random_transform(rng), random_transform(rng)
            assert adds_metric(verts, gt, est) == pytest.approx(
                brute_force_adds(verts, gt, est), abs=1e-12)

    def test_never_exceeds_add(self, rng):
        verts = rng.normal(size=(50, 3))
        for _ in range(100):
            gt, est = random_transform(rng), random_transform(rng)
            assert adds_metric(verts, gt, est) <= add_metric(verts, gt, est) + 1e-12


class TestIsCorrect:
    def test_zero_is_correct(self):
        assert is_correct(0.0, 1.0, EvalConfig(0.1))

    def test_exact_threshold_is_incorrect(self):
        # strictly-less-than contract, on exactly representable values
        assert not is_correct(0.25, 0.5, EvalConfig(0.5))

    def test_just_below_threshold(self):
        assert is_correct(0.019, 0.2, EvalConfig(0.10))

    def test_monotone_in_fraction(self):
        fractions = np.linspace(0.01, 0.5, 20)
        flags = [is_correct(0.05, 1.0, EvalConfig(f)) for f in fractions]
        assert flags == sorted(flags)


def make_models(rng):
    verts = rng.normal(size=(50, 3)) * 0.05
    from pointpose.geometry import model_diameter

    return {1: ModelInfo(verts, model_diameter(verts), False)}


def estimate(pose, score=0.9, class_id=1):
    return PoseEstimate(class_id, pose, score)


class TestScoreDataset:
    def test_perfect_estimates(self, rng):
        models = make_models(rng)
        results = []
        for sid in range(4):
            gt = random_transform(rng)
            results.append(SceneResult(sid, [estimate(gt)], [(1, gt)]))
        board = score_dataset(results, models, EvalConfig(0.10))
        s = board.per_class[1]
        assert (s.tp, s.fp, s.fn) == (4, 0, 0)
        assert s.recall == s.precision == s.f1 == 1.0

    def test_no_estimates(self, rng):
        models = make_models(rng)
        results = [SceneResult(0, [], [(1, random_transform(rng)), (1, random_transform(rng))])]
        board = score_dataset(results, models, EvalConfig(0.10))
        s = board.per_class[1]
        assert (s.tp, s.fp, s.fn) == (0, 0, 2)
        assert s.recall == 0.0

    def test_hand_computed_three_scenes(self, rng):
        models = make_models(rng)
        diameter = models[1].diameter
        g0, g1a, g1b, g2 = (random_transform(rng) for _ in range(4))
        off = RigidTransform(np.eye(3), [diameter, 0.0, 0.0])  # far off: FP
        results = [
            SceneResult(0, [estimate(g0)], [(1, g0)]),                 # TP
            SceneResult(1, [estimate(g1a)], [(1, g1a), (1, g1b)]),     # TP + FN
            SceneResult(2, [estimate(off.compose(g2))], [(1, g2)]),    # FP + FN
        ]
        board = score_dataset(results, models, EvalConfig(0.10))
        s = board.per_class[1]
        assert (s.tp, s.fp, s.fn) == (2, 1, 2)
        assert s.precision == pytest.approx(2 / 3)
        assert s.recall == pytest.approx(2 / 4)
        p, r = 2 / 3, 2 / 4
        assert s.f1 == pytest.approx(2 * p * r / (p + r))

    def test_count_identities(self, rng):
        models = make_models(rng)
        results = []
        n_est = n_inst = 0
        for sid in range(6):
            gts = [(1, random_transform(rng)) for _ in range(int(rng.integers(0, 3)))]
            ests = [estimate(random_transform(rng), score=float(rng.uniform()))
                    for _ in range(int(rng.integers(0, 3)))]
            n_est += len(ests)
            n_inst += len(gts)
            results.append(SceneResult(sid, ests, gts))
        board = score_dataset(results, models, EvalConfig(0.10))
        total = board.overall()
        assert total.tp + total.fn == n_inst
        assert total.tp + total.fp == n_est

    def test_duplicate_scene_ids_rejected(self, rng):
        models = make_models(rng)
        gt = random_transform(rng)
        results = [SceneResult(0, [], [(1, gt)]), SceneResult(0, [], [(1, gt)])]
        with pytest.raises(DataError):
            score_dataset(results, models, EvalConfig(0.10))

    def test_symmetric_class_uses_adds(self, rng):
        square = np.array([[1.0, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]]) * 0.05
        from pointpose.geometry import model_diameter

        quarter_turn = RigidTransform(
            np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1.0]]), np.zeros(3))
        gt = RigidTransform.identity()
        results = [SceneResult(0, [estimate(quarter_turn)], [(1, gt)])]
        diam = model_diameter(square)
        sym = {1: ModelInfo(square, diam, True)}
        asym = {1: ModelInfo(square, diam, False)}
        assert score_dataset(results, sym, EvalConfig(0.10)).per_class[1].tp == 1
        assert score_dataset(results, asym, EvalConfig(0.10)).per_class[1].tp == 0


class TestThresholdSweep:
    def test_recall_non_decreasing(self, rng):
        models = make_models(rng)
        results = []
        for sid in range(8):
            gt = random_transform(rng)
            jitter = RigidTransform(np.eye(3), rng.normal(scale=0.002, size=3))
            results.append(SceneResult(sid, [estimate(jitter.compose(gt))], [(1, gt)]))
        pairs = threshold_sweep(results, models, [0.05, 0.1, 0.15, 0.3, 0.5])
        recalls = [r for _, r in pairs]
        assert recalls == sorted(recalls)
