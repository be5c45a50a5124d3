import numpy as np
import pytest

from pointpose.cloud import PointCloud, SpatialIndex, farthest_point_sampling
from pointpose.config import SceneConfig
from pointpose.decode import (BoxHypothesis, DecodeConfig, IcpConfig,
                              PoseEstimate, decode, icp_refine, nms,
                              reconstruct_hypotheses, solve_pose,
                              subsample_model_points, voxel_vote)
from pointpose.errors import PoseSolveError
from pointpose.geometry import RigidTransform, fit_control_points, kabsch_align
from pointpose.metrics import add_metric
from pointpose.network import Prediction, oracle_predictor
from pointpose.scenegen import (CameraModel, LabeledScene, Placement,
                                SceneSpec, look_at, make_box_mesh,
                                render_depth, sample_layout)

from conftest import random_transform

TEST_MESH = make_box_mesh(0.12, 0.10, 0.08, segments=4)


def render_scene(seed, noise=0.0, two_objects=False):
    """Small but dense view of one or two boxes on a table."""
    camera = CameraModel(fx=200.0, fy=200.0, cx=127.5, cy=95.5,
                         width=256, height=192, depth_noise_sigma=noise,
                         z_near=0.1, z_far=5.0)
    cfg = SceneConfig()
    cfg.clutter_count = 2
    if two_objects:
        rng = np.random.default_rng([seed, 7])
        placements = []
        for x, y in ((-0.28, -0.28), (0.28, 0.28)):
            yaw = np.deg2rad(30.0 * rng.integers(0, 12))
            c, s = np.cos(yaw), np.sin(yaw)
            rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
            placements.append(Placement("box", 1, RigidTransform(rot, [x, y, 0.0])))
        spec = SceneSpec(placements, [], cfg.plane_extent,
                         RigidTransform.identity(), seed)
    else:
        spec = sample_layout([("box", 1, TEST_MESH)], 1, cfg, seed)
    rng = np.random.default_rng([seed, 1])
    eye = np.array([0.75 * np.cos(rng.uniform(0, 2 * np.pi)),
                    0.75 * np.sin(rng.uniform(0, 2 * np.pi)), 0.95])
    spec.camera_pose = look_at(eye, [0.0, 0.0, 0.0])
    return render_depth(spec, camera, {"box": TEST_MESH})


def oracle_setup(scene, k=512, noise_sigma=0.0, seed=0):
    kp = farthest_point_sampling(scene.cloud.positions, min(k, len(scene.cloud)))
    pred = oracle_predictor(scene, kp, noise_sigma=noise_sigma, seed=seed)
    return kp, pred


def make_hyp(centroid, class_id=1, conf=0.9, source=0, spread=0.05):
    cp = np.vstack([np.asarray(centroid) + np.random.default_rng(source).normal(scale=spread, size=(8, 3)),
                    np.asarray(centroid, dtype=float)])
    return BoxHypothesis(cp, class_id, conf, source)


class TestReconstruct:
    def test_all_low_confidence_empty(self, rng):
        k = 5
        probs = np.tile([0.1, 0.9], (k, 1))
        pred = Prediction(probs, rng.normal(size=(k, 9, 3)), np.full(k, 0.5))
        got = reconstruct_hypotheses(pred, rng.normal(size=(k, 3)),
                                     DecodeConfig(tau=0.8))
        assert got == []

    def test_zero_noise_oracle_identical_boxes(self):
        scene = render_scene(0)
        kp, pred = oracle_setup(scene)
        cfg = DecodeConfig.for_model(TEST_MESH.diameter)
        hyps = reconstruct_hypotheses(pred, scene.cloud.positions[kp], cfg)
        assert len(hyps) > 3
        stack = np.stack([h.control_points_world for h in hyps])
        assert np.abs(stack - stack[0]).max() < 1e-12
        assert np.abs(stack[0] - scene.instances[0].control_points).max() < 1e-12

    def test_filter_exactly_matches_hand_enumeration(self, rng):
        probs = np.array([[0.9, 0.1], [0.1, 0.9], [0.2, 0.8], [0.4, 0.6]])
        conf = np.array([0.95, 0.85, 0.5, 0.9])
        pred = Prediction(probs, rng.normal(size=(4, 9, 3)), conf)
        got = reconstruct_hypotheses(pred, rng.normal(size=(4, 3)),
                                     DecodeConfig(tau=0.8))
        # keypoint 0 is background, 2 has low confidence: keep 1 and 3
        assert [h.source_keypoint for h in got] == [1, 3]

    def test_tau_monotonicity(self, rng):
        k = 50
        probs = np.column_stack([rng.uniform(size=k), np.ones(k)])
        probs /= probs.sum(axis=1, keepdims=True)
        pred = Prediction(probs, rng.normal(size=(k, 9, 3)), rng.uniform(size=k))
        pts = rng.normal(size=(k, 3))
        counts = [len(reconstruct_hypotheses(pred, pts, DecodeConfig(tau=t)))
                  for t in np.linspace(0.0, 1.0, 11)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))


class TestVoxelVote:
    def test_single_hypothesis_retained(self):
        h = make_hyp([0.1, 0.1, 0.1])
        assert voxel_vote([h], 0.1) == [h]

    def test_majority_class_wins(self):
        a1 = make_hyp([0.11, 0.11, 0.11], class_id=1, source=1)
        a2 = make_hyp([0.12, 0.12, 0.12], class_id=1, source=2)
        b = make_hyp([0.13, 0.13, 0.13], class_id=2, source=3)
        kept = voxel_vote([a1, a2, b], voxel_edge=1.0)
        assert kept == [a1, a2]

    def test_empty_input(self):
        assert voxel_vote([], 0.1) == []

    def test_bins_are_separate(self):
        a = make_hyp([0.05, 0.05, 0.05], class_id=1, source=1)
        b = make_hyp([5.0, 5.0, 5.0], class_id=2, source=2)
        kept = voxel_vote([a, b], voxel_edge=0.2)
        assert kept == [a, b]

    def test_tie_broken_by_summed_confidence(self):
        a = make_hyp([0.1, 0.1, 0.1], class_id=1, conf=0.81, source=1)
        b = make_hyp([0.1, 0.1, 0.1], class_id=2, conf=0.99, source=2)
        kept = voxel_vote([a, b], voxel_edge=1.0)
        assert kept == [b]


class TestNms:
    def test_coincident_keeps_best(self):
        a = make_hyp([0, 0, 0.0], conf=0.9, source=1)
        b = make_hyp([0, 0, 0.0], conf=0.85, source=2)
        kept = nms([a, b], center_dist=0.05)
        assert kept == [a]

    def test_distant_boxes_both_kept(self):
        a = make_hyp([0, 0, 0.0], conf=0.9, source=1)
        b = make_hyp([1.0, 0, 0], conf=0.85, source=2)
        assert len(nms([a, b], center_dist=0.05)) == 2

    def test_jittered_cluster_plus_far_box(self, rng):
        hyps = [make_hyp(rng.normal(scale=0.002, size=3), conf=0.8 + 0.01 * i,
                         source=i) for i in range(10)]
        hyps.append(make_hyp([2.0, 0, 0], conf=0.99, source=99))
        kept = nms(hyps, center_dist=0.05)
        assert len(kept) == 2

    def test_different_classes_do_not_suppress(self):
        a = make_hyp([0, 0, 0.0], class_id=1, conf=0.9, source=1)
        b = make_hyp([0, 0, 0.0], class_id=2, conf=0.8, source=2)
        assert len(nms([a, b], center_dist=0.05)) == 2


class TestSolvePose:
    def test_zero_noise_cluster_recovers_pose(self):
        scene = render_scene(1)
        kp, pred = oracle_setup(scene)
        cfg = DecodeConfig.for_model(TEST_MESH.diameter)
        hyps = reconstruct_hypotheses(pred, scene.cloud.positions[kp], cfg)
        est = solve_pose(hyps, fit_control_points(TEST_MESH))
        gt = scene.instances[0].pose
        assert np.linalg.norm(est.pose.rotation - gt.rotation) < 1e-9
        assert np.linalg.norm(est.pose.translation - gt.translation) < 1e-9

    def test_single_hypothesis_equals_direct_kabsch(self, rng):
        model_cp = fit_control_points(TEST_MESH)
        truth = random_transform(rng)
        cp_world = truth.apply(model_cp.as_array())
        h = BoxHypothesis(cp_world, 1, 0.9, 0)
        est = solve_pose([h], model_cp)
        direct = kabsch_align(model_cp.as_array(), cp_world)
        assert np.allclose(est.pose.rotation, direct.rotation, atol=1e-15)
        assert np.allclose(est.pose.translation, direct.translation, atol=1e-15)

    def test_antisymmetric_jitter_cancels(self, rng):
        model_cp = fit_control_points(TEST_MESH)
        truth = random_transform(rng)
        cp_world = truth.apply(model_cp.as_array())
        delta = rng.normal(scale=0.01, size=(9, 3))
        plus = BoxHypothesis(cp_world + delta, 1, 0.8, 0)
        minus = BoxHypothesis(cp_world - delta, 1, 0.8, 1)
        clean = solve_pose([BoxHypothesis(cp_world, 1, 0.8, 2)], model_cp)
        noisy = solve_pose([plus, minus], model_cp)
        assert np.linalg.norm(noisy.pose.rotation - clean.pose.rotation) < 1e-9
        assert np.linalg.norm(noisy.pose.translation - clean.pose.translation) < 1e-9

    def test_score_is_mean_confidence(self):
        model_cp = fit_control_points(TEST_MESH)
        cp_world = model_cp.as_array()
        hyps = [BoxHypothesis(cp_world, 1, c, i) for i, c in enumerate((0.8, 0.9))]
        assert solve_pose(hyps, model_cp).score == pytest.approx(0.85)

    def test_degenerate_cluster_rejected(self):
        from pointpose.geometry import ControlPoints

        line = np.outer(np.arange(8, dtype=float), [1.0, 0, 0])
        cp = ControlPoints(line, np.array([3.5, 0, 0]))
        h = BoxHypothesis(cp.as_array(), 1, 0.9, 0)
        with pytest.raises(PoseSolveError):
            solve_pose([h], cp)


class TestIcpRefine:
    def _surface_model_points(self, scene, n=400):
        """Model points that coincide with scene samples under the true pose."""
        gt = scene.instances[0].pose
        fg = np.nonzero(scene.cloud.class_ids == 1)[0]
        spread = fg[farthest_point_sampling(scene.cloud.positions[fg],
                                            min(n, len(fg)))]
        return gt.inverse().apply(scene.cloud.positions[spread])

    def test_already_aligned_converges_immediately(self):
        scene = render_scene(2)
        gt = scene.instances[0].pose
        model_pts = self._surface_model_points(scene)
        est, history = icp_refine(PoseEstimate(1, gt, 1.0), model_pts,
                                  scene.cloud, IcpConfig(), return_history=True)
        assert est.refined
        assert len(history) <= 2  # one solve, zero improvement, stop
        assert np.linalg.norm(est.pose.matrix() - gt.matrix()) < 1e-9

    def test_recovers_exact_coincidence(self):
        scene = render_scene(3)
        gt = scene.instances[0].pose
        model_pts = self._surface_model_points(scene)
        perturbed = RigidTransform(gt.rotation, gt.translation + [0.005, 0, 0])
        est, history = icp_refine(PoseEstimate(1, perturbed, 1.0), model_pts,
                                  scene.cloud, IcpConfig(max_iterations=100),
                                  return_history=True)
        assert est.refined
        assert history[-1] < 1e-6
        assert np.linalg.norm(est.pose.matrix() - gt.matrix()) < 1e-4

    def test_rms_non_increasing(self, rng):
        scene = render_scene(4)
        gt = scene.instances[0].pose
        perturbed = RigidTransform(gt.rotation, gt.translation + [0.004, 0.003, 0])
        model_pts = subsample_model_points(TEST_MESH, 512)
        _, history = icp_refine(PoseEstimate(1, perturbed, 1.0), model_pts,
                                scene.cloud, IcpConfig(), return_history=True)
        assert len(history) >= 1
        assert all(a >= b for a, b in zip(history, history[1:]))

    def test_absent_object_leaves_estimate_unrefined(self):
        scene = render_scene(5)
        far = RigidTransform(np.eye(3), [50.0, 50.0, 50.0])
        model_pts = subsample_model_points(TEST_MESH, 128)
        est = icp_refine(PoseEstimate(1, far, 0.9), model_pts, scene.cloud,
                         IcpConfig())
        assert not est.refined
        assert np.array_equal(est.pose.matrix(), far.matrix())


class TestDecode:
    def _decode(self, scene, pred, kp):
        cfg = DecodeConfig.for_model(TEST_MESH.diameter)
        return decode(pred, scene.cloud.positions[kp],
                      fit_control_points(TEST_MESH),
                      subsample_model_points(TEST_MESH, 512), scene.cloud, cfg)

    def test_zero_noise_exact_on_coincident_cloud(self, rng):
        # cloud built from the posed model vertices: the whole pipeline,
        # ICP included, must reproduce the pose essentially exactly
        from pointpose.scenegen import InstanceRecord
        from pointpose.geometry import fit_control_points

        gt = random_transform(rng, translation_scale=0.3)
        fg = gt.apply(TEST_MESH.vertices)
        bg = rng.normal(size=(300, 3)) + [0.0, 0.0, 5.0]
        positions = np.vstack([fg, bg])
        labels = np.concatenate([np.ones(len(fg), int), np.zeros(300, int)])
        cloud = PointCloud(positions, class_ids=labels, instance_ids=labels)
        cp = fit_control_points(TEST_MESH)
        scene = LabeledScene(cloud, [InstanceRecord(1, 1, "box", gt,
                                                    gt.apply(cp.as_array()))], None)
        kp, pred = oracle_setup(scene)
        estimates = self._decode(scene, pred, kp)
        assert len(estimates) == 1
        err = add_metric(TEST_MESH.vertices, gt, estimates[0].pose)
        assert err < 1e-6 * TEST_MESH.diameter

    def test_zero_noise_single_object_rendered(self):
        scene = render_scene(6)
        kp, pred = oracle_setup(scene)
        estimates = self._decode(scene, pred, kp)
        assert len(estimates) == 1
        # ICP may trade exactness for its own raster-sampled optimum
        err = add_metric(TEST_MESH.vertices, scene.instances[0].pose,
                         estimates[0].pose)
        assert err < 0.05 * TEST_MESH.diameter

    def test_empty_prediction(self):
        scene = render_scene(7)
        pred = Prediction(np.zeros((0, 2)), np.zeros((0, 9, 3)), np.zeros(0))
        cfg = DecodeConfig.for_model(TEST_MESH.diameter)
        assert decode(pred, np.zeros((0, 3)), fit_control_points(TEST_MESH),
                      TEST_MESH.vertices, scene.cloud, cfg) == []

    def test_two_instances_with_noise(self):
        hits = 0
        for seed in range(5):
            scene = render_scene(10 + seed, two_objects=True)
            kp, pred = oracle_setup(scene, noise_sigma=0.002, seed=seed)
            estimates = self._decode(scene, pred, kp)
            assert len(estimates) <= 2
            if len(estimates) == 2:
                hits += 1
                for est in estimates:
                    err = min(add_metric(TEST_MESH.vertices, inst.pose, est.pose)
                              for inst in scene.instances)
                    assert err < 0.1 * TEST_MESH.diameter
        assert hits >= 4

    def test_sorted_by_score(self):
        scene = render_scene(16, two_objects=True)
        kp, pred = oracle_setup(scene, noise_sigma=0.002, seed=1)
        estimates = self._decode(scene, pred, kp)
        scores = [e.score for e in estimates]
        assert scores == sorted(scores, reverse=True)

    def test_rigid_invariance(self, rng):
        scene = render_scene(8)
        kp, pred = oracle_setup(scene)
        base = self._decode(scene, pred, kp)

        g = random_transform(rng)
        moved_cloud = PointCloud(g.apply(scene.cloud.positions),
                                 scene.cloud.colors,
                                 scene.cloud.normals @ g.rotation.T,
                                 scene.cloud.class_ids, scene.cloud.instance_ids)
        moved_instances = [
            type(inst)(inst.instance_id, inst.class_id, inst.model_id,
                       g.compose(inst.pose), g.apply(inst.control_points))
            for inst in scene.instances
        ]
        moved_scene = LabeledScene(moved_cloud, moved_instances, scene.camera)
        moved_pred = Prediction(pred.class_probs,
                                pred.offsets @ g.rotation.T, pred.confidence)
        moved = self._decode(moved_scene, moved_pred, kp)

        assert len(moved) == len(base) == 1
        expect = g.compose(base[0].pose)
        assert np.linalg.norm(moved[0].pose.rotation - expect.rotation) < 1e-6
        assert np.linalg.norm(moved[0].pose.translation - expect.translation) < 1e-6

    def test_output_bounded_by_occupied_voxels(self):
        scene = render_scene(9, two_objects=True)
        kp, pred = oracle_setup(scene, noise_sigma=0.002, seed=2)
        cfg = DecodeConfig.for_model(TEST_MESH.diameter)
        hyps = reconstruct_hypotheses(pred, scene.cloud.positions[kp], cfg)
        voxels = {tuple(np.floor(h.centroid / cfg.voxel_edge).astype(int))
                  for h in hyps}
        estimates = self._decode(scene, pred, kp)
        assert len(estimates) <= len(voxels)
