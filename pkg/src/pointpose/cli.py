"""Command-line front end.

Subcommands: generate, train, infer, eval, export-viz. Global flags
--config, --seed, --jobs, --verbose. Exit codes: 0 success, 1 usage,
2 data error, 3 numerical failure. Every successful run prints a JSON run
report (command, config digest, stage timings, counts, result paths) to
stdout; all file outputs are deterministic for a fixed --seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import io_formats, metrics, network, report, scenegen
from .cloud import SpatialIndex, farthest_point_sampling, group_neighbors
from .config import RunConfig, config_digest, load_config
from .decode import (DecodeConfig, IcpConfig, decode as run_decode,
                     subsample_model_points)
from .errors import (ConfigError, DataError, InvalidInputError, LayoutError,
                     NumericalError, PointPoseError)

log = logging.getLogger("pointpose")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


class _Timer:
    def __init__(self):
        self.timings = {}

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                dt = (time.perf_counter() - self.t0) * 1000.0
                timer.timings[name] = timer.timings.get(name, 0.0) + dt

        return _Ctx()


def _camera_from_config(cfg: RunConfig) -> scenegen.CameraModel:
    c = cfg.camera
    return scenegen.CameraModel(c.fx, c.fy, c.cx, c.cy, c.width, c.height,
                                c.depth_noise_sigma, c.z_near, c.z_far)


def _decode_config(cfg: RunConfig, diameter: float) -> DecodeConfig:
    d = cfg.decode
    icp = IcpConfig(d.icp.max_iterations, d.icp.convergence_eps,
                               d.icp.max_correspondence_dist)
    return DecodeConfig.for_model(
        diameter, tau=d.tau, voxel_edge=d.voxel_edge,
        nms_center_dist=d.nms_center_dist, icp=icp)


def _load_models(manifest):
    """class_id -> (mesh, ModelInfo, ClassEntry)."""
    out = {}
    for entry in manifest.classes:
        mesh = io_formats.read_mesh(manifest.resolve(entry.mesh_path))
        info = metrics.ModelInfo(mesh.vertices, entry.diameter, entry.symmetric)
        out[entry.class_id] = (mesh, info, entry)
    return out


def _keypoints_for_scene(scene, cfg: RunConfig):
    n = len(scene.cloud)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    k = min(cfg.sampling.keypoints, n)
    return farthest_point_sampling(scene.cloud.positions, k, cfg.sampling.seed_rule)


def _predict_scene(scene, kp, args, cfg, params, scene_index=0):
    """Oracle or network prediction for one scene's keypoints."""
    if args.oracle:
        seed = int(np.random.SeedSequence([args.seed, scene_index]).generate_state(1)[0])
        return network.oracle_predictor(
            scene, kp, noise_sigma=args.noise, seed=seed,
            conf_params=network.ConfidenceParams(cfg.confidence.alpha,
                                                 cfg.confidence.cutoff))
    sample = group_neighbors(scene.cloud, kp, cfg.sampling.group_size,
                             cfg.sampling.group_radius)
    return network.forward(params, sample)


def cmd_generate(args, cfg: RunConfig) -> report.RunReport:
    mesh_paths = []
    for chunk in args.objects:
        mesh_paths.extend(p for p in chunk.split(",") if p)
    if not mesh_paths:
        raise DataError("generate needs at least one --objects mesh path")
    # read every mesh before touching the output directory: a missing file
    # must not leave a partial dataset behind
    catalog = []
    for class_id, path in enumerate(mesh_paths, start=1):
        mesh = io_formats.read_mesh(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        symmetric = class_id in cfg.eval.symmetric_classes
        catalog.append((stem, class_id, mesh, path, stem, symmetric))

    timer = _Timer()
    scene_cfg = cfg.scene
    if args.objects_per_scene is not None:
        scene_cfg.objects_per_scene = args.objects_per_scene
    with timer.stage("generate"):
        manifest = scenegen.generate_dataset(
            catalog, args.scenes, _camera_from_config(cfg), scene_cfg,
            args.seed, args.out, jobs=args.jobs)
    return report.RunReport(
        "generate", config_digest(cfg), timer.timings,
        {"scenes": len(manifest.scenes), "classes": len(manifest.classes)},
        [os.path.join(args.out, io_formats.MANIFEST_NAME)])


def _prepare_training_samples(manifest, cfg: RunConfig):
    samples = []
    for entry in manifest.scenes:
        scene = scenegen.load_scene(manifest, entry.index)
        kp = _keypoints_for_scene(scene, cfg)
        if len(kp) == 0:
            continue
        sample = group_neighbors(scene.cloud, kp, cfg.sampling.group_size,
                                 cfg.sampling.group_radius)
        targets = network.build_targets(scene, kp)
        samples.append((sample, targets))
    if not samples:
        raise DataError("dataset contains no usable scenes")
    return samples


def cmd_train(args, cfg: RunConfig) -> report.RunReport:
    manifest = io_formats.load_manifest(args.dataset)
    timer = _Timer()
    with timer.stage("sampling_grouping"):
        samples = _prepare_training_samples(manifest, cfg)

    t = cfg.train
    epochs = args.epochs if args.epochs is not None else t.epochs
    phase1 = args.phase1_epochs if args.phase1_epochs is not None else t.phase1_epochs
    weights = network.LossWeights(cfg.loss.seg_weight, cfg.loss.reg_weight,
                                  cfg.loss.conf_weight, cfg.loss.smooth_l1_beta)
    conf_params = network.ConfidenceParams(cfg.confidence.alpha, cfg.confidence.cutoff)
    sizes = (cfg.network.hidden_point, cfg.network.hidden_feature,
             cfg.network.hidden_head, cfg.network.num_classes)

    params = velocity = None
    start_epoch = 0
    prior_curve = []
    if args.resume:
        params, velocity, meta = network.load_checkpoint(args.resume)
        expect = [sizes[0], sizes[1], sizes[2], sizes[3]]
        have = [params.hidden_point, params.hidden_feature,
                params.hidden_head, params.num_classes]
        if have != expect:
            raise DataError(f"checkpoint shapes {have} do not match config {expect}")
        start_epoch = int(meta.get("epochs_done", 0))
        prior_curve = meta.get("curve", [])

    with timer.stage("train"):
        result = network.train(
            samples, epochs, learning_rate=t.learning_rate, momentum=t.momentum,
            batch_scenes=t.batch_scenes, seed=args.seed, phase1_epochs=phase1,
            weights=weights, conf_params=conf_params, params=params,
            velocity=velocity, start_epoch=start_epoch, network_sizes=sizes)

    curve = prior_curve + result.curve
    meta = {"epochs_done": max(epochs, start_epoch), "seed": args.seed,
            "num_classes": sizes[3], "curve": curve}
    network.save_checkpoint(args.out, result.params, result.velocity, meta)

    base = os.path.splitext(args.out)[0]
    csv_path, fig_path = base + "_loss.csv", base + "_loss.png"
    report.write_loss_curve(csv_path, curve, fig_path)
    return report.RunReport(
        "train", config_digest(cfg), timer.timings,
        {"scenes": len(samples), "epochs": len(curve)},
        [args.out, csv_path, fig_path])


def cmd_infer(args, cfg: RunConfig) -> report.RunReport:
    manifest = io_formats.load_manifest(args.dataset)
    models = _load_models(manifest)
    if not models:
        raise DataError("dataset manifest declares no classes")
    params = None
    if not args.oracle:
        if not args.checkpoint:
            raise DataError("infer needs --checkpoint or --oracle")
        params, _, _ = network.load_checkpoint(args.checkpoint)
        if params.num_classes != len(models) + 1:
            raise DataError(
                f"checkpoint predicts {params.num_classes} classes but the "
                f"dataset has {len(models)} foreground classes")

    indices = range(len(manifest.scenes)) if args.scene_index is None else [args.scene_index]
    timer = _Timer()
    records = []
    dumps = []
    n_keypoints = 0
    for idx in indices:
        scene = scenegen.load_scene(manifest, idx)
        with timer.stage("sampling_grouping"):
            kp = _keypoints_for_scene(scene, cfg)
        n_keypoints += len(kp)
        if len(kp) == 0:
            continue
        with timer.stage("prediction"):
            pred = _predict_scene(scene, kp, args, cfg, params, idx)
        with timer.stage("decoding"):
            # binary pipeline: decode against the scene's foreground class,
            # falling back to the first catalog class when nothing fired
            fg = pred.class_probs.argmax(axis=1)
            fg = fg[fg > 0]
            class_id = int(np.bincount(fg).argmax()) if len(fg) else min(models)
            mesh, _info, entry = models[class_id]
            dcfg = _decode_config(cfg, entry.diameter)
            model_cp = scenegen.fit_control_points(mesh)
            model_pts = subsample_model_points(mesh, cfg.decode.icp.model_points)
            estimates = run_decode(pred, scene.cloud.positions[kp],
                                          model_cp, model_pts, scene.cloud, dcfg)
        records.extend(report.PoseRecord.from_estimate(idx, e) for e in estimates)
        if args.dump_seg:
            os.makedirs(args.dump_seg, exist_ok=True)
            classes = pred.class_probs.argmax(axis=1)
            seg = report.segmentation_colored(scene.cloud.positions[kp], classes)
            seg_path = os.path.join(args.dump_seg, f"keypoints_{idx:06d}.ply")
            io_formats.write_cloud(seg_path, seg)
            dumps.append(seg_path)

    report_paths = [args.out] + dumps
    report.write_pose_records(args.out, records)
    return report.RunReport(
        "infer", config_digest(cfg), timer.timings,
        {"scenes": len(list(indices)), "keypoints": n_keypoints,
         "estimates": len(records)},
        report_paths)


def cmd_eval(args, cfg: RunConfig) -> report.RunReport:
    manifest = io_formats.load_manifest(args.dataset)
    models_full = _load_models(manifest)
    models = {cid: info for cid, (_m, info, _e) in models_full.items()}
    class_names = {cid: entry.name for cid, (_m, _i, entry) in models_full.items()}

    records = report.read_pose_records(args.poses)
    known = {entry.index for entry in manifest.scenes}
    for rec in records:
        if rec.scene_id not in known:
            raise DataError(f"pose record references unknown scene {rec.scene_id}")

    by_scene = {}
    for rec in records:
        by_scene.setdefault(rec.scene_id, []).append(rec.to_estimate())
    scene_results = []
    for entry in manifest.scenes:
        instances = scenegen.load_scene_labels(manifest.resolve(entry.labels_path))
        scene_results.append(metrics.SceneResult(
            entry.index, by_scene.get(entry.index, []),
            [(inst.class_id, inst.pose) for inst in instances]))

    timer = _Timer()
    os.makedirs(args.out, exist_ok=True)
    fraction = args.threshold if args.threshold is not None else cfg.eval.threshold_fraction
    with timer.stage("scoring"):
        board = metrics.score_dataset(scene_results, models,
                                      metrics.EvalConfig(threshold_fraction=fraction))
    txt = os.path.join(args.out, "scoreboard.txt")
    csv = os.path.join(args.out, "scoreboard.csv")
    fig = os.path.join(args.out, "scoreboard.png")
    table = report.write_scoreboard(board, txt, csv, fig, class_names)
    print(table)
    paths = [txt, csv, fig]

    if args.sweep:
        with timer.stage("sweep"):
            pairs = metrics.threshold_sweep(scene_results, models,
                                            cfg.eval.sweep_fractions)
        sweep_csv = os.path.join(args.out, "sweep.csv")
        sweep_fig = os.path.join(args.out, "sweep.png")
        report.write_sweep(pairs, sweep_csv, sweep_fig)
        paths += [sweep_csv, sweep_fig]

    total = board.overall()
    return report.RunReport(
        "eval", config_digest(cfg), timer.timings,
        {"scenes": len(scene_results), "tp": total.tp, "fp": total.fp,
         "fn": total.fn},
        paths)


def cmd_export_viz(args, cfg: RunConfig) -> report.RunReport:
    manifest = io_formats.load_manifest(args.dataset)
    models = _load_models(manifest)
    scene = scenegen.load_scene(manifest, args.scene_index)
    records = [r for r in report.read_pose_records(args.poses)
               if r.scene_id == args.scene_index]

    params = None
    if args.checkpoint:
        params, _, _ = network.load_checkpoint(args.checkpoint)
    kp = _keypoints_for_scene(scene, cfg)
    pred = _predict_scene(scene, kp, args, cfg, params, args.scene_index)
    positions = scene.cloud.positions[kp]

    os.makedirs(args.out, exist_ok=True)
    timer = _Timer()
    with timer.stage("export"):
        seg_path = os.path.join(args.out, f"seg_{args.scene_index:06d}.ply")
        conf_path = os.path.join(args.out, f"confidence_{args.scene_index:06d}.ply")
        boxes_path = os.path.join(args.out, f"boxes_{args.scene_index:06d}.ply")
        classes = pred.class_probs.argmax(axis=1)
        io_formats.write_cloud(seg_path, report.segmentation_colored(positions, classes))
        io_formats.write_cloud(conf_path,
                               report.confidence_colored(positions, pred.confidence))
        boxes = []
        for rec in records:
            mesh, _info, _entry = models[rec.class_id]
            corners = scenegen.fit_control_points(mesh).corners
            boxes.append(rec.to_estimate().pose.apply(corners))
        report.write_box_lineset(boxes_path, boxes)
    return report.RunReport(
        "export-viz", config_digest(cfg), timer.timings,
        {"keypoints": len(kp), "boxes": len(boxes)},
        [seg_path, conf_path, boxes_path])


def build_parser() -> _Parser:
    parser = _Parser(prog="pointpose",
                     description="Point-cloud 6-DOF pose estimation toolkit")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, default=0, help="master RNG seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel scene workers (generate)")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--objects", action="append", required=True,
                   help="object mesh path(s), repeatable or comma-separated")
    p.add_argument("--objects-per-scene", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the predictor on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--phase1-epochs", type=int, default=None,
                   help="segmentation-only warmup epochs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="estimate poses for dataset scenes")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene-index", type=int, default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true",
                   help="use ground-truth-derived predictions")
    p.add_argument("--noise", type=float, default=0.0,
                   help="oracle offset noise sigma, meters")
    p.add_argument("--out", required=True, help="pose records path (JSONL)")
    p.add_argument("--dump-seg", default=None,
                   help="directory for class-colored keypoint clouds")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score pose records against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help="correctness threshold as a diameter fraction")
    p.add_argument("--sweep", action="store_true",
                   help="also emit recall over the configured threshold grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-viz", help="write viewer-ready result clouds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene-index", type=int, required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--checkpoint", help="color keypoints from this network")
    p.add_argument("--oracle", action="store_true", default=None)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")

    if getattr(args, "command", None) == "export-viz" and args.oracle is None:
        args.oracle = not args.checkpoint

    try:
        cfg = load_config(args.config)
        run_report = args.func(args, cfg)
    except (ConfigError, DataError, LayoutError) as exc:
        log.error("%s", exc)
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except (NumericalError, InvalidInputError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERICAL
    except PointPoseError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    print(run_report.to_json())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
