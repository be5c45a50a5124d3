"""Synthetic labeled-scene generation.

Scenes are composed of meshes placed upright on a support plane with
30-degree-quantized yaw, plus gray clutter primitives, viewed by a pinhole
depth camera on an upper-hemisphere orbit. Rendering is a z-buffer
rasterization of all triangles; each covered pixel back-projects to one
point carrying color, the winning face normal and class/instance labels.

Emitted clouds live in the camera frame (sensor at the origin, z forward)
and every ground-truth pose is expressed in that same frame.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import io_formats
from .cloud import PointCloud
from .errors import DataError, InvalidInputError, LayoutError
from .geometry import Aabb, ControlPoints, RigidTransform, fit_control_points

YAW_STEP_DEG = 30.0

_CLASS_PALETTE = [
    (0.85, 0.25, 0.20), (0.20, 0.55, 0.85), (0.30, 0.75, 0.35),
    (0.90, 0.70, 0.20), (0.70, 0.35, 0.80), (0.20, 0.75, 0.70),
]
PLANE_COLOR = (0.72, 0.72, 0.72)


def color_for_class(class_id: int):
    if class_id <= 0:
        return PLANE_COLOR
    return _CLASS_PALETTE[(class_id - 1) % len(_CLASS_PALETTE)]


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_noise_sigma: float = 0.0
    z_near: float = 0.2
    z_far: float = 4.0

    def __post_init__(self):
        if min(self.fx, self.fy, self.width, self.height) <= 0:
            raise InvalidInputError("camera intrinsics must be positive")
        if not self.z_near < self.z_far:
            raise InvalidInputError("need z_near < z_far")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "depth_noise_sigma": self.depth_noise_sigma,
                "z_near": self.z_near, "z_far": self.z_far}

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraModel":
        return cls(**doc)


@dataclass
class Placement:
    model_id: str
    class_id: int
    pose: RigidTransform  # model frame -> world frame


@dataclass
class ClutterItem:
    mesh: "TriMesh"
    pose: RigidTransform
    color: tuple


@dataclass
class SceneSpec:
    placements: list            # of Placement
    clutter: list               # of ClutterItem
    plane_extent: float
    camera_pose: RigidTransform  # camera frame -> world frame
    seed: int


@dataclass
class InstanceRecord:
    instance_id: int
    class_id: int
    model_id: str
    pose: RigidTransform        # model frame -> cloud (camera) frame
    control_points: np.ndarray  # (9, 3), pose applied to the model box points


@dataclass
class LabeledScene:
    cloud: PointCloud
    instances: list             # of InstanceRecord
    camera: CameraModel


def make_box_mesh(sx: float, sy: float, sz: float, segments: int = 1):
    """Axis-aligned box centered on the origin in x/y, resting at z = 0.

    segments > 1 grids each face, giving surface-spread vertices (useful as
    ICP model points)."""
    from .geometry import TriMesh

    hx, hy = sx / 2.0, sy / 2.0
    if segments == 1:
        verts = np.array([
            [-hx, -hy, 0], [hx, -hy, 0], [hx, hy, 0], [-hx, hy, 0],
            [-hx, -hy, sz], [hx, -hy, sz], [hx, hy, sz], [-hx, hy, sz],
        ], dtype=np.float64)
        faces = np.array([
            [0, 2, 1], [0, 3, 2],          # bottom
            [4, 5, 6], [4, 6, 7],          # top
            [0, 1, 5], [0, 5, 4],          # -y
            [2, 3, 7], [2, 7, 6],          # +y
            [1, 2, 6], [1, 6, 5],          # +x
            [3, 0, 4], [3, 4, 7],          # -x
        ], dtype=np.int64)
        return TriMesh(verts, faces)

    verts = []
    faces = []

    def add_face(origin, du, dv):
        base = len(verts)
        for i in range(segments + 1):
            for j in range(segments + 1):
                verts.append(origin + du * (i / segments) + dv * (j / segments))
        for i in range(segments):
            for j in range(segments):
                a = base + i * (segments + 1) + j
                b, c, d = a + 1, a + segments + 1, a + segments + 2
                faces.append([a, b, d])
                faces.append([a, d, c])

    ex, ey, ez = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
    lo = np.array([-hx, -hy, 0.0])
    add_face(lo, ex, ey)               # bottom
    add_face(lo + ez, ex, ey)          # top
    add_face(lo, ex, ez)               # -y
    add_face(lo + ey, ex, ez)          # +y
    add_face(lo + ex, ey, ez)          # +x
    add_face(lo, ey, ez)               # -x
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))


def make_cylinder_mesh(radius: float, height: float, segments: int = 24,
                       rings: int = 1):
    """Cylinder along +z resting at z = 0. rings > 1 subdivides the side."""
    from .geometry import TriMesh

    ang = 2.0 * np.pi * np.arange(segments) / segments
    circle = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    levels = [np.column_stack([circle, np.full(segments, height * r / rings)])
              for r in range(rings + 1)]
    verts = np.vstack(levels + [[[0, 0, 0]], [[0, 0, height]]])
    cb, ct = (rings + 1) * segments, (rings + 1) * segments + 1

    faces = []
    for r in range(rings):
        lo, hi = r * segments, (r + 1) * segments
        for i in range(segments):
            j = (i + 1) % segments
            faces.append([lo + i, lo + j, hi + i])
            faces.append([lo + j, hi + j, hi + i])
    top = rings * segments
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([cb, j, i])
        faces.append([ct, top + i, top + j])
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def make_plane_mesh(extent: float):
    from .geometry import TriMesh

    h = extent / 2.0
    verts = np.array([[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return TriMesh(verts, faces)


def _yaw_transform(yaw: float, x: float, y: float, verts: np.ndarray) -> RigidTransform:
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    lift = -float((verts @ rot.T)[:, 2].min())  # rest the lowest vertex on z=0
    return RigidTransform(rot, np.array([x, y, lift]))


def sample_layout(catalog, count: int, cfg, seed) -> SceneSpec:
    """Draw a non-overlapping upright arrangement of count catalog objects
    plus clutter primitives.

    Positions are uniform over the workspace rectangle, yaw is uniform over
    the twelve 30-degree steps; candidate placements whose world-frame
    bounding boxes overlap anything already placed are rejected and redrawn
    up to cfg.layout_retries times (then LayoutError).
    """
    rng = np.random.default_rng([seed, 0])
    placements = []
    boxes = []

    def try_place(verts):
        for _ in range(cfg.layout_retries):
            x = rng.uniform(*cfg.workspace_x)
            y = rng.uniform(*cfg.workspace_y)
            yaw = np.deg2rad(YAW_STEP_DEG) * rng.integers(0, 12)
            pose = _yaw_transform(yaw, x, y, verts)
            box = Aabb.of_points(pose.apply(verts))
            if not any(box.overlaps(b) for b in boxes):
                boxes.append(box)
                return pose
        raise LayoutError(
            f"could not place object without overlap after {cfg.layout_retries} tries"
        )

    for _ in range(count):
        model_id, class_id, mesh = catalog[int(rng.integers(len(catalog)))]
        placements.append(Placement(model_id, class_id, try_place(mesh.vertices)))

    clutter = []
    for _ in range(cfg.clutter_count):
        size = rng.uniform(*cfg.clutter_size, size=3)
        if rng.integers(2) == 0:
            mesh = make_box_mesh(size[0], size[1], size[2])
        else:
            mesh = make_cylinder_mesh(size[0] / 2.0, size[2], segments=16)
        gray = rng.uniform(0.40, 0.65)
        clutter.append(ClutterItem(mesh, try_place(mesh.vertices), (gray, gray, gray)))

    return SceneSpec(placements, clutter, cfg.plane_extent,
                     RigidTransform.identity(), int(seed))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose with +z looking from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (1.0, 0.0, 0.0))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.column_stack([right, down, fwd])
    return RigidTransform(rot, eye)


def orbit_camera_pose(rng, cfg, target=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Random pose on an upper-hemisphere orbit around the target."""
    radius = rng.uniform(*cfg.orbit_radius)
    elev = np.deg2rad(rng.uniform(*cfg.orbit_elevation_deg))
    azim = rng.uniform(0.0, 2.0 * np.pi)
    offset = radius * np.array([
        np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)
    ])
    return look_at(np.asarray(target) + offset, target)


def _raster_primitives(spec: SceneSpec, meshes: dict):
    """Compile the spec into camera-frame primitives:
    (vertices, faces, class_id, instance_id, color)."""
    world_to_cam = spec.camera_pose.inverse()
    prims = []
    if spec.plane_extent > 0:
        plane = make_plane_mesh(spec.plane_extent)
        prims.append((world_to_cam.apply(plane.vertices), plane.faces, 0, 0, PLANE_COLOR))
    for item in spec.clutter:
        pose = world_to_cam.compose(item.pose)
        prims.append((pose.apply(item.mesh.vertices), item.mesh.faces, 0, 0, item.color))
    for inst_id, pl in enumerate(spec.placements, start=1):
        mesh = meshes[pl.model_id]
        pose = world_to_cam.compose(pl.pose)
        prims.append((pose.apply(mesh.vertices), mesh.faces, pl.class_id, inst_id,
                      color_for_class(pl.class_id)))
    return prims


def render_depth(spec: SceneSpec, camera: CameraModel, meshes: dict) -> LabeledScene:
    """Rasterize the scene into a labeled point cloud.

    Every triangle (objects, clutter, support plane) is scan-converted
    against a shared z-buffer, so occlusion falls out of the depth test.
    Depth for a covered pixel is the exact ray/plane intersection of the
    pixel-center ray with the triangle's supporting plane. Along-ray
    Gaussian noise (clipped at two sigma) is added per point, seeded from
    the spec, so rendering is deterministic.
    """
    w, h = camera.width, camera.height
    depth = np.full((h, w), np.inf)
    prim_of = np.full((h, w), -1, dtype=np.int32)
    normal_buf = np.zeros((h, w, 3))

    cols = np.arange(w)
    rows = np.arange(h)
    dir_x = (cols - camera.cx) / camera.fx   # per-column ray x slope
    dir_y = (rows - camera.cy) / camera.fy   # per-row ray y slope

    prims = _raster_primitives(spec, meshes)
    for pi, (verts, faces, _cls, _inst, _color) in enumerate(prims):
        if len(faces) == 0:
            continue
        for f in faces:
            v0, v1, v2 = verts[f[0]], verts[f[1]], verts[f[2]]
            if min(v0[2], v1[2], v2[2]) <= 1e-6:
                continue  # behind or grazing the camera; no near-plane clipping
            us = np.array([v0[0], v1[0], v2[0]]) / (v0[2], v1[2], v2[2]) * camera.fx + camera.cx
            vs = np.array([v0[1], v1[1], v2[1]]) / (v0[2], v1[2], v2[2]) * camera.fy + camera.cy
            c0 = max(0, int(np.ceil(us.min())))
            c1 = min(w - 1, int(np.floor(us.max())))
            r0 = max(0, int(np.ceil(vs.min())))
            r1 = min(h - 1, int(np.floor(vs.max())))
            if c0 > c1 or r0 > r1:
                continue

            pu = cols[c0 : c1 + 1][None, :]
            pv = rows[r0 : r1 + 1][:, None]
            e0 = (us[1] - us[0]) * (pv - vs[0]) - (vs[1] - vs[0]) * (pu - us[0])
            e1 = (us[2] - us[1]) * (pv - vs[1]) - (vs[2] - vs[1]) * (pu - us[1])
            e2 = (us[0] - us[2]) * (pv - vs[2]) - (vs[0] - vs[2]) * (pu - us[2])
            inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
            if not inside.any():
                continue

            n = np.cross(v1 - v0, v2 - v0)
            nn = np.linalg.norm(n)
            if nn < 1e-15:
                continue
            n = n / nn
            denom = (n[0] * dir_x[c0 : c1 + 1][None, :]
                     + n[1] * dir_y[r0 : r1 + 1][:, None] + n[2])
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.dot(n, v0) / denom
            ok = inside & np.isfinite(t) & (t >= camera.z_near) & (t <= camera.z_far)
            win = ok & (t < depth[r0 : r1 + 1, c0 : c1 + 1])
            if not win.any():
                continue

            sub = depth[r0 : r1 + 1, c0 : c1 + 1]
            sub[win] = t[win]
            prim_of[r0 : r1 + 1, c0 : c1 + 1][win] = pi
            # orient the stored normal toward the camera per pixel
            facing = np.sign(denom)[win]
            normal_buf[r0 : r1 + 1, c0 : c1 + 1][win] = -facing[:, None] * n

    hit_r, hit_c = np.nonzero(prim_of >= 0)
    if len(hit_r) == 0:
        cloud = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                           np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.int32))
    else:
        t = depth[hit_r, hit_c]
        d = np.column_stack([dir_x[hit_c], dir_y[hit_r], np.ones(len(hit_r))])
        dnorm = np.linalg.norm(d, axis=1)
        if camera.depth_noise_sigma > 0:
            rng = np.random.default_rng([spec.seed, 2])
            sigma = camera.depth_noise_sigma
            eps = np.clip(rng.normal(0.0, sigma, size=len(hit_r)), -2 * sigma, 2 * sigma)
            t = t + eps / dnorm
        points = d * t[:, None]

        which = prim_of[hit_r, hit_c]
        class_ids = np.zeros(len(hit_r), dtype=np.int32)
        inst_ids = np.zeros(len(hit_r), dtype=np.int32)
        colors = np.zeros((len(hit_r), 3))
        for pi, (_v, _f, cls, inst, color) in enumerate(prims):
            sel = which == pi
            class_ids[sel] = cls
            inst_ids[sel] = inst
            colors[sel] = color
        cloud = PointCloud(points, colors, normal_buf[hit_r, hit_c], class_ids, inst_ids)

    world_to_cam = spec.camera_pose.inverse()
    instances = []
    for inst_id, pl in enumerate(spec.placements, start=1):
        pose = world_to_cam.compose(pl.pose)
        cp = fit_control_points(meshes[pl.model_id])
        instances.append(InstanceRecord(inst_id, pl.class_id, pl.model_id, pose,
                                        pose.apply(cp.as_array())))
    return LabeledScene(cloud, instances, camera)


def save_scene_labels(path, scene: LabeledScene):
    doc = {"instances": [
        {"instance_id": inst.instance_id, "class_id": inst.class_id,
         "model_id": inst.model_id,
         "pose": [float(x) for x in inst.pose.matrix().reshape(16)],
         "control_points": [[float(c) for c in row] for row in inst.control_points]}
        for inst in scene.instances
    ]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene_labels(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read labels ({exc})") from None
    instances = []
    for rec in doc["instances"]:
        pose = RigidTransform.from_matrix(np.asarray(rec["pose"]).reshape(4, 4))
        instances.append(InstanceRecord(
            int(rec["instance_id"]), int(rec["class_id"]), rec["model_id"], pose,
            np.asarray(rec["control_points"], dtype=np.float64).reshape(9, 3)))
    return instances


def load_scene(manifest, index: int) -> LabeledScene:
    entry = manifest.scenes[index]
    cloud = io_formats.read_cloud(manifest.resolve(entry.cloud_path))
    instances = load_scene_labels(manifest.resolve(entry.labels_path))
    return LabeledScene(cloud, instances, CameraModel.from_dict(manifest.camera))


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def _render_one(catalog, camera, scene_cfg, master_seed, index):
    seed = scene_seed(master_seed, index)
    spec = sample_layout([(c[0], c[1], c[2]) for c in catalog],
                         scene_cfg.objects_per_scene, scene_cfg, seed)
    spec.camera_pose = orbit_camera_pose(np.random.default_rng([seed, 1]), scene_cfg)
    meshes = {c[0]: c[2] for c in catalog}
    return render_depth(spec, camera, meshes), seed


def generate_dataset(catalog, n_scenes: int, camera: CameraModel, scene_cfg,
                     master_seed: int, out_dir, jobs: int = 1):
    """Render n_scenes labeled scenes to disk and write the manifest.

    catalog entries are (model_id, class_id, mesh, source_path, name,
    symmetric). Per-scene seeds derive from the master seed so the whole
    dataset is byte-reproducible; scene files are scene_%06d.ply with a
    scene_%06d.labels.json sidecar, meshes are copied under models/.
    """
    import shutil

    os.makedirs(out_dir, exist_ok=True)
    models_dir = os.path.join(out_dir, "models")
    os.makedirs(models_dir, exist_ok=True)

    classes = []
    for model_id, class_id, mesh, src_path, name, symmetric in catalog:
        rel = os.path.join("models", os.path.basename(src_path))
        shutil.copyfile(src_path, os.path.join(out_dir, rel))
        classes.append(io_formats.ClassEntry(class_id, name, rel, symmetric,
                                             mesh.diameter))

    short = [(c[0], c[1], c[2]) for c in catalog]
    entries = []

    def emit(index, scene, seed):
        cloud_rel = f"scene_{index:06d}.ply"
        labels_rel = f"scene_{index:06d}.labels.json"
        try:
            io_formats.write_cloud(os.path.join(out_dir, cloud_rel), scene.cloud)
            save_scene_labels(os.path.join(out_dir, labels_rel), scene)
        except OSError as exc:
            raise DataError(f"scene {index}: failed to write ({exc})") from None
        entries.append(io_formats.SceneEntry(index, cloud_rel, labels_rel, seed))

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_render_one, short, camera, scene_cfg,
                                   master_seed, i) for i in range(n_scenes)]
            for i, fut in enumerate(futures):
                scene, seed = fut.result()
                emit(i, scene, seed)
    else:
        for i in range(n_scenes):
            scene, seed = _render_one(short, camera, scene_cfg, master_seed, i)
            emit(i, scene, seed)

    manifest = io_formats.DatasetManifest(classes, entries, camera.to_dict(),
                                          int(master_seed), root=str(out_dir))
    io_formats.save_manifest(manifest, out_dir)
    return manifest
