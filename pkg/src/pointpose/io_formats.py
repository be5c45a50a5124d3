"""Mesh and point-cloud file I/O plus the dataset manifest.

Meshes load from ASCII OBJ (v/f records, polygon faces fan-triangulated)
and from PLY in ascii or binary little-endian form. Clouds are stored as
PLY with float64 positions and normals, uint8 colors and int32 labels, so
float fields round-trip bit-exactly through the binary writer.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import DataError
from .geometry import TriMesh, model_diameter

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class _PlyElement:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.properties = []  # (name, dtype_code) or ("list", count_code, item_code, name)


def _parse_ply_header(blob: bytes, path):
    """Parse the header; return (format, elements, body offset)."""
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file (no header)")
    eol = blob.index(b"\n", end)
    header = blob[:eol].decode("ascii", errors="replace")
    offset = eol + 1

    fmt = None
    elements = []
    for lineno, line in enumerate(header.splitlines(), start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            if tok[1] not in ("ascii", "binary_little_endian"):
                raise DataError(f"{path}:{lineno}: unsupported PLY format {tok[1]!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append(_PlyElement(tok[1], int(tok[2])))
        elif tok[0] == "property":
            if not elements:
                raise DataError(f"{path}:{lineno}: property before any element")
            if tok[1] == "list":
                elements[-1].properties.append(("list", tok[2], tok[3], tok[4]))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise DataError(f"{path}:{lineno}: unknown PLY type {tok[1]!r}")
                elements[-1].properties.append((tok[2], tok[1]))
        else:
            raise DataError(f"{path}:{lineno}: unrecognized header line {line!r}")
    if fmt is None:
        raise DataError(f"{path}: PLY header missing format line")
    return fmt, elements, offset


def _read_ply(path):
    """Return {element name: {prop name: column array}} plus face lists."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fmt, elements, offset = _parse_ply_header(blob, path)
    out = {}

    if fmt == "ascii":
        lines = blob[offset:].decode("ascii", errors="replace").split("\n")
        cursor = 0
        for el in elements:
            has_list = any(p[0] == "list" for p in el.properties)
            rows = []
            for i in range(el.count):
                while cursor < len(lines) and not lines[cursor].strip():
                    cursor += 1
                if cursor >= len(lines):
                    raise DataError(f"{path}: truncated, element {el.name} row {i} missing")
                rows.append(lines[cursor].split())
                cursor += 1
            out[el.name] = _columns_from_ascii(el, rows, has_list, path)
    else:
        data = blob[offset:]
        pos = 0
        for el in elements:
            has_list = any(p[0] == "list" for p in el.properties)
            if not has_list:
                dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in el.properties])
                need = dtype.itemsize * el.count
                if len(data) - pos < need:
                    raise DataError(
                        f"{path}: truncated, element {el.name} needs {need} bytes, "
                        f"{len(data) - pos} left"
                    )
                table = np.frombuffer(data, dtype=dtype, count=el.count, offset=pos)
                pos += need
                out[el.name] = {p[0]: np.ascontiguousarray(table[p[0]]) for p in el.properties}
            else:
                lists = []
                for i in range(el.count):
                    row = []
                    for p in el.properties:
                        if p[0] == "list":
                            cdt = np.dtype("<" + _PLY_TYPES[p[1]])
                            idt = np.dtype("<" + _PLY_TYPES[p[2]])
                            if len(data) - pos < cdt.itemsize:
                                raise DataError(f"{path}: truncated at byte {pos} (list count)")
                            cnt = int(np.frombuffer(data, cdt, 1, pos)[0])
                            pos += cdt.itemsize
                            need = cnt * idt.itemsize
                            if len(data) - pos < need:
                                raise DataError(f"{path}: truncated at byte {pos} (list items)")
                            row.append(np.frombuffer(data, idt, cnt, pos).tolist())
                            pos += need
                        else:
                            dt = np.dtype("<" + _PLY_TYPES[p[1]])
                            if len(data) - pos < dt.itemsize:
                                raise DataError(f"{path}: truncated at byte {pos}")
                            row.append(float(np.frombuffer(data, dt, 1, pos)[0]))
                            pos += dt.itemsize
                    lists.append(row)
                out[el.name] = {"_rows": lists, "_props": el.properties}
    return out


def _columns_from_ascii(el, rows, has_list, path):
    if not has_list:
        cols = {}
        arr = []
        for i, row in enumerate(rows):
            if len(row) != len(el.properties):
                raise DataError(
                    f"{path}: element {el.name} row {i} has {len(row)} fields, "
                    f"expected {len(el.properties)}"
                )
            arr.append(row)
        mat = np.asarray(arr)
        for j, (name, code) in enumerate(el.properties):
            cols[name] = mat[:, j].astype(np.dtype(_PLY_TYPES[code]))
        return cols
    parsed = []
    for i, row in enumerate(rows):
        fields = iter(row)
        rec = []
        try:
            for p in el.properties:
                if p[0] == "list":
                    cnt = int(next(fields))
                    rec.append([int(next(fields)) for _ in range(cnt)])
                else:
                    rec.append(float(next(fields)))
        except StopIteration:
            raise DataError(f"{path}: element {el.name} row {i} is short") from None
        parsed.append(rec)
    return {"_rows": parsed, "_props": el.properties}


def _faces_from_element(face_data, path):
    faces = []
    props = face_data["_props"]
    list_slot = next(i for i, p in enumerate(props) if p[0] == "list")
    for row in face_data["_rows"]:
        poly = [int(v) for v in row[list_slot]]
        if len(poly) < 3:
            raise DataError(f"{path}: face with fewer than 3 vertices")
        for k in range(1, len(poly) - 1):  # fan triangulation
            faces.append((poly[0], poly[k], poly[k + 1]))
    return faces


def _read_mesh_ply(path) -> TriMesh:
    data = _read_ply(path)
    if "vertex" not in data:
        raise DataError(f"{path}: PLY has no vertex element")
    v = data["vertex"]
    for key in ("x", "y", "z"):
        if key not in v:
            raise DataError(f"{path}: vertex element missing property {key!r}")
    verts = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    faces = []
    if "face" in data and "_rows" in data["face"]:
        faces = _faces_from_element(data["face"], path)
    return TriMesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def _read_mesh_obj(path) -> TriMesh:
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                if len(tok) < 4:
                    raise DataError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    verts.append((float(tok[1]), float(tok[2]), float(tok[3])))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: malformed vertex record") from None
            elif tok[0] == "f":
                if len(tok) < 4:
                    raise DataError(f"{path}:{lineno}: face record needs >= 3 vertices")
                try:
                    poly = [int(t.split("/")[0]) for t in tok[1:]]
                except ValueError:
                    raise DataError(f"{path}:{lineno}: malformed face record") from None
                idx = [p - 1 if p > 0 else len(verts) + p for p in poly]
                if any(i < 0 or i >= len(verts) for i in idx):
                    raise DataError(f"{path}:{lineno}: face index out of range")
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
            # vn/vt/o/g/s/usemtl/mtllib records are ignored
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                   np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def read_mesh(path) -> TriMesh:
    """Load a triangle mesh from OBJ or PLY, sniffing the format."""
    if not os.path.exists(path):
        raise DataError(f"mesh file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(3)
    if magic == b"ply":
        return _read_mesh_ply(path)
    return _read_mesh_obj(path)


def write_mesh(path, mesh: TriMesh):
    """Write a mesh as OBJ (.obj) or binary little-endian PLY (anything else).

    OBJ floats use repr-exact formatting so a write/read round trip
    reproduces the vertices bit-exactly.
    """
    if str(path).lower().endswith(".obj"):
        with open(path, "w", encoding="utf-8") as fh:
            for v in mesh.vertices:
                fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
        return
    header = [
        b"ply",
        b"format binary_little_endian 1.0",
        b"element vertex %d" % len(mesh.vertices),
        b"property double x", b"property double y", b"property double z",
        b"element face %d" % len(mesh.faces),
        b"property list uchar int vertex_indices",
        b"end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(b"\n".join(header) + b"\n")
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        if len(mesh.faces):
            face_dtype = np.dtype([("n", "u1"), ("v", "<i4", (3,))])
            rec = np.empty(len(mesh.faces), dtype=face_dtype)
            rec["n"] = 3
            rec["v"] = mesh.faces
            fh.write(rec.tobytes())


def write_cloud(path, cloud: PointCloud):
    """Write a cloud as binary little-endian PLY.

    Emits x y z as float64, colors as uint8 (red green blue), normals as
    float64 (nx ny nz) and labels as int32 (class, instance) when present.
    """
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    props = [b"property double x", b"property double y", b"property double z"]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        props += [b"property uchar red", b"property uchar green", b"property uchar blue"]
    if cloud.normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
        props += [b"property double nx", b"property double ny", b"property double nz"]
    if cloud.labeled:
        fields += [("class", "<i4"), ("instance", "<i4")]
        props += [b"property int class", b"property int instance"]

    rec = np.empty(len(cloud), dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.positions.T
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    if cloud.normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T
    if cloud.labeled:
        rec["class"] = cloud.class_ids
        rec["instance"] = cloud.instance_ids

    header = [b"ply", b"format binary_little_endian 1.0",
              b"element vertex %d" % len(cloud)] + props + [b"end_header"]
    with open(path, "wb") as fh:
        fh.write(b"\n".join(header) + b"\n")
        fh.write(rec.tobytes())


def read_cloud(path) -> PointCloud:
    """Load a point cloud from PLY; raises DataError listing any missing
    required position properties."""
    data = _read_ply(path)
    if "vertex" not in data:
        raise DataError(f"{path}: PLY has no vertex element")
    v = data["vertex"]
    missing = [k for k in ("x", "y", "z") if k not in v]
    if missing:
        raise DataError(f"{path}: cloud is missing required properties: {', '.join(missing)}")
    positions = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)

    colors = None
    if all(k in v for k in ("red", "green", "blue")):
        colors = np.column_stack([v["red"], v["green"], v["blue"]]).astype(np.float64) / 255.0
    normals = None
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.column_stack([v["nx"], v["ny"], v["nz"]]).astype(np.float64)
    class_ids = instance_ids = None
    if "class" in v and "instance" in v:
        class_ids = v["class"].astype(np.int32)
        instance_ids = v["instance"].astype(np.int32)
    return PointCloud(positions, colors, normals, class_ids, instance_ids)


MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class ClassEntry:
    class_id: int
    name: str
    mesh_path: str
    symmetric: bool
    diameter: float


@dataclass
class SceneEntry:
    index: int
    cloud_path: str
    labels_path: str
    seed: int


@dataclass
class DatasetManifest:
    classes: list
    scenes: list
    camera: dict
    master_seed: int
    version: int = MANIFEST_VERSION
    root: str = "."

    def class_by_id(self, class_id: int) -> ClassEntry:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise DataError(f"manifest has no class {class_id}")

    def resolve(self, rel: str) -> str:
        return os.path.join(self.root, rel)


def save_manifest(manifest: DatasetManifest, directory):
    doc = {
        "version": manifest.version,
        "master_seed": manifest.master_seed,
        "camera": manifest.camera,
        "classes": [
            {"id": c.class_id, "name": c.name, "mesh": c.mesh_path,
             "symmetric": c.symmetric, "diameter": c.diameter}
            for c in manifest.classes
        ],
        "scenes": [
            {"index": s.index, "cloud": s.cloud_path, "labels": s.labels_path,
             "seed": s.seed}
            for s in manifest.scenes
        ],
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(directory, validate: bool = True) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Checks that every referenced file exists, diameters are positive and
    each stored diameter matches the recomputed mesh diameter to 1e-9.
    """
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST_NAME} in {directory}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {doc.get('version')!r}")

    manifest = DatasetManifest(
        classes=[ClassEntry(c["id"], c["name"], c["mesh"], bool(c["symmetric"]),
                            float(c["diameter"])) for c in doc["classes"]],
        scenes=[SceneEntry(s["index"], s["cloud"], s["labels"], int(s["seed"]))
                for s in doc["scenes"]],
        camera=doc["camera"],
        master_seed=int(doc["master_seed"]),
        version=int(doc["version"]),
        root=str(directory),
    )
    if validate:
        for c in manifest.classes:
            mesh_path = manifest.resolve(c.mesh_path)
            if not os.path.exists(mesh_path):
                raise DataError(f"manifest references missing mesh {c.mesh_path!r}")
            if c.diameter <= 0:
                raise DataError(f"class {c.class_id} has non-positive diameter")
            actual = model_diameter(read_mesh(mesh_path).vertices)
            if abs(actual - c.diameter) > 1e-9:
                raise DataError(
                    f"class {c.class_id} diameter {c.diameter} does not match "
                    f"mesh diameter {actual} (stale manifest?)"
                )
        for s in manifest.scenes:
            for rel in (s.cloud_path, s.labels_path):
                if not os.path.exists(manifest.resolve(rel)):
                    raise DataError(f"manifest references missing file {rel!r}")
    return manifest
