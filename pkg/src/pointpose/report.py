"""Result serialization and reporting.

Pose estimates go to line-delimited JSON records; scoreboards, loss curves
and threshold sweeps are written as delimited text with a rendered figure
saved alongside each one. Visualization exports (class-colored and
confidence-colored clouds, box edge sets) are PLY files loadable in
standard viewers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .cloud import PointCloud
from .decode import PoseEstimate
from .errors import DataError
from .geometry import RigidTransform
from .scenegen import color_for_class

# keep savefig byte-stable across runs regardless of library metadata defaults
_PNG_META = {"Software": None}


@dataclass
class PoseRecord:
    scene_id: int
    class_id: int
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    score: float
    refined: bool

    @classmethod
    def from_estimate(cls, scene_id: int, est: PoseEstimate) -> "PoseRecord":
        return cls(scene_id, est.class_id, est.pose.rotation,
                   est.pose.translation, est.score, est.refined)

    def to_estimate(self) -> PoseEstimate:
        return PoseEstimate(self.class_id,
                            RigidTransform(self.rotation, self.translation),
                            self.score, self.refined)


def write_pose_records(path, records):
    """One JSON object per line: scene, class, row-major rotation,
    translation, score, refined."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            doc = {
                "scene": int(rec.scene_id),
                "class_id": int(rec.class_id),
                "rotation": [float(x) for x in np.asarray(rec.rotation).reshape(9)],
                "translation": [float(x) for x in np.asarray(rec.translation).reshape(3)],
                "score": float(rec.score),
                "refined": bool(rec.refined),
            }
            fh.write(json.dumps(doc, sort_keys=True) + "\n")


def read_pose_records(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                records.append(PoseRecord(
                    int(doc["scene"]), int(doc["class_id"]),
                    np.asarray(doc["rotation"], dtype=np.float64).reshape(3, 3),
                    np.asarray(doc["translation"], dtype=np.float64).reshape(3),
                    float(doc["score"]), bool(doc["refined"])))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad pose record ({exc})") from None
    return records


def write_loss_curve(csv_path, curve, figure_path=None):
    """Comma-separated per-epoch loss parts, with an optional rendered plot."""
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,phase,total,seg,reg,conf\n")
        for row in curve:
            fh.write(f"{row['epoch']},{row['phase']},{row['total']!r},"
                     f"{row['seg']!r},{row['reg']!r},{row['conf']!r}\n")
    if figure_path is None or not curve:
        return
    epochs = [row["epoch"] for row in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in ("total", "seg", "reg", "conf"):
        ax.plot(epochs, [row[name] for row in curve], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(figure_path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def write_scoreboard(board, txt_path, csv_path=None, figure_path=None,
                     class_names=None):
    """Fixed-width table plus optional CSV and per-class bar chart."""
    names = class_names or {}
    rows = []
    for class_id in sorted(board.per_class):
        s = board.per_class[class_id]
        rows.append((names.get(class_id, f"class {class_id}"), s))
    total = board.overall()

    lines = [f"{'class':<16}{'tp':>6}{'fp':>6}{'fn':>6}"
             f"{'precision':>12}{'recall':>10}{'f1':>10}"]
    for label, s in rows + [("overall", total)]:
        lines.append(f"{label:<16}{s.tp:>6}{s.fp:>6}{s.fn:>6}"
                     f"{s.precision:>12.4f}{s.recall:>10.4f}{s.f1:>10.4f}")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    if csv_path:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("class,tp,fp,fn,precision,recall,f1\n")
            for label, s in rows + [("overall", total)]:
                fh.write(f"{label},{s.tp},{s.fp},{s.fn},"
                         f"{s.precision!r},{s.recall!r},{s.f1!r}\n")
    if figure_path and rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        labels = [label for label, _ in rows]
        x = np.arange(len(rows))
        for off, (key, getter) in enumerate(
                [("precision", lambda s: s.precision),
                 ("recall", lambda s: s.recall),
                 ("f1", lambda s: s.f1)]):
            ax.bar(x + (off - 1) * 0.25, [getter(s) for _, s in rows], 0.25, label=key)
        ax.set_xticks(x, labels, rotation=20)
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(figure_path, dpi=120, metadata=_PNG_META)
        plt.close(fig)
    return "\n".join(lines)


def write_sweep(pairs, csv_path, figure_path=None):
    """(threshold fraction, recall) pairs as CSV plus a recall curve."""
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("threshold_fraction,recall\n")
        for frac, recall in pairs:
            fh.write(f"{frac!r},{recall!r}\n")
    if figure_path and pairs:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([p[0] for p in pairs], [p[1] for p in pairs], marker="o")
        ax.set_xlabel("threshold (fraction of diameter)")
        ax.set_ylabel("recall")
        ax.set_ylim(0, 1.05)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(figure_path, dpi=120, metadata=_PNG_META)
        plt.close(fig)


def confidence_colors(confidence) -> np.ndarray:
    """Map confidences in [0, 1] onto the HSV colormap endpoints-inclusive."""
    cmap = plt.get_cmap("hsv")
    return np.asarray(cmap(np.clip(confidence, 0.0, 1.0)))[:, :3]


def segmentation_colored(positions, class_ids) -> PointCloud:
    colors = np.array([color_for_class(int(c)) for c in class_ids])
    return PointCloud(positions, colors)


def confidence_colored(positions, confidence) -> PointCloud:
    return PointCloud(positions, confidence_colors(confidence))


BOX_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8)
             if bin(a ^ b).count("1") == 1]  # 12 edges of the corner cube


def write_box_lineset(path, boxes):
    """Boxes as a PLY line set: 8 corner vertices and 12 edges per box."""
    boxes = [np.asarray(b, dtype=np.float64).reshape(-1, 3)[:8] for b in boxes]
    n_v = 8 * len(boxes)
    n_e = len(BOX_EDGES) * len(boxes)
    header = [
        b"ply", b"format binary_little_endian 1.0",
        b"element vertex %d" % n_v,
        b"property double x", b"property double y", b"property double z",
        b"element edge %d" % n_e,
        b"property int vertex1", b"property int vertex2",
        b"end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(b"\n".join(header) + b"\n")
        if boxes:
            fh.write(np.ascontiguousarray(np.vstack(boxes), dtype="<f8").tobytes())
            edges = []
            for bi in range(len(boxes)):
                base = 8 * bi
                edges.extend((base + a, base + b) for a, b in BOX_EDGES)
            fh.write(np.asarray(edges, dtype="<i4").tobytes())


@dataclass
class RunReport:
    """Summary emitted (as JSON on stdout) after every successful command."""

    command: str
    config_digest: str
    timings_ms: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    result_paths: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "command": self.command,
            "config_digest": self.config_digest,
            "timings_ms": {k: round(v, 3) for k, v in self.timings_ms.items()},
            "counts": self.counts,
            "result_paths": self.result_paths,
        }, sort_keys=True, indent=2)
