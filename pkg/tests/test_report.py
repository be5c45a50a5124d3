import numpy as np
import pytest

from pointpose.decode import PoseEstimate
from pointpose.geometry import RigidTransform
from pointpose.report import (BOX_EDGES, PoseRecord, confidence_colors,
                              read_pose_records, write_box_lineset,
                              write_loss_curve, write_pose_records,
                              write_scoreboard, write_sweep)

from conftest import random_transform


class TestPoseRecords:
    def test_round_trip_exact(self, rng, tmp_path):
        records = []
        for sid in range(5):
            t = random_transform(rng)
            records.append(PoseRecord(sid, 1, t.rotation, t.translation,
                                      float(rng.uniform()), bool(sid % 2)))
        path = tmp_path / "poses.jsonl"
        write_pose_records(path, records)
        back = read_pose_records(path)
        assert len(back) == 5
        for a, b in zip(records, back):
            assert a.scene_id == b.scene_id
            assert np.array_equal(np.asarray(a.rotation), b.rotation)
            assert np.array_equal(np.asarray(a.translation), b.translation)
            assert a.score == b.score and a.refined == b.refined

    def test_estimate_round_trip(self, rng, tmp_path):
        est = PoseEstimate(1, random_transform(rng), 0.77, True)
        rec = PoseRecord.from_estimate(3, est)
        back = rec.to_estimate()
        assert np.array_equal(back.pose.matrix(), est.pose.matrix())
        assert back.score == est.score

    def test_bad_record_reports_line(self, tmp_path):
        path = tmp_path / "poses.jsonl"
        path.write_text('{"scene": 0}\n')
        from pointpose.errors import DataError

        with pytest.raises(DataError, match=":1"):
            read_pose_records(path)


class TestBoxLineset:
    def test_twelve_edges_per_box(self, tmp_path):
        assert len(BOX_EDGES) == 12
        corners = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)],
                           dtype=float)
        path = tmp_path / "boxes.ply"
        write_box_lineset(path, [corners, corners + 2.0])
        text = path.read_bytes().split(b"end_header")[0].decode()
        assert "element vertex 16" in text
        assert "element edge 24" in text

    def test_edges_span_single_bits(self):
        for a, b in BOX_EDGES:
            assert bin(a ^ b).count("1") == 1


class TestConfidenceColors:
    def test_endpoints_hit_colormap_ends(self):
        import matplotlib.pyplot as plt

        cmap = plt.get_cmap("hsv")
        got = confidence_colors(np.array([0.0, 1.0]))
        assert np.allclose(got[0], cmap(0.0)[:3])
        assert np.allclose(got[1], cmap(1.0)[:3])

    def test_clipped_to_unit_range(self):
        got = confidence_colors(np.array([-0.5, 1.5]))
        assert got.shape == (2, 3)


class TestDelimitedOutputs:
    def test_loss_curve_csv_and_figure(self, tmp_path):
        curve = [{"epoch": i, "phase": 2, "total": 1.0 / (i + 1),
                  "seg": 0.5 / (i + 1), "reg": 0.3 / (i + 1),
                  "conf": 0.2 / (i + 1)} for i in range(5)]
        csv = tmp_path / "loss.csv"
        fig = tmp_path / "loss.png"
        write_loss_curve(csv, curve, fig)
        lines = csv.read_text().strip().splitlines()
        assert lines[0] == "epoch,phase,total,seg,reg,conf"
        assert len(lines) == 6
        assert float(lines[1].split(",")[2]) == 1.0
        assert fig.exists() and fig.stat().st_size > 0

    def test_sweep_outputs(self, tmp_path):
        csv = tmp_path / "sweep.csv"
        fig = tmp_path / "sweep.png"
        write_sweep([(0.1, 0.5), (0.3, 1.0)], csv, fig)
        lines = csv.read_text().strip().splitlines()
        assert lines[1:] == ["0.1,0.5", "0.3,1.0"]
        assert fig.exists()

    def test_scoreboard_outputs(self, tmp_path):
        from pointpose.metrics import ClassScore, Scoreboard

        board = Scoreboard({1: ClassScore(3, 1, 0), 2: ClassScore(1, 0, 1)})
        txt = tmp_path / "score.txt"
        csv = tmp_path / "score.csv"
        fig = tmp_path / "score.png"
        table = write_scoreboard(board, txt, csv, fig, {1: "box", 2: "cyl"})
        assert "box" in table and "overall" in table
        assert txt.read_text().startswith("class")
        rows = csv.read_text().strip().splitlines()
        assert rows[0] == "class,tp,fp,fn,precision,recall,f1"
        assert len(rows) == 4
        assert fig.exists()
