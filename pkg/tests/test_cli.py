import json

import numpy as np
import pytest

from epnkit.cli import main
from epnkit.group import FiniteRotationGroup, build_group
from epnkit.sampling import load_cloud_binary, load_cloud_text, save_cloud_text
from epnkit.train.checkpoint import load_checkpoint

FAST_CFG = """
group = tetrahedral
levels = 2
radii = 0.5, 1.0
k_max = 8, 8
channels = 3, 4
kernel_points = 3
group_neighbors = 2
batch_size = 4
iterations = 6
n_points = 48
train_samples = 8
eval_samples = 8
"""


def run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestGroupBuild:
    def test_emits_group_json(self, tmp_path, capsys):
        out = tmp_path / "group.json"
        code, _, _ = run(["group", "build", "--kind", "tetrahedral", "--out", str(out)], capsys)
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["order"] == 12
        assert len(payload["elements"]) == 12

    def test_roundtrip_is_bit_exact(self, tmp_path, capsys):
        out = tmp_path / "octa.json"
        assert run(["group", "build", "--kind", "octa", "--out", str(out)], capsys)[0] == 0
        back = FiniteRotationGroup.from_dict(json.loads(out.read_text()))
        built = build_group("octahedral")
        assert np.array_equal(back.elements, built.elements)
        assert np.array_equal(back.mul_table, built.mul_table)

    def test_two_runs_byte_identical(self, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        run(["group", "build", "--kind", "icosa", "--out", str(a)], capsys)
        run(["group", "build", "--kind", "icosa", "--out", str(b)], capsys)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_kind_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["group", "build", "--kind", "dodeca"])
        assert exc.value.code == 2


class TestAuditCommand:
    def test_default_audit_passes_and_prints_json(self, capsys):
        code, out, _ = run(["audit", "--group", "tetra", "--n-points", "32", "--channels", "4"], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["passed"] is True

    def test_corrupt_hook_fails_with_nonzero_exit(self, capsys):
        code, out, err = run(
            ["audit", "--group", "tetra", "--n-points", "24", "--channels", "4",
             "--corrupt", "rotation_permutation"],
            capsys,
        )
        assert code == 1
        assert "rotation_equivariance" in err

    def test_byte_identical_reruns(self, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        args = ["audit", "--group", "tetra", "--n-points", "24", "--channels", "4", "--seed", "7"]
        run(args + ["--out", str(a)], capsys)
        run(args + ["--out", str(b)], capsys)
        assert a.read_bytes() == b.read_bytes()


class TestBenchCommand:
    def test_dry_bench_deterministic_and_csv(self, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        csv_path = tmp_path / "sweep.csv"
        args = ["bench", "--group", "tetra", "--kp", "2,4", "--kg", "2", "--channels", "3",
                "--n-points", "16", "--dry"]
        run(args + ["--out", str(a), "--csv", str(csv_path)], capsys)
        run(args + ["--out", str(b)], capsys)
        assert a.read_bytes() == b.read_bytes()
        assert csv_path.read_text().splitlines()[0].startswith("k_p,")
        rows = json.loads(a.read_text())["rows"]
        assert all("naive_seconds" not in r for r in rows)


class TestTrainCommand:
    def test_missing_config_exits_2(self, capsys):
        code, _, err = run(["train", "pose", "--config", "/nonexistent/cfg"], capsys)
        assert code == 2
        assert "not found" in err

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rte = 0.1\n")
        code, _, err = run(["train", "pose", "--config", str(cfg)], capsys)
        assert code == 2
        assert "unknown config key" in err

    def test_pose_quick_run_writes_report_and_checkpoint(self, tmp_path, capsys):
        cfg = tmp_path / "pose.cfg"
        cfg.write_text(FAST_CFG)
        report_path = tmp_path / "report.json"
        ckpt_path = tmp_path / "model.epn1"
        code, _, _ = run(
            ["train", "pose", "--config", str(cfg), "--group", "tetra",
             "--out", str(report_path), "--checkpoint", str(ckpt_path)],
            capsys,
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["task"] == "pose"
        assert "median_error_deg" in report
        arrays = load_checkpoint(ckpt_path)
        assert any(k.startswith("level0") for k in arrays)

    def test_cls_quick_run_reports_all_variants(self, tmp_path, capsys):
        cfg = tmp_path / "cls.cfg"
        cfg.write_text(FAST_CFG + "pooling = attentive, max, mean\n")
        report_path = tmp_path / "report.json"
        code, _, _ = run(
            ["train", "cls", "--config", str(cfg), "--group", "tetra", "--out", str(report_path)],
            capsys,
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert set(report["variants"]) == {"attentive", "max", "mean"}
        assert "attention_confidence_histogram" in report["variants"]["attentive"]

    def test_train_reports_byte_identical(self, tmp_path, capsys):
        cfg = tmp_path / "pose.cfg"
        cfg.write_text(FAST_CFG)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        base = ["train", "pose", "--config", str(cfg), "--group", "tetra", "--seed", "5",
                "--threads", "1"]
        run(base + ["--out", str(a)], capsys)
        run(base + ["--out", str(b)], capsys)
        assert a.read_bytes() == b.read_bytes()


class TestConvert:
    def test_text_to_binary_and_back(self, tmp_path, capsys, rng):
        pts = rng.standard_normal((9, 3))
        text_in = tmp_path / "in.txt"
        save_cloud_text(text_in, pts)
        binary = tmp_path / "cloud.epnc"
        code, _, _ = run(["convert", "--input", str(text_in), "--out", str(binary)], capsys)
        assert code == 0
        np.testing.assert_array_equal(load_cloud_binary(binary), pts)
        text_out = tmp_path / "back.txt"
        code, _, _ = run(["convert", "--input", str(binary), "--out", str(text_out)], capsys)
        assert code == 0
        back, labels = load_cloud_text(text_out)
        np.testing.assert_array_equal(back, pts)
        assert labels is None

    def test_labels_warn_on_binary(self, tmp_path, capsys, rng):
        pts = rng.standard_normal((4, 3))
        text_in = tmp_path / "in.txt"
        save_cloud_text(text_in, pts, labels=[0, 1, 0, 1])
        code, _, err = run(
            ["convert", "--input", str(text_in), "--to", "binary", "--out", str(tmp_path / "o.epnc")],
            capsys,
        )
        assert code == 0
        assert "labels dropped" in err

    def test_missing_input_exits_2(self, capsys):
        code, _, err = run(["convert", "--input", "/no/such/file", "--out", "/tmp/x"], capsys)
        assert code == 2


def test_env_var_thread_fallback(monkeypatch, capsys):
    monkeypatch.setenv("EPNKIT_THREADS", "3")
    code, out, _ = run(["bench", "--group", "tetra", "--kp", "2", "--kg", "2",
                        "--channels", "3", "--n-points", "8", "--dry"], capsys)
    assert code == 0
