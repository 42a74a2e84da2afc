import json

import pandas as pd
import pytest

from mocae.calib import load_calibrators
from mocae.cli import RunConfig, main
from mocae.errors import ConfigError


@pytest.fixture
def single_hit(fixture_path):
    return ["--dets", fixture_path("single_hit_dets.json"), "--gt", fixture_path("single_hit_gt.json")]


@pytest.fixture
def two_class(fixture_path):
    return ["--dets", fixture_path("two_class_dets.json"), "--gt", fixture_path("two_class_gt.json")]


class TestRunConfig:
    def test_flags_override_the_file(self, fixture_path):
        cfg = RunConfig.from_sources(fixture_path("run_config.json"), {"num_bins": 5, "dets": "ignored"})
        assert cfg.num_bins == 5
        assert cfg.nms_kind == "standard"
        assert cfg.taus == (0.5, 0.75)

    def test_unknown_file_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"bins": 10}), encoding="utf-8")
        with pytest.raises(ConfigError):
            RunConfig.from_sources(str(path))

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            RunConfig.from_sources(None, {"ap_rule": "voc"})


class TestEval:
    def test_single_hit_scene_scores_half(self, single_hit, tmp_path, capsys):
        out = tmp_path / "eval.json"
        assert main(["eval", *single_hit, "--ap-rule", "continuous", "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "50.0000" in printed
        assert "✓ Report saved to" in printed
        assert json.loads(out.read_text(encoding="utf-8"))["metrics"]["ap"] == 0.5

    def test_default_rule_samples_101_points(self, single_hit, tmp_path):
        out = tmp_path / "eval.json"
        assert main(["eval", *single_hit, "--out", str(out)]) == 0
        assert json.loads(out.read_text(encoding="utf-8"))["metrics"]["ap"] == pytest.approx(51 / 101)

    def test_repeat_runs_are_byte_identical(self, two_class, tmp_path):
        first, second = tmp_path / "a.json", tmp_path / "b.json"
        assert main(["eval", *two_class, "--out", str(first)]) == 0
        assert main(["eval", *two_class, "--out", str(second)]) == 0
        assert first.read_bytes() == second.read_bytes()

    def test_per_class_table(self, two_class, tmp_path, capsys):
        assert main(["eval", *two_class, "--per-class", "--out", str(tmp_path / "e.json")]) == 0
        assert "Class" in capsys.readouterr().out

    def test_missing_file(self, tmp_path, capsys):
        code = main(["eval", "--dets", str(tmp_path / "none.json"), "--gt", str(tmp_path / "none.json")])
        assert code == 1
        assert "✗" in capsys.readouterr().err

    def test_unknown_config_key(self, single_hit, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"nms": "standard"}), encoding="utf-8")
        assert main(["eval", *single_hit, "--config", str(path), "--out", str(tmp_path / "e.json")]) == 1

    def test_score_out_of_range_is_a_domain_failure(self, fixture_path, tmp_path):
        dets = tmp_path / "dets.json"
        dets.write_text(
            json.dumps([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 5, 5], "score": 1.2}]), encoding="utf-8"
        )
        assert main(["eval", "--dets", str(dets), "--gt", fixture_path("single_hit_gt.json")]) == 2

    def test_non_utf8_file_is_a_parse_failure(self, fixture_path, tmp_path, capsys):
        dets = tmp_path / "dets.json"
        dets.write_bytes(b'[{"image_id": 1, "category_id": 1, "bbox": [0, 0, 5, 5], "score": 0.5, "note": "\xff"}]')
        assert main(["eval", "--dets", str(dets), "--gt", fixture_path("single_hit_gt.json")]) == 1
        assert "not UTF-8" in capsys.readouterr().err

    def test_short_bbox_is_a_parse_failure(self, fixture_path, tmp_path):
        dets = tmp_path / "dets.json"
        dets.write_text(
            json.dumps([{"image_id": 1, "category_id": 1, "bbox": [0, 0, 2], "score": 0.5}]), encoding="utf-8"
        )
        assert main(["eval", "--dets", str(dets), "--gt", fixture_path("single_hit_gt.json")]) == 1

    def test_non_utf8_config_is_a_parse_failure(self, single_hit, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_bytes(b'{"num_bins": 10, "\xfe": 1}')
        assert main(["eval", *single_hit, "--config", str(path), "--out", str(tmp_path / "e.json")]) == 1


class TestCalibrate:
    def test_class_wise_fit(self, two_class, tmp_path, capsys):
        out = tmp_path / "cal.json"
        assert main(["calibrate", *two_class, "--mode", "cw", "--method", "ir", "--out", str(out)]) == 0
        assert set(load_calibrators(str(out)).calibrators) == {1, 2}
        assert "LaECE after" in capsys.readouterr().out

    def test_calibrated_input_needs_little_correction(self, fixture_path, tmp_path, capsys):
        out = tmp_path / "cal.json"
        args = ["--dets", fixture_path("single_hit_dets.json"), "--gt", fixture_path("single_hit_gt.json")]
        assert main(["calibrate", *args, "--out", str(out)]) == 0
        cals = load_calibrators(str(out))
        assert cals(0.9, 1) == pytest.approx(1.0)
        assert cals(0.2, 1) == pytest.approx(0.0)

    def test_grid(self, two_class, tmp_path):
        out = tmp_path / "grid.json"
        assert main(["calibrate", *two_class, "--grid", "--out", str(out)]) == 0
        rows = json.loads(out.read_text(encoding="utf-8"))["rows"]
        assert len(rows) == 5


class TestFuse:
    def test_identity_fusion(self, fixture_path, tmp_path, capsys):
        out = tmp_path / "fused.json"
        dets = fixture_path("two_class_dets.json")
        code = main(["fuse", "--dets", dets, dets, "--cal", "identity", "--nms", "standard", "--out", str(out)])
        assert code == 0
        fused = json.loads(out.read_text(encoding="utf-8"))
        assert 0 < len(fused) <= 12
        assert "expert 1" in capsys.readouterr().out

    def test_calibrator_count_mismatch(self, fixture_path, tmp_path):
        dets = fixture_path("two_class_dets.json")
        cal = tmp_path / "cal.json"
        cal.write_text(json.dumps({"mode": "ca", "method": "identity", "calibrators": []}), encoding="utf-8")
        assert main(["fuse", "--dets", dets, dets, "--cal", str(cal), "--out", str(tmp_path / "f.json")]) == 1


class TestReliability:
    def test_rows_per_class(self, two_class, tmp_path):
        out = tmp_path / "rel.csv"
        assert main(["reliability", *two_class, "--bins", "25", "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert table.groupby("class").size().tolist() == [25, 25]


class TestSweep:
    def test_thresholds(self, two_class, tmp_path):
        out = tmp_path / "sweep.csv"
        assert main(["sweep", *two_class, "--thresholds", "0.0", "0.5", "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert table["threshold"].tolist() == [0.0, 0.5]
        assert table["surviving_count"].iloc[0] >= table["surviving_count"].iloc[1]

    def test_threshold_sweep_takes_one_file(self, fixture_path, tmp_path):
        dets = fixture_path("two_class_dets.json")
        code = main(["sweep", "--dets", dets, dets, "--gt", fixture_path("two_class_gt.json"), "--out", str(tmp_path / "s.csv")])
        assert code == 1


class TestSyntheticCommands:
    def test_synth_writes_expert_and_truth_files(self, tmp_path):
        assert main(["synth", "--images", "3", "--out-dir", str(tmp_path)]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["expert_0.json", "expert_1.json", "gt.json"]

    def test_oracle_check(self, tmp_path, capsys):
        assert main(["oracle-check", "--scenes", "3", "--out", str(tmp_path / "o.json")]) == 0
        assert "pass 3/3" in capsys.readouterr().out

    def test_demo(self, tmp_path, capsys):
        out = tmp_path / "demo.json"
        assert main(["demo", "--images", "20", "--out", str(out)]) == 0
        payload = json.loads(out.read_text(encoding="utf-8"))
        assert [m["model"] for m in payload["models"]] == ["expert 0", "expert 1", "vanilla MoE", "calibrated MoE"]
        assert "MISCALIBRATED EXPERTS" in capsys.readouterr().out


class TestParser:
    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main(["fuse", "--help"])
        assert exit_info.value.code == 0
        text = " ".join(capsys.readouterr().out.split())
        assert "default: 0.65" in text
        assert "default: identity" in text

    def test_unknown_command_exits_with_one(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main(["train"])
        assert exit_info.value.code == 1
