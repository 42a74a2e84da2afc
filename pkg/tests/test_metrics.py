import numpy as np
import pandas as pd
import pytest

from mocae.errors import CalibrationWarning, DomainError
from mocae.fuse import FusionConfig, standard_nms
from mocae.metrics import (
    average_recall,
    bins_from_pairs,
    build_bins,
    calibrator_grid,
    coco_ap,
    evaluate,
    laace,
    laece,
    laece_precision,
    lamce,
    load_reliability_csv,
    per_class_errors,
    recall_at,
    reliability_export,
    sigma_sweep,
    threshold_sweep,
)
from mocae.calib import CalibratorSet, IsotonicCalibrator, LinearCalibrator, apply_calibrators
from mocae.oracle import make_oracle_moe
from tests.builders import store, truth


class TestBinning:
    def test_single_score_fills_one_bin(self):
        bins = bins_from_pairs([(0.5, 0.3), (0.5, 0.7)], num_bins=10)
        occupied = bins.table[bins.table["count"] > 0]
        assert len(occupied) == 1
        assert occupied["mean_conf"].iloc[0] == 0.5

    def test_edges(self):
        bins = bins_from_pairs([(0.1, 0.1), (0.9, 0.9)], num_bins=25)
        occupied = bins.table[bins.table["count"] > 0]
        assert occupied["bin"].tolist() == [2, 22]
        assert laece(bins) == pytest.approx(0.0)

    def test_score_one_lands_in_the_last_bin(self):
        bins = bins_from_pairs([(1.0, 1.0)], num_bins=4)
        assert bins.table[bins.table["count"] > 0]["bin"].tolist() == [3]

    def test_rows_per_class(self):
        bins = bins_from_pairs([(0.2, 0.1, 1), (0.8, 0.9, 2)], num_bins=25)
        assert len(bins.table) == 50
        assert bins.total == 2

    def test_invalid_bin_count(self):
        with pytest.raises(DomainError):
            bins_from_pairs([(0.5, 0.5)], num_bins=0)


class TestCalibrationErrors:
    def test_perfect_calibration(self):
        bins = bins_from_pairs([(s, s) for s in np.linspace(0.0, 1.0, 40)])
        assert laece(bins) == pytest.approx(0.0, abs=1e-12)
        assert laace(bins) == pytest.approx(0.0, abs=1e-12)
        assert lamce(bins) == pytest.approx(0.0, abs=1e-12)

    def test_single_pair(self):
        bins = bins_from_pairs([(0.9, 0.4)])
        for metric in (laece, laace, lamce):
            assert metric(bins) == pytest.approx(0.5)

    def test_hand_computed_two_bins(self):
        bins = bins_from_pairs([(0.1, 0.3)] * 9 + [(0.9, 0.9)], num_bins=2)
        assert laece(bins) == pytest.approx(0.18)
        assert laace(bins) == pytest.approx(0.10)
        assert lamce(bins) == pytest.approx(0.20)
        assert laace(bins, denominator="total") == pytest.approx(0.10)

    def test_total_denominator_counts_empty_bins(self):
        bins = bins_from_pairs([(0.9, 0.4)], num_bins=5)
        assert laace(bins, denominator="total") == pytest.approx(0.1)

    def test_max_dominates_both_means(self):
        rng = np.random.default_rng(17)
        for _ in range(500):
            n = int(rng.integers(1, 30))
            pairs = list(zip(rng.uniform(0, 1, n), rng.uniform(0, 1, n), rng.integers(0, 3, n)))
            bins = bins_from_pairs(pairs, num_bins=int(rng.integers(1, 26)))
            assert lamce(bins) >= laece(bins) - 1e-12
            assert lamce(bins) >= laace(bins) - 1e-12

    def test_no_detections_warns_and_reports_zero(self):
        with pytest.warns(CalibrationWarning):
            assert laece(bins_from_pairs([])) == 0.0

    def test_oracle_scores_are_calibrated(self):
        dets = store(
            (1, 1, (0, 0, 10, 10), 0.2),
            (1, 1, (2, 1, 10, 10), 0.9),
            (1, 2, (40, 40, 20, 10), 0.4),
            (2, 1, (5, 5, 10, 10), 0.7),
        )
        gts = truth((1, 1, (0, 0, 10, 10)), (1, 2, (42, 40, 20, 10)), (2, 1, (6, 4, 9, 12)))
        oracle = make_oracle_moe([dets], gts)[0]
        assert laece(build_bins(oracle, gts)) <= 1e-9

    def test_per_class_table(self):
        frame = per_class_errors(bins_from_pairs([(0.9, 0.4, 1), (0.5, 0.5, 2)]))
        assert frame["class"].tolist() == [1, 2]
        assert frame["laece"].tolist() == pytest.approx([0.5, 0.0])


class TestPrecisionWeighting:
    def test_tp_and_fp_in_one_bin(self):
        dets = store((1, 1, (0, 0, 10, 10), 1.0), (1, 1, (100, 100, 10, 10), 1.0))
        gts = truth((1, 1, (0, 0, 10, 10)))
        assert laece_precision(dets, gts, num_bins=1) == pytest.approx(0.5)

    def test_all_false_positives(self):
        dets = store((1, 1, (100, 100, 10, 10), 0.8), (1, 1, (200, 100, 10, 10), 0.8))
        gts = truth((1, 1, (0, 0, 10, 10)))
        assert laece_precision(dets, gts) == pytest.approx(0.8)

    def test_calibrated_true_positives(self):
        dets = store((1, 1, (0, 0, 10, 10), 1.0), (1, 1, (50, 0, 10, 5), 0.5))
        gts = truth((1, 1, (0, 0, 10, 10)), (1, 1, (50, 0, 10, 10)))
        assert laece_precision(dets, gts) == pytest.approx(0.0)


class TestAveragePrecision:
    def test_exact_detection(self):
        result = coco_ap(store((1, 1, (0, 0, 10, 10), 0.7)), truth((1, 1, (0, 0, 10, 10))))
        assert result["ap"] == 1.0
        assert result["ap50"] == 1.0
        assert result["ap75"] == 1.0

    def test_no_detections(self):
        assert coco_ap(store(), truth((1, 1, (0, 0, 10, 10))))["ap"] == 0.0

    def test_half_coverage(self):
        dets = store((1, 1, (0, 0, 10, 10), 0.9), (1, 1, (300, 300, 10, 10), 0.5))
        gts = truth((1, 1, (0, 0, 10, 10)), (1, 1, (100, 100, 10, 10)))
        assert coco_ap(dets, gts, [0.5])["ap"] == pytest.approx(51 / 101)
        assert coco_ap(dets, gts, [0.5], rule="continuous")["ap"] == 0.5

    def test_classes_without_ground_truth_are_skipped(self):
        dets = store((1, 1, (0, 0, 10, 10), 0.9), (1, 2, (0, 0, 10, 10), 0.9))
        result = coco_ap(dets, truth((1, 1, (0, 0, 10, 10))))
        assert result["per_class"] == {1: 1.0}

    def test_invariant_under_increasing_transforms(self):
        rng = np.random.default_rng(21)
        rows = [(1, 1, (float(x), 0.0, 10.0, 10.0), float(s)) for x, s in zip(rng.uniform(0, 40, 12), rng.uniform(0.01, 1, 12))]
        dets = store(*rows)
        gts = truth((1, 1, (0, 0, 10, 10)), (1, 1, (20, 0, 10, 10)), (1, 1, (35, 0, 10, 10)))
        squared = dets.with_scores({d.det_id: d.score ** 3 for d in dets})
        assert coco_ap(squared, gts)["ap"] == coco_ap(dets, gts)["ap"]

    def test_invariant_under_increasing_calibrators(self):
        rng = np.random.default_rng(33)
        linear = CalibratorSet("ca", "lr", {None: LinearCalibrator(0.5, 0.2)})
        isotonic = CalibratorSet("ca", "ir", {None: IsotonicCalibrator((0.0, 0.5, 1.0), (0.1, 0.3, 0.95))})
        for _ in range(100):
            n_dets, n_gts = int(rng.integers(1, 15)), int(rng.integers(1, 6))
            rows = [
                (int(rng.integers(1, 3)), int(rng.integers(1, 3)), tuple(float(v) for v in rng.uniform(0, 40, 2)) + (10.0, 10.0), int(rng.integers(1, 100)) / 100)
                for _ in range(n_dets)
            ]
            gt_rows = [
                (int(rng.integers(1, 3)), int(rng.integers(1, 3)), tuple(float(v) for v in rng.uniform(0, 40, 2)) + (10.0, 10.0))
                for _ in range(n_gts)
            ]
            dets, gts = store(*rows), truth(*gt_rows)
            expected = coco_ap(dets, gts)["ap"]
            assert coco_ap(apply_calibrators(dets, linear), gts)["ap"] == expected
            assert coco_ap(apply_calibrators(dets, isotonic), gts)["ap"] == expected

    def test_max_dets_cap(self):
        dets = store((1, 1, (50, 50, 10, 10), 0.9), (1, 1, (0, 0, 10, 10), 0.5))
        gts = truth((1, 1, (0, 0, 10, 10)))
        assert coco_ap(dets, gts, max_dets=1)["ap"] == 0.0
        assert coco_ap(dets, gts, max_dets=2)["ap"] > 0.0

    def test_ap_bounded_by_recall(self):
        dets = store((1, 1, (0, 0, 10, 10), 0.4), (1, 1, (1, 0, 10, 10), 0.9), (1, 1, (40, 0, 10, 7), 0.8))
        gts = truth((1, 1, (0, 0, 10, 10)), (1, 1, (40, 0, 10, 10)), (1, 1, (80, 0, 10, 10)))
        for tau in (0.5, 0.75):
            assert coco_ap(dets, gts, [tau], rule="continuous")["ap"] <= recall_at(dets, gts, tau) + 1e-12

    def test_empty_grid(self):
        with pytest.raises(DomainError):
            coco_ap(store(), truth(), [])


class TestAverageRecall:
    def test_single_detection_at_iou_0_6(self):
        dets = store((1, 1, (0, 0, 10, 6), 0.9))
        gts = truth((1, 1, (0, 0, 10, 10)))
        assert average_recall(dets, gts) == pytest.approx(0.3)

    def test_perfect_and_empty(self):
        gts = truth((1, 1, (0, 0, 10, 10)))
        assert average_recall(store((1, 1, (0, 0, 10, 10), 0.9)), gts) == 1.0
        assert average_recall(store(), gts) == 0.0


class TestReports:
    def _pair(self, fixture_path):
        from mocae.detections import load_detections, load_ground_truth

        return load_detections(fixture_path("two_class_dets.json")), load_ground_truth(fixture_path("two_class_gt.json"))

    def test_evaluate_values_are_bounded(self, fixture_path):
        dets, gts = self._pair(fixture_path)
        report = evaluate(dets, gts)
        for name in ("ap", "ap50", "ap75", "ar", "r50", "r75", "laece", "laace", "lamce"):
            assert 0.0 <= getattr(report, name) <= 1.0
        assert report.num_dets == 6
        assert report.num_gts == 4
        assert "AP50" in report.to_table()

    def test_threshold_sweep_counts_never_grow(self, fixture_path):
        dets, gts = self._pair(fixture_path)
        table = threshold_sweep(dets, gts, [0.0, 0.4, 0.6, 0.9, 1.0])
        counts = table["surviving_count"].tolist()
        assert counts == sorted(counts, reverse=True)
        assert counts[-1] == 0
        assert table["ap"].iloc[0] == coco_ap(standard_nms(dets, 0.65), gts)["ap"]

    def test_sigma_sweep_rows(self, fixture_path):
        dets, gts = self._pair(fixture_path)
        table = sigma_sweep([dets], [CalibratorSet.identity()], gts, [0.2, 0.4], FusionConfig(score_voting=False))
        assert table["sigma_nms"].tolist() == [0.2, 0.4]

    def test_calibrator_grid_rows(self, fixture_path):
        dets, gts = self._pair(fixture_path)
        table = calibrator_grid(dets, gts, dets, gts)
        assert table["calibrator"].tolist() == ["uncalibrated", "CA IR", "CA LR", "CW IR", "CW LR"]


class TestReliabilityExport:
    def test_csv_round_trip(self, tmp_path):
        bins = bins_from_pairs([(0.13, 0.2, 1), (0.77, 0.5, 1), (0.5, 0.25, 3)], num_bins=25)
        path = tmp_path / "rel.csv"
        reliability_export(bins, str(path))
        loaded = load_reliability_csv(str(path))
        assert loaded.num_bins == 25
        pd.testing.assert_frame_equal(loaded.table.reset_index(drop=True), bins.table.reset_index(drop=True), check_dtype=False)

    def test_csv_has_bin_rows_per_class(self, tmp_path):
        bins = bins_from_pairs([(0.13, 0.2, 1), (0.5, 0.25, 3)], num_bins=25)
        path = tmp_path / "rel.csv"
        reliability_export(bins, str(path))
        assert len(path.read_text(encoding="utf-8").splitlines()) == 1 + 50

    def test_empty_bins_give_a_header_only_csv(self, tmp_path):
        path = tmp_path / "empty.csv"
        reliability_export(bins_from_pairs([]), str(path))
        assert path.read_text(encoding="utf-8").strip() == "class,bin,lo,hi,count,mean_conf,mean_iou,precision"

    def test_svg_is_deterministic(self, tmp_path):
        bins = bins_from_pairs([(0.13, 0.2, 1), (0.77, 0.5, 2)], num_bins=10)
        first, second = tmp_path / "a.svg", tmp_path / "b.svg"
        reliability_export(bins, str(first), "svg")
        reliability_export(bins, str(second), "svg")
        assert first.read_bytes() == second.read_bytes()
        assert b"<svg" in first.read_bytes()

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DomainError):
            reliability_export(bins_from_pairs([(0.5, 0.5)]), str(tmp_path / "x.png"), "png")


def test_precision_bins_skip_crowd_matches():
    dets = store((1, 1, (0, 0, 10, 10), 0.9), (1, 1, (50, 50, 10, 10), 0.9))
    gts = truth((1, 1, (0, 0, 10, 10)), (1, 1, (50, 50, 10, 10), True))
    bins = build_bins(dets, gts, num_bins=1, weighting="precision", tau=0.5)
    assert bins.total == 1
