"""Evaluation: temporal IoU, AP, report assembly, correlations."""

import numpy as np
import pytest

from ptal.inference import Proposal
from ptal.metrics import (
    AnalysisResult,
    GroundTruthInstance,
    MetricsError,
    average_precision,
    contrast_iou_analysis,
    evaluate,
    pearson_r,
    tiou,
)
from ptal.model import init_head
from ptal.synthio import SyntheticSpec, generate_dataset


def ap_reference(dets, gts, threshold):
    """Independent transcription of the ranking-and-matching rule."""
    if not gts:
        return None
    order = sorted(dets, key=lambda d: (-d[3], d[1], d[2], d[0]))
    unmatched = list(range(len(gts)))
    flags = []
    for vid, s, e, _ in order:
        best_i, best_o = None, 0.0
        for gi in unmatched:
            gvid, gs, ge = gts[gi]
            if gvid != vid:
                continue
            inter = min(e, ge) - max(s, gs) + 1
            if inter <= 0:
                overlap = 0.0
            else:
                overlap = inter / ((e - s + 1) + (ge - gs + 1) - inter)
            if overlap > best_o:
                best_o, best_i = overlap, gi
        if best_i is not None and best_o > threshold:
            unmatched.remove(best_i)
            flags.append(True)
        else:
            flags.append(False)
    ap = 0.0
    n_tp = 0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            n_tp += 1
            ap += (n_tp / rank) / len(gts)
    return ap


def test_tiou_identical_and_disjoint():
    assert tiou((3, 7), (3, 7)) == 1.0
    assert tiou((1, 4), (6, 9)) == 0.0


def test_tiou_hand_counted_overlap():
    # spans (1,10) and (6,15): 5 shared segments of 15 total
    assert tiou((1, 10), (6, 15)) == pytest.approx(5 / 15, abs=1e-15)


def test_tiou_adjacent_spans_do_not_touch():
    assert tiou((1, 5), (6, 10)) == 0.0


def test_tiou_rejects_inverted_spans():
    with pytest.raises(MetricsError):
        tiou((5, 3), (1, 2))


def test_ap_single_exact_proposal():
    dets = [("v", 1, 10, 0.9)]
    gts = [("v", 1, 10)]
    assert average_precision(dets, gts, 0.5) == pytest.approx(1.0)


def test_ap_tp_fp_tp_hand_value():
    # ranks: TP (prec 1/1), FP, TP (prec 2/3); two ground truths
    # AP = 1/2 * (1 + 2/3) = 5/6
    gts = [("v", 1, 10), ("v", 21, 30)]
    dets = [("v", 1, 10, 0.9), ("v", 41, 50, 0.8), ("v", 21, 30, 0.7)]
    assert average_precision(dets, gts, 0.5) == pytest.approx(5 / 6, abs=1e-12)


def test_ap_all_misses_is_zero():
    dets = [("v", 40, 50, 0.9), ("v", 60, 70, 0.8)]
    gts = [("v", 1, 10)]
    assert average_precision(dets, gts, 0.5) == 0.0


def test_ap_without_ground_truth_is_none():
    assert average_precision([("v", 1, 2, 0.5)], [], 0.5) is None


def test_ap_each_ground_truth_matches_at_most_once():
    # second identical proposal cannot reuse the matched ground truth
    gts = [("v", 1, 10)]
    dets = [("v", 1, 10, 0.9), ("v", 1, 10, 0.8)]
    # rank 1 TP (prec 1), rank 2 FP; AP = 1.0
    assert average_precision(dets, gts, 0.5) == pytest.approx(1.0)


def test_ap_matches_independent_reference_on_random_cases():
    rng = np.random.default_rng(0xA9)
    for _ in range(200):
        n_gt = int(rng.integers(0, 5))
        n_det = int(rng.integers(0, 8))
        videos = ["a", "b"]
        gts = []
        for _ in range(n_gt):
            s = int(rng.integers(1, 40))
            gts.append((videos[int(rng.integers(2))], s, s + int(rng.integers(0, 12))))
        dets = []
        for _ in range(n_det):
            s = int(rng.integers(1, 40))
            dets.append((videos[int(rng.integers(2))], s,
                         s + int(rng.integers(0, 12)),
                         round(float(rng.random()), 1)))
        threshold = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
        got = average_precision(dets, gts, threshold)
        want = ap_reference(dets, gts, threshold)
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-12)


def test_evaluate_ground_truth_as_proposals_is_perfect():
    gt = [
        GroundTruthInstance("v1", 0, 5, 14),
        GroundTruthInstance("v1", 1, 30, 38),
        GroundTruthInstance("v2", 0, 2, 9),
    ]
    proposals = {}
    for g in gt:
        proposals.setdefault(g.video_id, []).append(
            Proposal(g.class_id, g.start, g.end, 0.9))
    report = evaluate(proposals, gt)
    assert all(v == pytest.approx(1.0) for v in report.map_at.values())
    assert all(v == pytest.approx(1.0) for v in report.average_map.values())
    assert report.excluded_classes == []
    assert report.n_proposals == 3
    assert report.n_ground_truth == 3


def test_evaluate_empty_proposals_scores_zero():
    gt = [GroundTruthInstance("v1", 0, 5, 14)]
    report = evaluate({}, gt)
    assert all(v == 0.0 for v in report.map_at.values())
    assert all(v == 0.0 for v in report.average_map.values())


def test_evaluate_excludes_classes_without_ground_truth():
    gt = [GroundTruthInstance("v1", 0, 5, 14)]
    proposals = {"v1": [Proposal(0, 5, 14, 0.9), Proposal(1, 5, 14, 0.8)]}
    report = evaluate(proposals, gt)
    assert report.excluded_classes == [1]
    assert any("excluded" in note for note in report.notes)
    assert all(v == pytest.approx(1.0) for v in report.map_at.values())


def test_evaluate_rejects_unknown_video_ids():
    gt = [GroundTruthInstance("v1", 0, 5, 14)]
    with pytest.raises(MetricsError, match="unknown video"):
        evaluate({"ghost": [Proposal(0, 1, 2, 0.5)]}, gt)


def test_evaluate_accepts_explicit_video_universe():
    gt = [GroundTruthInstance("v1", 0, 5, 14)]
    proposals = {"v2": [Proposal(0, 1, 2, 0.5)]}
    report = evaluate(proposals, gt, video_ids=["v1", "v2"])
    assert all(v == 0.0 for v in report.map_at.values())


def test_evaluate_rejects_empty_threshold_list_and_uncovered_range():
    gt = [GroundTruthInstance("v1", 0, 5, 14)]
    with pytest.raises(MetricsError, match="threshold"):
        evaluate({}, gt, iou_thresholds=())
    with pytest.raises(MetricsError, match="covers no threshold"):
        evaluate({}, gt, iou_thresholds=(0.5,), average_ranges=((0.8, 0.9),))


def test_evaluate_report_serializes_to_plain_types():
    gt = [GroundTruthInstance("v1", 0, 5, 14)]
    doc = evaluate({"v1": [Proposal(0, 5, 14, 0.9)]}, gt).to_dict()
    assert doc["map_at"]["0.5"] == pytest.approx(1.0)
    assert doc["average_map"]["0.1:0.7"] == pytest.approx(1.0)
    assert isinstance(doc["ap"]["0.5"]["0"], float)


def test_pearson_exact_linear_relations():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson_r(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)
    assert pearson_r(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_pearson_textbook_value():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    y = np.array([2.0, 4.0, 5.0, 4.0, 5.0])
    # covariance 6 against variances 10 and 6: r = 6 / sqrt(60)
    assert pearson_r(x, y) == pytest.approx(6 / np.sqrt(60), abs=1e-12)


def test_pearson_rejects_degenerate_inputs():
    with pytest.raises(MetricsError, match="zero variance"):
        pearson_r(np.array([1.0, 1.0, 1.0]), np.array([1.0, 2.0, 3.0]))
    with pytest.raises(MetricsError, match="two samples"):
        pearson_r(np.array([1.0]), np.array([2.0]))
    with pytest.raises(MetricsError, match="equal length"):
        pearson_r(np.array([1.0, 2.0]), np.array([1.0, 2.0, 3.0]))


def analysis_records():
    spec = SyntheticSpec(
        n_videos=3, n_classes=2, feature_dim=6,
        segment_range=(25, 35), instances_range=(1, 2), length_range=(4, 8),
        seed=21,
    )
    return generate_dataset(spec)


def test_analysis_returns_consistent_sample_table():
    records = analysis_records()
    params = init_head(6, 2, seed=0)
    result = contrast_iou_analysis(records, params, n_samples=200, seed=1)
    assert len(result.starts) == 200
    assert len(result.ends) == len(result.video_ids) == len(result.class_ids)
    assert result.ious.shape == (200,)
    assert all(s <= e for s, e in zip(result.starts, result.ends))
    assert ((result.ious >= 0.0) & (result.ious <= 1.0)).all()
    assert result.r_inner is not None
    assert -1.0 <= result.r_inner <= 1.0
    assert result.r_contrast is not None


def test_analysis_is_deterministic_for_fixed_seed():
    records = analysis_records()
    params = init_head(6, 2, seed=0)
    a = contrast_iou_analysis(records, params, n_samples=100, seed=9)
    b = contrast_iou_analysis(records, params, n_samples=100, seed=9)
    assert a.starts == b.starts and a.ends == b.ends
    np.testing.assert_array_equal(a.contrasts, b.contrasts)
    assert a.r_inner == b.r_inner


def test_analysis_reports_degenerate_correlation_as_note():
    records = analysis_records()
    # an all-zero head scores every segment 0.25, so the inside mean has
    # zero variance and its correlation is undefined
    params = init_head(6, 2, seed=0)
    for t in params.tensors():
        t.value[...] = 0.0
    result = contrast_iou_analysis(records, params, n_samples=50, seed=2)
    assert result.r_inner is None
    assert any("inner" in note for note in result.notes)


def test_analysis_input_validation():
    records = analysis_records()
    params = init_head(6, 2, seed=0)
    with pytest.raises(MetricsError, match="two samples"):
        contrast_iou_analysis(records, params, n_samples=1)
    stripped = [type(records[0])(video_id=r.video_id, features=r.features,
                                 ground_truth=[], points=r.points)
                for r in records]
    with pytest.raises(MetricsError, match="ground truth"):
        contrast_iou_analysis(stripped, params, n_samples=10)


def test_ground_truth_instance_validates_bounds():
    with pytest.raises(MetricsError):
        GroundTruthInstance("v", 0, 5, 4)
    with pytest.raises(MetricsError):
        GroundTruthInstance("v", 0, 0, 4)
