"""Localization evaluation: temporal IoU, average precision, correlations.

Spans are 1-based inclusive segment ranges, so a span's length is
end - start + 1 and adjacent non-overlapping spans share no segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from . import model
from .sequence import span_contrast

if TYPE_CHECKING:
    from .model import HeadParams

DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
DEFAULT_AVERAGE_RANGES = ((0.1, 0.5), (0.3, 0.7), (0.1, 0.7))


class MetricsError(ValueError):
    """Evaluation inputs violate their contract."""


@dataclass(frozen=True)
class GroundTruthInstance:
    """One annotated action instance."""

    video_id: str
    class_id: int
    start: int
    end: int

    def __post_init__(self):
        if self.start < 1 or self.end < self.start:
            raise MetricsError(f"bad instance bounds [{self.start}, {self.end}]")


def tiou(span_a: tuple[int, int], span_b: tuple[int, int]) -> float:
    """Temporal IoU of two inclusive segment spans."""
    a1, a2 = span_a
    b1, b2 = span_b
    if a2 < a1 or b2 < b1:
        raise MetricsError("spans must satisfy start <= end")
    inter = min(a2, b2) - max(a1, b1) + 1
    if inter <= 0:
        return 0.0
    union = (a2 - a1 + 1) + (b2 - b1 + 1) - inter
    return inter / union


def average_precision(detections: Sequence[tuple[str, int, int, float]],
                      ground_truths: Sequence[tuple[str, int, int]],
                      iou_threshold: float) -> float | None:
    """AP for one class at one IoU threshold.

    ``detections`` are (video_id, start, end, confidence); ``ground_truths``
    are (video_id, start, end). Detections are ranked by confidence (ties:
    earlier start first), each matching at most one still-unmatched ground
    truth whose IoU strictly exceeds the threshold. AP is the sum of the
    precision at every true-positive rank, divided by the ground-truth count.
    Returns None when the class has no ground truth.
    """
    n_gt = len(ground_truths)
    if n_gt == 0:
        return None
    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i][3], detections[i][1], detections[i][2], detections[i][0]),
    )
    gt_by_video: dict[str, list[int]] = {}
    for idx, (vid, _, _) in enumerate(ground_truths):
        gt_by_video.setdefault(vid, []).append(idx)
    matched = [False] * n_gt
    precision_sum = 0.0
    n_tp = 0
    for rank, det_idx in enumerate(order, start=1):
        vid, start, end, _ = detections[det_idx]
        best_iou, best_gt = 0.0, None
        for gi in gt_by_video.get(vid, ()):
            if matched[gi]:
                continue
            overlap = tiou((start, end), ground_truths[gi][1:3])
            if overlap > best_iou:
                best_iou, best_gt = overlap, gi
        if best_gt is not None and best_iou > iou_threshold:
            matched[best_gt] = True
            n_tp += 1
            precision_sum += n_tp / rank
    # one division at the end so a run of perfect matches sums to exactly 1
    return precision_sum / n_gt


@dataclass
class EvalReport:
    """AP per class and threshold, mAP per threshold, and range averages."""

    iou_thresholds: tuple[float, ...]
    ap: dict              # {threshold: {class_id: float | None}}
    map_at: dict          # {threshold: float}
    average_map: dict     # {"lo:hi": float}
    excluded_classes: list[int]
    n_proposals: int
    n_ground_truth: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "ap": {f"{t:g}": {str(c): v for c, v in row.items()}
                   for t, row in self.ap.items()},
            "map_at": {f"{t:g}": v for t, v in self.map_at.items()},
            "average_map": dict(self.average_map),
            "excluded_classes": list(self.excluded_classes),
            "n_proposals": self.n_proposals,
            "n_ground_truth": self.n_ground_truth,
            "notes": list(self.notes),
        }


def evaluate(proposals_by_video: Mapping[str, Sequence],
             ground_truth: Sequence[GroundTruthInstance],
             iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
             average_ranges: Sequence[tuple[float, float]] = DEFAULT_AVERAGE_RANGES,
             video_ids: Iterable[str] | None = None) -> EvalReport:
    """Score proposals against ground truth across IoU thresholds.

    ``proposals_by_video`` maps video id to proposal objects carrying
    class_id, start, end, confidence. The known video universe is
    ``video_ids`` when given, else the videos appearing in the ground truth;
    proposals for any other video are an error. Classes with no ground truth
    are excluded from mAP and listed in the report notes.
    """
    thresholds = tuple(float(t) for t in iou_thresholds)
    if not thresholds:
        raise MetricsError("no IoU thresholds given")
    known = set(video_ids) if video_ids is not None else {g.video_id for g in ground_truth}
    unknown = sorted(set(proposals_by_video) - known)
    if unknown:
        raise MetricsError(f"proposals reference unknown video ids: {unknown}")

    gt_by_class: dict[int, list[tuple[str, int, int]]] = {}
    for g in ground_truth:
        gt_by_class.setdefault(g.class_id, []).append((g.video_id, g.start, g.end))
    det_by_class: dict[int, list[tuple[str, int, int, float]]] = {}
    n_proposals = 0
    for vid in sorted(proposals_by_video):
        for p in proposals_by_video[vid]:
            det_by_class.setdefault(p.class_id, []).append(
                (vid, p.start, p.end, p.confidence)
            )
            n_proposals += 1

    classes = sorted(set(gt_by_class) | set(det_by_class))
    scored_classes = [c for c in classes if c in gt_by_class]
    excluded = [c for c in classes if c not in gt_by_class]

    ap: dict[float, dict[int, float | None]] = {}
    map_at: dict[float, float] = {}
    for t in thresholds:
        row = {}
        for c in classes:
            row[c] = average_precision(det_by_class.get(c, []), gt_by_class.get(c, []), t)
        ap[t] = row
        if scored_classes:
            map_at[t] = float(np.mean([row[c] for c in scored_classes]))
        else:
            map_at[t] = 0.0

    average_map = {}
    for lo, hi in average_ranges:
        within = [map_at[t] for t in thresholds if lo - 1e-9 <= t <= hi + 1e-9]
        if not within:
            raise MetricsError(f"average range {lo}:{hi} covers no threshold")
        average_map[f"{lo:g}:{hi:g}"] = float(np.mean(within))

    notes = []
    if excluded:
        notes.append(f"classes without ground truth excluded from mAP: {excluded}")
    return EvalReport(
        iou_thresholds=thresholds,
        ap=ap,
        map_at=map_at,
        average_map=average_map,
        excluded_classes=excluded,
        n_proposals=n_proposals,
        n_ground_truth=len(ground_truth),
        notes=notes,
    )


def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; rejects degenerate (constant) inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricsError("inputs must be 1-D arrays of equal length")
    if x.shape[0] < 2:
        raise MetricsError("need at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(np.dot(dx, dx))
    vy = float(np.dot(dy, dy))
    if vx == 0.0 or vy == 0.0:
        raise MetricsError("zero variance input")
    return float(np.dot(dx, dy) / np.sqrt(vx * vy))


@dataclass
class AnalysisResult:
    """Random-interval study of which span statistic tracks IoU better."""

    video_ids: list[str]
    class_ids: list[int]
    starts: list[int]
    ends: list[int]
    ious: np.ndarray
    inner_means: np.ndarray
    contrasts: np.ndarray
    r_inner: float | None
    r_contrast: float | None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_samples": len(self.starts),
            "r_inner": self.r_inner,
            "r_contrast": self.r_contrast,
            "notes": list(self.notes),
        }


def contrast_iou_analysis(records: Sequence, params: "HeadParams",
                          n_samples: int = 2000, seed: int = 0,
                          outer_ratio: float = 0.25) -> AnalysisResult:
    """Sample random intervals and correlate two span statistics with IoU.

    For each sample a video, one of its annotated classes, and a random
    interval are drawn; the interval's plain inside mean and its
    flank-contrast score are both correlated against the interval's best IoU
    with that class's ground truth. Degenerate correlations are reported as
    None with a note rather than an error.
    """
    if n_samples < 2:
        raise MetricsError("need at least two samples")
    usable = [r for r in records if r.ground_truth]
    if not usable:
        raise MetricsError("no video has ground truth")
    rng = np.random.default_rng([int(seed), 0xA7A1])
    fused_cache: dict[str, np.ndarray] = {}
    video_ids, class_ids, starts, ends = [], [], [], []
    ious = np.empty(n_samples)
    inners = np.empty(n_samples)
    contrasts = np.empty(n_samples)
    for k in range(n_samples):
        rec = usable[int(rng.integers(len(usable)))]
        if rec.video_id not in fused_cache:
            fused_cache[rec.video_id] = model.forward(rec.features, params).fused_scores.value
        fused = fused_cache[rec.video_id]
        classes = sorted({g.class_id for g in rec.ground_truth})
        cls = int(classes[int(rng.integers(len(classes)))])
        n = fused.shape[1]
        start = int(rng.integers(1, n + 1))
        end = int(rng.integers(start, n + 1))
        row = fused[cls]
        best = 0.0
        for g in rec.ground_truth:
            if g.class_id == cls:
                best = max(best, tiou((start, end), (g.start, g.end)))
        video_ids.append(rec.video_id)
        class_ids.append(cls)
        starts.append(start)
        ends.append(end)
        ious[k] = best
        inners[k] = float(row[start - 1 : end].mean())
        contrasts[k] = span_contrast(row, start, end, True, outer_ratio)
    notes = []
    try:
        r_inner = pearson_r(inners, ious)
    except MetricsError as err:
        r_inner, notes = None, notes + [f"inner-mean correlation degenerate: {err}"]
    try:
        r_contrast = pearson_r(contrasts, ious)
    except MetricsError as err:
        r_contrast = None
        notes.append(f"contrast correlation degenerate: {err}")
    return AnalysisResult(video_ids, class_ids, starts, ends,
                          ious, inners, contrasts, r_inner, r_contrast, notes)
