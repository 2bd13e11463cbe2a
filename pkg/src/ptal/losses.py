"""Training losses for the point-supervised localization head.

Video-level classification is scored with binary cross entropy on the top-k
pooled scores. Point supervision applies a focal binary loss at each labeled
segment, pushing fused class scores up (and the background score down) at
action points and the reverse at mined background points. Two sequence-driven
losses reward high-contrast optimal sequences and pull together pooled
features of same-class action spans against the background spans around them.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np

from . import ndiff
from .mining import PointAnnotation
from .ndiff import Tensor
from .sequence import InstanceSpan

SCORE_CLAMP = 1e-7


class LossError(ValueError):
    """Loss inputs violate their contract."""


@dataclass
class LossConfig:
    """Loss hyperparameters and the weights combining the four terms."""

    focal_power: float = 2.0
    temperature: float = 0.1
    outer_ratio: float = 0.25
    mining_threshold: float = 0.95
    video_weight: float = 1.0
    point_weight: float = 1.0
    score_weight: float = 1.0
    feature_weight: float = 1.0

    def __post_init__(self):
        if self.focal_power < 0:
            raise LossError("focal_power must be non-negative")
        if self.temperature <= 0:
            raise LossError("temperature must be positive")
        if self.outer_ratio <= 0:
            raise LossError("outer_ratio must be positive")
        if not 0 < self.mining_threshold < 1:
            raise LossError("mining_threshold must lie in (0, 1)")
        for name in ("video_weight", "point_weight", "score_weight", "feature_weight"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "LossConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise LossError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class InstanceFeature:
    """A pooled, unit-norm feature for one span of one class's sequence."""

    vector: Tensor
    is_action: bool
    class_id: int


def _clamped(p: Tensor) -> Tensor:
    return ndiff.clip(p, SCORE_CLAMP, 1.0 - SCORE_CLAMP)


def _log_clamped(p: Tensor) -> Tensor:
    return ndiff.log(_clamped(p))


def video_loss(video_scores: Tensor, video_label: np.ndarray) -> Tensor:
    """Binary cross entropy over classes on the video-level scores."""
    label = np.asarray(video_label, dtype=np.float64)
    if video_scores.value.shape != label.shape or label.ndim != 1:
        raise LossError(
            f"score shape {video_scores.value.shape} and label shape {label.shape} differ"
        )
    if not np.all((label == 0) | (label == 1)):
        raise LossError("video label must be binary")
    terms = label * _log_clamped(video_scores) + (1.0 - label) * _log_clamped(
        1.0 - video_scores
    )
    return -terms.sum()


def _point_columns(times: Sequence[int], n_segments: int) -> np.ndarray:
    cols = np.asarray([int(t) for t in times], dtype=np.intp)
    if cols.size and (cols.min() < 1 or cols.max() > n_segments):
        raise LossError(f"point index outside [1, {n_segments}]")
    return cols - 1


def point_action_loss(fused_scores: Tensor, background_scores: Tensor,
                      points: Sequence[PointAnnotation],
                      focal_power: float = 2.0) -> Tensor:
    """Focal binary loss at labeled action segments.

    Each point pulls its own class's fused score toward 1, every other class's
    score toward 0, and the background score toward 0; confident segments are
    down-weighted by the focal factor. Averaged over points.
    """
    if not points:
        raise LossError("no action points")
    n_classes, n_segments = fused_scores.value.shape
    cols = _point_columns([p.t for p in points], n_segments)
    onehot = np.zeros((n_classes, len(points)))
    for i, p in enumerate(points):
        if not 0 <= p.label < n_classes:
            raise LossError(f"point class {p.label} outside [0, {n_classes})")
        onehot[p.label, i] = 1.0
    at_points = fused_scores[:, cols]
    bkg_at = background_scores[cols]
    hit = onehot * (1.0 - at_points) ** focal_power * _log_clamped(at_points)
    miss = (1.0 - onehot) * at_points ** focal_power * _log_clamped(1.0 - at_points)
    not_bkg = bkg_at ** focal_power * _log_clamped(1.0 - bkg_at)
    total = hit.sum() + miss.sum() + not_bkg.sum()
    return -(total / float(len(points)))


def point_background_loss(fused_scores: Tensor, background_scores: Tensor,
                          background_times: Sequence[int],
                          focal_power: float = 2.0) -> Tensor:
    """Focal binary loss at mined background segments; 0 when none are given."""
    if not background_times:
        return ndiff.lift(0.0)
    _, n_segments = fused_scores.value.shape
    cols = _point_columns(background_times, n_segments)
    at_points = fused_scores[:, cols]
    bkg_at = background_scores[cols]
    no_class = at_points ** focal_power * _log_clamped(1.0 - at_points)
    is_bkg = (1.0 - bkg_at) ** focal_power * _log_clamped(bkg_at)
    total = no_class.sum() + is_bkg.sum()
    return -(total / float(len(cols)))


def score_contrastive_loss(completeness_by_class: Mapping[int, Tensor | float],
                           video_label: np.ndarray,
                           focal_power: float = 2.0) -> Tensor:
    """Push each present class's best-sequence contrast score toward 1.

    Expects exactly one completeness score per present class; an incomplete
    or superfluous mapping is an error.
    """
    label = np.asarray(video_label)
    present = {int(c) for c in np.flatnonzero(label == 1)}
    if not present:
        raise LossError("no present class in the video label")
    if set(completeness_by_class) != present:
        raise LossError(
            f"scores given for classes {sorted(completeness_by_class)}, "
            f"video contains {sorted(present)}"
        )
    acc = None
    for c in sorted(completeness_by_class):
        term = (1.0 - ndiff.lift(completeness_by_class[c])) ** focal_power
        acc = term if acc is None else acc + term
    return acc / float(len(present))


def soi_pool(embedded: Tensor, span: InstanceSpan, seed) -> Tensor:
    """Stochastic-of-interest pooling: average three sampled columns, normalize.

    Spans of length three or more contribute one uniformly sampled segment
    from each near-equal third; shorter spans are sampled three times with
    replacement. The draw is fully determined by ``seed``.
    """
    n_segments = embedded.value.shape[1]
    if span.end > n_segments:
        raise LossError(f"span [{span.start}, {span.end}] outside [1, {n_segments}]")
    rng = np.random.default_rng(seed)
    length = span.length
    if length >= 3:
        sizes = [length // 3 + (1 if i < length % 3 else 0) for i in range(3)]
        picks = []
        lo = span.start
        for size in sizes:
            picks.append(int(rng.integers(lo, lo + size)))
            lo += size
    else:
        picks = [int(rng.integers(span.start, span.end + 1)) for _ in range(3)]
    cols = np.asarray(picks, dtype=np.intp) - 1
    pooled = embedded[:, cols].mean(axis=1)
    norm = ((pooled * pooled).sum() + 1e-24) ** 0.5
    return pooled / norm


def feature_contrastive_loss(features: Sequence[InstanceFeature],
                             temperature: float = 0.1) -> Tensor:
    """Contrast same-class action features against that class's other spans.

    Classes with fewer than two action spans are skipped; with no qualifying
    class the loss is 0. For each action anchor the target probability mass is
    the other action spans of the same class, against all other spans of that
    class (action and background alike).
    """
    if temperature <= 0:
        raise LossError("temperature must be positive")
    for f in features:
        norm = float(np.linalg.norm(f.vector.value))
        if abs(norm - 1.0) > 1e-9:
            raise LossError(f"feature for class {f.class_id} is not unit-norm ({norm})")
    by_class: dict[int, list[InstanceFeature]] = {}
    for f in features:
        by_class.setdefault(f.class_id, []).append(f)

    class_losses = []
    for class_id in sorted(by_class):
        group = by_class[class_id]
        anchors = [f for f in group if f.is_action]
        if len(anchors) < 2:
            continue
        anchor_terms = []
        for anchor in group:
            if not anchor.is_action:
                continue
            pos = None
            den = None
            for other in group:
                if other is anchor:
                    continue
                sim = ndiff.exp((anchor.vector * other.vector).sum() / temperature)
                den = sim if den is None else den + sim
                if other.is_action:
                    pos = sim if pos is None else pos + sim
            anchor_terms.append(-ndiff.log(pos / den))
        acc = anchor_terms[0]
        for term in anchor_terms[1:]:
            acc = acc + term
        class_losses.append(acc / float(len(anchor_terms)))

    if not class_losses:
        return ndiff.lift(0.0)
    acc = class_losses[0]
    for term in class_losses[1:]:
        acc = acc + term
    return acc / float(len(class_losses))


def total_loss(video, point, score, feature, config: LossConfig) -> Tensor:
    """Weighted sum of the four training terms."""
    return (
        config.video_weight * ndiff.lift(video)
        + config.point_weight * ndiff.lift(point)
        + config.score_weight * ndiff.lift(score)
        + config.feature_weight * ndiff.lift(feature)
    )
