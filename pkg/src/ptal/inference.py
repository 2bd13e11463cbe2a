"""Proposal generation and suppression on fused segment scores.

Classes whose video-level score clears a gate contribute proposals: the
maximal runs of segments whose fused score exceeds each threshold in a sweep
list. Every proposal's confidence is its span's flank-contrast score, the
same statistic the sequence search optimizes, so duplicate spans found at
different thresholds collapse to one proposal.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np

from .sequence import span_contrast


class InferenceError(ValueError):
    """Invalid inference configuration or inputs."""


@dataclass(frozen=True)
class Proposal:
    """One scored candidate instance, 1-based inclusive segment span."""

    class_id: int
    start: int
    end: int
    confidence: float

    def __post_init__(self):
        if self.start < 1 or self.end < self.start:
            raise InferenceError(f"bad proposal bounds [{self.start}, {self.end}]")


@dataclass
class InferenceConfig:
    video_threshold: float = 0.5
    segment_thresholds: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)
    nms_iou: float = 0.6
    outer_ratio: float = 0.25

    def __post_init__(self):
        self.segment_thresholds = tuple(float(t) for t in self.segment_thresholds)
        if not self.segment_thresholds:
            raise InferenceError("segment_thresholds must be non-empty")
        if any(t < 0 for t in self.segment_thresholds):
            raise InferenceError("segment thresholds must be non-negative")
        if not 0 < self.nms_iou <= 1:
            raise InferenceError("nms_iou must lie in (0, 1]")
        if self.outer_ratio <= 0:
            raise InferenceError("outer_ratio must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segment_thresholds"] = list(self.segment_thresholds)
        return d

    @classmethod
    def from_mapping(cls, data: Mapping) -> "InferenceConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise InferenceError(f"unknown inference config keys: {sorted(unknown)}")
        return cls(**data)


def _runs_above(row: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Maximal 1-based runs where row > threshold."""
    mask = row > threshold
    runs = []
    start = None
    for i, on in enumerate(mask):
        if on and start is None:
            start = i + 1
        elif not on and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, mask.shape[0]))
    return runs


def generate_proposals(fused_scores: np.ndarray, video_scores: np.ndarray,
                       config: InferenceConfig) -> list[Proposal]:
    """Threshold-sweep proposals for one video, deduplicated per class.

    Only classes with video score >= the gate produce proposals. Each
    threshold contributes the maximal runs scoring strictly above it; a run's
    confidence is its flank-contrast on the class's fused row. Identical
    (class, span) pairs from different thresholds are emitted once. Results
    are sorted by class, then span.
    """
    fused = np.asarray(fused_scores, dtype=np.float64)
    scores = np.asarray(video_scores, dtype=np.float64)
    if fused.ndim != 2:
        raise InferenceError(f"fused scores must be [C, T], got shape {fused.shape}")
    if scores.shape != (fused.shape[0],):
        raise InferenceError(
            f"video scores shape {scores.shape} does not match {fused.shape[0]} classes"
        )
    proposals = []
    for c in range(fused.shape[0]):
        if scores[c] < config.video_threshold:
            continue
        row = fused[c]
        seen: set[tuple[int, int]] = set()
        for threshold in config.segment_thresholds:
            for start, end in _runs_above(row, threshold):
                if (start, end) in seen:
                    continue
                seen.add((start, end))
                conf = span_contrast(row, start, end, True, config.outer_ratio)
                proposals.append(Proposal(c, start, end, float(conf)))
    proposals.sort(key=lambda p: (p.class_id, p.start, p.end))
    return proposals


def _span_iou(a: Proposal, b: Proposal) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = (a.end - a.start + 1) + (b.end - b.start + 1) - inter
    return inter / union


def temporal_nms(proposals: Sequence[Proposal], iou_threshold: float = 0.6) -> list[Proposal]:
    """Greedy per-class suppression of proposals overlapping a kept one.

    Proposals are visited in confidence order (ties: earlier start, then
    smaller class id); a proposal is dropped when its IoU with an already kept
    same-class proposal strictly exceeds the threshold. Output keeps the
    visiting order, so confidences are non-increasing per class.
    """
    if not 0 < iou_threshold <= 1:
        raise InferenceError("iou_threshold must lie in (0, 1]")
    ordered = sorted(proposals, key=lambda p: (-p.confidence, p.start, p.class_id, p.end))
    kept: list[Proposal] = []
    for cand in ordered:
        clash = any(
            k.class_id == cand.class_id and _span_iou(k, cand) > iou_threshold
            for k in kept
        )
        if not clash:
            kept.append(cand)
    return kept
