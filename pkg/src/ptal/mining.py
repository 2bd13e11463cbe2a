"""Point annotations and pseudo-background mining.

Each action instance carries exactly one labeled segment index. Background
segments are never annotated by hand; they are mined from the background
score track between adjacent action points, or globally from the top-scoring
segments, depending on the configured mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BACKGROUND_LABEL = -1

MINING_MODES = ("sectional_fill", "sectional", "global")


class MiningError(ValueError):
    """Invalid points or mining configuration."""


@dataclass(frozen=True)
class PointAnnotation:
    """One labeled segment: 1-based index plus class (or BACKGROUND_LABEL)."""

    t: int
    label: int


@dataclass
class PointSet:
    """Action points from annotation plus any mined pseudo-background points."""

    action: list[PointAnnotation] = field(default_factory=list)
    background: list[PointAnnotation] = field(default_factory=list)

    def validate(self, n_segments: int) -> None:
        for group_name, group in (("action", self.action), ("background", self.background)):
            times = [p.t for p in group]
            if any(not 1 <= t <= n_segments for t in times):
                raise MiningError(f"{group_name} point index outside [1, {n_segments}]")
            if sorted(times) != times or len(set(times)) != len(times):
                raise MiningError(f"{group_name} points must be strictly increasing")
        overlap = {p.t for p in self.action} & {p.t for p in self.background}
        if overlap:
            raise MiningError(f"action and background points overlap at {sorted(overlap)}")
        if any(p.label == BACKGROUND_LABEL for p in self.action):
            raise MiningError("action points must carry a class label")

    def action_times(self) -> list[int]:
        return [p.t for p in self.action]

    def background_times(self) -> list[int]:
        return [p.t for p in self.background]

    def present_classes(self) -> list[int]:
        return sorted({p.label for p in self.action})

    def video_label(self, n_classes: int) -> np.ndarray:
        """Binary per-class vector: 1 where any action point has that class."""
        label = np.zeros(n_classes, dtype=np.float64)
        for p in self.action:
            if not 0 <= p.label < n_classes:
                raise MiningError(f"class {p.label} outside [0, {n_classes})")
            label[p.label] = 1.0
        return label


def _argmax_earliest(values: np.ndarray, offset: int) -> int:
    """1-based index of the max over a section, earliest segment on ties."""
    return offset + int(np.argmax(values))


def mine_pseudo_background(
    background_scores: np.ndarray,
    action_points: list[int],
    threshold: float = 0.95,
    mode: str = "sectional_fill",
    global_ratio: int = 5,
) -> list[int]:
    """Pick likely-background segment indices from the background score track.

    Sectional modes look between each pair of adjacent action points and take
    the segments scoring above ``threshold`` there, falling back to the
    section's argmax so every section contributes at least one point.
    ``sectional_fill`` additionally takes everything between a section's first
    and last selected segment. ``global`` ignores sections and takes the top
    ``global_ratio`` * (number of action points) segments over the whole video,
    never on an action point. Returns sorted 1-based indices.
    """
    scores = np.asarray(background_scores, dtype=np.float64)
    if scores.ndim != 1:
        raise MiningError(f"background scores must be 1-D, got shape {scores.shape}")
    t_total = scores.shape[0]
    if mode not in MINING_MODES:
        raise MiningError(f"unknown mining mode {mode!r}")
    if not action_points:
        raise MiningError("mining requires at least one action point")
    pts = list(action_points)
    if sorted(pts) != pts or len(set(pts)) != len(pts):
        raise MiningError("action points must be strictly increasing")
    if pts[0] < 1 or pts[-1] > t_total:
        raise MiningError(f"action point outside [1, {t_total}]")

    if mode == "global":
        budget = min(global_ratio * len(pts), t_total - len(pts))
        forbidden = set(pts)
        order = np.argsort(-scores, kind="stable")
        chosen = []
        for idx in order:
            seg = int(idx) + 1
            if seg in forbidden:
                continue
            chosen.append(seg)
            if len(chosen) == budget:
                break
        return sorted(chosen)

    mined: list[int] = []
    for left, right in zip(pts[:-1], pts[1:]):
        lo, hi = left + 1, right - 1  # interior of the section, 1-based
        if lo > hi:
            continue
        section = scores[lo - 1 : hi]
        above = [lo + i for i in range(section.shape[0]) if section[i] > threshold]
        if not above:
            above = [_argmax_earliest(section, lo)]
        if mode == "sectional_fill":
            mined.extend(range(above[0], above[-1] + 1))
        else:
            mined.extend(above)
    return sorted(set(mined))
