"""Label sequences over a score track and the search for the best one.

A label sequence tiles a video's segments with alternating action and
background spans that agree with the labeled points. Each candidate sequence
is scored by how sharply its spans contrast with their immediate
surroundings: a span scores the mean of its inside values minus the mean over
a flanking window whose width is a fixed fraction of the span length (inside
values are the score track for action spans and one minus it for background
spans). The best sequence under this score is found exactly by enumeration on
short videos and by a budgeted greedy sweep otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import ndiff

SCORING_VARIANTS = ("contrast_both", "contrast_action", "inner_only")

EXHAUSTIVE_SEGMENT_CAP = 16


class SequenceError(ValueError):
    """Structurally invalid sequence or unusable search inputs."""


@dataclass(frozen=True)
class InstanceSpan:
    """One maximal run of segments sharing a category, 1-based inclusive."""

    start: int
    end: int
    is_action: bool

    def __post_init__(self):
        if self.start < 1 or self.end < self.start:
            raise SequenceError(f"bad span bounds [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class LabelSequence:
    """Ordered alternating spans tiling a whole video, for one class."""

    spans: tuple[InstanceSpan, ...]
    class_id: int = 0

    def action_spans(self) -> tuple[InstanceSpan, ...]:
        return tuple(s for s in self.spans if s.is_action)

    def occupancy(self, n_segments: int) -> np.ndarray:
        """Binary vector marking segments covered by action spans."""
        out = np.zeros(n_segments, dtype=np.int8)
        for s in self.spans:
            if s.is_action:
                out[s.start - 1 : s.end] = 1
        return out


@dataclass(frozen=True)
class ScoredSequence:
    sequence: LabelSequence
    score: float


class PrefixRow:
    """Cumulative sums of a score row for O(1) range sums during search."""

    __slots__ = ("_cum", "_n")

    def __init__(self, row: np.ndarray):
        row = np.asarray(row, dtype=np.float64)
        if row.ndim != 1:
            raise SequenceError(f"score row must be 1-D, got shape {row.shape}")
        self._cum = np.concatenate(([0.0], np.cumsum(row)))
        self._n = row.shape[0]

    def __len__(self) -> int:
        return self._n

    def range_sum(self, start: int, end: int) -> float:
        """Sum of segments start..end, 1-based inclusive."""
        return float(self._cum[end] - self._cum[start - 1])


def _row_length(row) -> int:
    return len(row)


def _range_sum(row, start: int, end: int):
    if isinstance(row, PrefixRow):
        return row.range_sum(start, end)
    return row[start - 1 : end].sum()


def _category_sum(row, start: int, end: int, is_action: bool):
    """Sum of the span's inside values: the row for action, flipped for background."""
    s = _range_sum(row, start, end)
    if is_action:
        return s
    return (end - start + 1) - s


def span_contrast(row, start: int, end: int, is_action: bool,
                  outer_ratio: float = 0.25, include_outer: bool = True):
    """Inside mean minus flanking mean for one span of the score row.

    The flank is ceil(outer_ratio * length) segments on the left and
    floor(outer_ratio * length) on the right, clipped to the video. A fully
    clipped flank contributes zero and the flank mean divides by the number
    of surviving flank segments. ``row`` may be an ndarray, a PrefixRow, or a
    differentiable tensor; the result type follows the input.
    """
    n = _row_length(row)
    if not 1 <= start <= end <= n:
        raise SequenceError(f"span [{start}, {end}] outside [1, {n}]")
    length = end - start + 1
    inner = _category_sum(row, start, end, is_action) / float(length)
    if not include_outer:
        return inner
    left = math.ceil(outer_ratio * length)
    right = math.floor(outer_ratio * length)
    lo = max(1, start - left)
    hi = min(n, end + right)
    n_outer = (start - lo) + (hi - end)
    if n_outer == 0:
        return inner
    acc = 0.0
    if lo <= start - 1:
        acc = acc + _category_sum(row, lo, start - 1, is_action)
    if end + 1 <= hi:
        acc = acc + _category_sum(row, end + 1, hi, is_action)
    return inner - acc / float(n_outer)


def _as_span_tuples(spans) -> tuple[tuple[int, int, int], ...]:
    if isinstance(spans, LabelSequence):
        spans = spans.spans
    out = []
    for s in spans:
        if isinstance(s, InstanceSpan):
            out.append((s.start, s.end, 1 if s.is_action else 0))
        else:
            a, b, z = s
            out.append((int(a), int(b), int(z)))
    return tuple(out)


def validate_sequence(spans, n_segments: int,
                      action_points: Sequence[int] = (),
                      background_points: Sequence[int] = ()) -> None:
    """Check tiling, alternation, and agreement with any provided points."""
    tup = _as_span_tuples(spans)
    if not tup:
        raise SequenceError("empty sequence")
    if tup[0][0] != 1 or tup[-1][1] != n_segments:
        raise SequenceError(f"sequence does not tile [1, {n_segments}]")
    for (a, b, z), (a2, b2, z2) in zip(tup, tup[1:]):
        if a2 != b + 1:
            raise SequenceError(f"gap or overlap between segment {b} and {a2}")
        if z2 == z:
            raise SequenceError(f"adjacent spans at segment {a2} share a category")
    for (a, b, _) in tup:
        if not 1 <= a <= b <= n_segments:
            raise SequenceError(f"span [{a}, {b}] outside [1, {n_segments}]")

    def _covering(t: int) -> int:
        for a, b, z in tup:
            if a <= t <= b:
                return z
        raise SequenceError(f"point {t} not covered")

    for t in action_points:
        if _covering(t) != 1:
            raise SequenceError(f"action point {t} falls in a background span")
    for t in background_points:
        if _covering(t) != 0:
            raise SequenceError(f"background point {t} falls in an action span")


def _variant_filter(variant: str, z: int) -> bool:
    if variant == "contrast_both":
        return True
    return z == 1


def completeness_score(row, spans, outer_ratio: float = 0.25,
                       variant: str = "contrast_both"):
    """Mean span contrast of a sequence on one class's score row.

    Under ``contrast_both`` every span is scored against its flank; the other
    variants score action spans only, and ``inner_only`` drops the flank term.
    Sequences whose variant leaves nothing to score get 0. Result type follows
    the row type (float for ndarray/PrefixRow rows, tensor for tensor rows).
    """
    if variant not in SCORING_VARIANTS:
        raise SequenceError(f"unknown scoring variant {variant!r}")
    n = _row_length(row)
    tup = _as_span_tuples(spans)
    validate_sequence(tup, n)
    include_outer = variant != "inner_only"
    scored = [(a, b, z) for a, b, z in tup if _variant_filter(variant, z)]
    if not scored:
        return ndiff.lift(0.0) if isinstance(row, ndiff.Tensor) else 0.0
    acc = None
    for a, b, z in scored:
        c = span_contrast(row, a, b, bool(z), outer_ratio, include_outer)
        acc = c if acc is None else acc + c
    result = acc / float(len(scored))
    return result if isinstance(row, ndiff.Tensor) else float(result)


def sequence_accuracy(sequence: LabelSequence, truth: np.ndarray) -> float:
    """Fraction of segments whose action/background call matches ``truth``."""
    truth = np.asarray(truth)
    if truth.ndim != 1:
        raise SequenceError("truth must be a 1-D binary vector")
    n = truth.shape[0]
    validate_sequence(sequence, n)
    predicted = sequence.occupancy(n)
    return float(np.mean(predicted == (truth != 0)))


def _check_points(action_points, background_points, n_segments,
                  require_both: bool) -> tuple[list[int], list[int]]:
    acts = [int(t) for t in action_points]
    bkgs = [int(t) for t in background_points]
    for name, pts in (("action", acts), ("background", bkgs)):
        if sorted(pts) != pts or len(set(pts)) != len(pts):
            raise SequenceError(f"{name} points must be strictly increasing")
        if pts and (pts[0] < 1 or pts[-1] > n_segments):
            raise SequenceError(f"{name} point outside [1, {n_segments}]")
    if set(acts) & set(bkgs):
        raise SequenceError("action and background points overlap")
    if require_both and (not acts or not bkgs):
        raise SequenceError("budgeted search needs at least one point of each category")
    if not acts and not bkgs:
        raise SequenceError("no points given")
    return acts, bkgs


def _upcoming_categories(acts: list[int], bkgs: list[int], n_segments: int) -> np.ndarray:
    """Category expected next at each t, from two advancing point cursors.

    Each cursor rests on the earliest point of its category not yet passed
    (staying on the last one once exhausted). The nearer cursor names the
    category, flipped when even the nearer one is already behind t.
    """
    ups = np.zeros(n_segments + 1, dtype=np.int8)
    i = j = 0
    for t in range(2, n_segments + 1):
        while i + 1 < len(acts) and acts[i] < t:
            i += 1
        while j + 1 < len(bkgs) and bkgs[j] < t:
            j += 1
        nearer_is_action = acts[i] < bkgs[j]
        z = 1 if nearer_is_action else 0
        if t > min(acts[i], bkgs[j]):
            z = 1 - z
        ups[t] = z
    return ups


def _chain_to_spans(chain, open_start: int, open_end: int, open_z: int) -> tuple:
    spans = [(open_start, open_end, open_z)]
    node = chain
    while node is not None:
        spans.append(node[0])
        node = node[1]
    spans.reverse()
    return tuple(spans)


def _best_by_tie_rule(scored: list[tuple[tuple, float]]) -> tuple[tuple, float]:
    """Highest score; ties prefer fewer spans, then lexicographic boundaries."""
    best_spans, best_score = None, None
    for spans, score in scored:
        if best_spans is None:
            best_spans, best_score = spans, score
            continue
        if score > best_score:
            best_spans, best_score = spans, score
        elif score == best_score:
            if (len(spans), spans) < (len(best_spans), best_spans):
                best_spans = spans
    return best_spans, best_score


def _to_label_sequence(spans: tuple, class_id: int) -> LabelSequence:
    return LabelSequence(
        tuple(InstanceSpan(a, b, bool(z)) for a, b, z in spans), class_id
    )


def greedy_search(row: np.ndarray, action_points: Sequence[int],
                  background_points: Sequence[int], *, budget: int = 25,
                  outer_ratio: float = 0.25, variant: str = "contrast_both",
                  strict_start: bool = False, class_id: int = 0) -> ScoredSequence:
    """Budgeted left-to-right search for the best point-consistent sequence.

    The sweep walks segments in order keeping at most ``budget`` partial
    sequences. At each segment a partial sequence either extends its open span
    or closes it and opens one of the other category, subject to the labeled
    points: a span may never absorb a point of the other category, and a span
    closes only when the category expected next differs from its own. Partial
    sequences are ranked by the running mean of their closed spans' contrasts;
    ones with no closed span yet are never pruned first. By default the sweep
    is seeded with both a matching and an opposite-category first span (unless
    segment 1 is itself a point), so the answer may begin with a short
    point-free run before the first point; ``strict_start`` restricts the seed
    to the first point's own category.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise SequenceError(f"score row must be 1-D, got shape {row.shape}")
    n = row.shape[0]
    if n < 1:
        raise SequenceError("empty score row")
    if budget < 1:
        raise SequenceError(f"budget must be positive, got {budget}")
    if variant not in SCORING_VARIANTS:
        raise SequenceError(f"unknown scoring variant {variant!r}")
    acts, bkgs = _check_points(action_points, background_points, n, require_both=True)

    prefix = PrefixRow(row)
    ups = _upcoming_categories(acts, bkgs, n)
    is_point = np.zeros(n + 1, dtype=bool)
    point_cat = np.full(n + 1, -1, dtype=np.int8)
    for t in acts:
        is_point[t] = True
        point_cat[t] = 1
    for t in bkgs:
        is_point[t] = True
        point_cat[t] = 0
    include_outer = variant != "inner_only"

    first_cat = 1 if acts[0] < bkgs[0] else 0
    if is_point[1]:
        seed_cats = [int(point_cat[1])]
    elif strict_start:
        seed_cats = [first_cat]
    else:
        seed_cats = [first_cat, 1 - first_cat]

    # Candidate: (open_start, open_z, closed_chain, score_sum, score_count,
    #             n_spans, seq_no). The open span ends at the sweep position.
    seq_no = 0
    candidates = []
    for z in seed_cats:
        candidates.append((1, z, None, 0.0, 0, 1, seq_no))
        seq_no += 1

    for t in range(2, n + 1):
        z_up = int(ups[t])
        t_pointed = bool(is_point[t])
        children = []
        for start, z, chain, ssum, scnt, nspans, sno in candidates:
            if z == z_up or not t_pointed:
                children.append((start, z, chain, ssum, scnt, nspans, sno))
            if z != z_up:
                nsum, ncnt = ssum, scnt
                if _variant_filter(variant, z):
                    nsum += span_contrast(prefix, start, t - 1, bool(z),
                                          outer_ratio, include_outer)
                    ncnt += 1
                children.append((t, z_up, ((start, t - 1, z), chain),
                                 nsum, ncnt, nspans + 1, seq_no))
                seq_no += 1
        candidates = children
        if len(candidates) > budget:
            candidates.sort(
                key=lambda c: (
                    -(c[3] / c[4]) if c[4] else -math.inf,
                    c[5], c[0], c[6],
                )
            )
            del candidates[budget:]

    finished = []
    for start, z, chain, _, _, _, _ in candidates:
        spans = _chain_to_spans(chain, start, n, z)
        finished.append((spans, completeness_score(row, spans, outer_ratio, variant)))
    best_spans, best_score = _best_by_tie_rule(finished)
    return ScoredSequence(_to_label_sequence(best_spans, class_id), float(best_score))


def candidate_sequences(n_segments: int, action_points: Sequence[int],
                        background_points: Sequence[int],
                        strict_start: bool = False) -> list[tuple]:
    """Every point-consistent sequence the budgeted sweep could produce.

    Built by direct recursion over span boundaries: spans never absorb a
    point of the other category, every span contains at least one point,
    except that the first span may be point-free when dual seeding is in
    effect (it then precedes the earliest point). Returns span-tuple lists
    ordered deterministically.
    """
    acts, bkgs = _check_points(action_points, background_points, n_segments,
                               require_both=False)
    point_cat = np.full(n_segments + 1, -1, dtype=np.int8)
    for t in acts:
        point_cat[t] = 1
    for t in bkgs:
        point_cat[t] = 0

    if point_cat[1] >= 0:
        seed_cats = [int(point_cat[1])]
    elif strict_start:
        earliest = min(acts[0] if acts else n_segments + 1,
                       bkgs[0] if bkgs else n_segments + 1)
        seed_cats = [int(point_cat[earliest])]
    else:
        seed_cats = [1, 0]

    results: list[tuple] = []

    def extend(t: int, start: int, z: int, has_point: bool, closed: list):
        is_first = not closed
        span_ok = has_point or (is_first and not strict_start)
        if t > n_segments:
            if span_ok:
                results.append(tuple(closed + [(start, n_segments, z)]))
            return
        cat = int(point_cat[t])
        if cat in (-1, z):
            extend(t + 1, start, z, has_point or cat == z, closed)
        if span_ok and cat in (-1, 1 - z):
            closed.append((start, t - 1, z))
            extend(t + 1, t, 1 - z, cat == 1 - z, closed)
            closed.pop()

    for z0 in seed_cats:
        cat1 = int(point_cat[1])
        extend(2, 1, z0, cat1 == z0, [])
    return results


def exhaustive_search(row: np.ndarray, action_points: Sequence[int],
                      background_points: Sequence[int], *,
                      outer_ratio: float = 0.25, variant: str = "contrast_both",
                      strict_start: bool = False, class_id: int = 0,
                      max_segments: int = EXHAUSTIVE_SEGMENT_CAP) -> ScoredSequence:
    """Score every candidate sequence and return the exact best.

    Only for short videos; refuses rows longer than ``max_segments``. Ties
    break toward fewer spans, then lexicographic span boundaries.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise SequenceError(f"score row must be 1-D, got shape {row.shape}")
    n = row.shape[0]
    if n > max_segments:
        raise SequenceError(
            f"exhaustive search is capped at {max_segments} segments, got {n}"
        )
    if variant not in SCORING_VARIANTS:
        raise SequenceError(f"unknown scoring variant {variant!r}")
    all_spans = candidate_sequences(n, action_points, background_points, strict_start)
    scored = [(spans, completeness_score(row, spans, outer_ratio, variant))
              for spans in all_spans]
    best_spans, best_score = _best_by_tie_rule(scored)
    return ScoredSequence(_to_label_sequence(best_spans, class_id), float(best_score))
