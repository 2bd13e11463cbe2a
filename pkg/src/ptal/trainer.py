"""Adam training loop tying the head, mining, search, and losses together.

Each step runs the head on every video of the batch, mines pseudo-background
points from the background track, searches for each present class's best
label sequence, and descends the weighted sum of the four losses. Everything
is seeded: batch order, initialization, and the per-span feature sampling all
derive from the config seed, so two runs with the same inputs produce
identical parameters and reports (timings are reported separately).
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np

from . import losses, model, ndiff
from .losses import InstanceFeature, LossConfig
from .mining import MINING_MODES, mine_pseudo_background
from .model import HeadParams
from .ndiff import NonFiniteError, Tape
from .sequence import (SCORING_VARIANTS, LabelSequence, completeness_score,
                       greedy_search, sequence_accuracy)
from .synthio import VideoRecord

FREQUENCIES = ("per_step", "per_epoch")


class TrainingError(RuntimeError):
    """Training aborted or misconfigured."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    budget: int = 25
    scoring_variant: str = "contrast_both"
    search_frequency: str = "per_step"
    mining_mode: str = "sectional_fill"
    mining_frequency: str = "per_step"
    strict_start: bool = False
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, Mapping):
            self.loss = LossConfig.from_mapping(self.loss)
        if self.epochs < 0:
            raise TrainingError("epochs must be non-negative")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.budget < 1:
            raise TrainingError("budget must be positive")
        if self.scoring_variant not in SCORING_VARIANTS:
            raise TrainingError(f"unknown scoring variant {self.scoring_variant!r}")
        if self.search_frequency not in FREQUENCIES:
            raise TrainingError(f"search_frequency must be one of {FREQUENCIES}")
        if self.mining_frequency not in FREQUENCIES:
            raise TrainingError(f"mining_frequency must be one of {FREQUENCIES}")
        if self.mining_mode not in MINING_MODES:
            raise TrainingError(f"unknown mining mode {self.mining_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_mapping(cls, data: Mapping) -> "TrainConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise TrainingError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class AdamState:
    step: int
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]


def init_adam(params: HeadParams) -> AdamState:
    tensors = params.tensors()
    return AdamState(
        step=0,
        first_moment=[np.zeros_like(t.value) for t in tensors],
        second_moment=[np.zeros_like(t.value) for t in tensors],
    )


def apply_adam(params: HeadParams, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update; absent gradients count as zero."""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for i, t in enumerate(params.tensors()):
        g = t.grad if t.grad is not None else np.zeros_like(t.value)
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.value -= config.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + config.adam_epsilon)


@dataclass
class StepMetrics:
    n_videos: int
    loss_total: float
    loss_video: float
    loss_point: float
    loss_score: float
    loss_feature: float
    n_searches: int
    n_skipped_classes: int
    search_seconds: float
    accuracy_sum: float
    accuracy_count: int


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_video: float
    loss_point: float
    loss_score: float
    loss_feature: float
    sequence_accuracy: float | None
    n_searches: int
    n_skipped_classes: int
    search_seconds: float
    epoch_seconds: float

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["search_seconds"]
        del d["epoch_seconds"]
        return d


@dataclass
class TrainReport:
    config: dict
    seed: int
    n_classes: int
    feature_dim: int
    n_videos: int
    epoch_stats: list[EpochStats]
    total_seconds: float = 0.0

    def to_dict(self) -> dict:
        """Deterministic content with timings split into their own subtree."""
        return {
            "config": self.config,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "feature_dim": self.feature_dim,
            "n_videos": self.n_videos,
            "epochs": [e.to_dict() for e in self.epoch_stats],
            "timings": {
                "per_epoch_search_seconds": [e.search_seconds for e in self.epoch_stats],
                "per_epoch_seconds": [e.epoch_seconds for e in self.epoch_stats],
                "total_seconds": self.total_seconds,
            },
        }


def infer_n_classes(records: Sequence[VideoRecord]) -> int:
    top = -1
    for rec in records:
        for g in rec.ground_truth:
            top = max(top, g.class_id)
        for p in rec.points.action:
            top = max(top, p.label)
    if top < 0:
        raise TrainingError("no classes found in the dataset")
    return top + 1


def _soi_seed(seed: int, epoch: int, video_id: str, class_id: int, span_index: int) -> list[int]:
    return [int(seed), 0x501, int(epoch), zlib.crc32(video_id.encode()), int(class_id), int(span_index)]


def _class_backgrounds(rec: VideoRecord, mined: list[int], class_id: int) -> list[int]:
    """Mined points plus other classes' action points, merged and sorted."""
    other = [p.t for p in rec.points.action if p.label != class_id]
    return sorted(set(mined) | set(other))


def _search_video(rec: VideoRecord, fused: np.ndarray, mined: list[int],
                  config: TrainConfig) -> tuple[dict[int, LabelSequence], int]:
    """Best sequence per present class; returns (sequences, skipped classes)."""
    sequences: dict[int, LabelSequence] = {}
    skipped = 0
    for c in rec.points.present_classes():
        acts = [p.t for p in rec.points.action if p.label == c]
        bkgs = _class_backgrounds(rec, mined, c)
        if not bkgs:
            skipped += 1
            continue
        found = greedy_search(
            fused[c], acts, bkgs,
            budget=config.budget,
            outer_ratio=config.loss.outer_ratio,
            variant=config.scoring_variant,
            strict_start=config.strict_start,
            class_id=c,
        )
        sequences[c] = found.sequence
    return sequences, skipped


def _video_terms(rec: VideoRecord, params: HeadParams, config: TrainConfig,
                 epoch: int, mined_cache: dict | None, sequence_cache: dict | None):
    """Forward one video and assemble its weighted loss and bookkeeping."""
    out = model.forward(rec.features, params)
    n_classes = params.n_classes
    label = rec.points.video_label(n_classes)

    scores = model.video_scores(out.fused_scores)
    l_video = losses.video_loss(scores, label)

    if mined_cache is not None and rec.video_id in mined_cache:
        mined = mined_cache[rec.video_id]
    else:
        mined = mine_pseudo_background(
            out.background_scores.value, rec.points.action_times(),
            config.loss.mining_threshold, config.mining_mode,
        )
    l_point = losses.point_action_loss(
        out.fused_scores, out.background_scores, rec.points.action,
        config.loss.focal_power,
    ) + losses.point_background_loss(
        out.fused_scores, out.background_scores, mined, config.loss.focal_power,
    )

    need_sequences = config.loss.score_weight > 0 or config.loss.feature_weight > 0
    n_searches = 0
    n_skipped = 0
    search_seconds = 0.0
    acc_sum, acc_count = 0.0, 0
    l_score = ndiff.lift(0.0)
    l_feature = ndiff.lift(0.0)
    if need_sequences:
        if sequence_cache is not None and rec.video_id in sequence_cache:
            sequences, n_skipped = sequence_cache[rec.video_id]
        else:
            started = time.perf_counter()
            sequences, n_skipped = _search_video(rec, out.fused_scores.value, mined, config)
            search_seconds = time.perf_counter() - started
            n_searches = len(sequences)
            for c in sorted(sequences):
                acc_sum += sequence_accuracy(sequences[c], rec.occupancy(c))
                acc_count += 1
        completeness = {}
        pooled: list[InstanceFeature] = []
        for c in sorted(sequences):
            seq = sequences[c]
            completeness[c] = completeness_score(
                out.fused_scores[c], seq, config.loss.outer_ratio, config.scoring_variant
            )
            if config.loss.feature_weight > 0:
                for idx, span in enumerate(seq.spans):
                    vector = losses.soi_pool(
                        out.embedded, span,
                        _soi_seed(config.seed, epoch, rec.video_id, c, idx),
                    )
                    pooled.append(InstanceFeature(vector, span.is_action, c))
        if config.loss.score_weight > 0 and set(completeness) == set(rec.points.present_classes()):
            l_score = losses.score_contrastive_loss(
                completeness, label, config.loss.focal_power
            )
        if config.loss.feature_weight > 0 and pooled:
            l_feature = losses.feature_contrastive_loss(pooled, config.loss.temperature)

    total = losses.total_loss(l_video, l_point, l_score, l_feature, config.loss)
    components = {
        "video": l_video.item(),
        "point": l_point.item(),
        "score": l_score.item(),
        "feature": l_feature.item(),
        "total": total.item(),
    }
    stats = (n_searches, n_skipped, search_seconds, acc_sum, acc_count)
    return total, components, stats


def train_step(batch: Sequence[VideoRecord], params: HeadParams, state: AdamState,
               config: TrainConfig, *, epoch: int = 0,
               mined_cache: dict | None = None,
               sequence_cache: dict | None = None) -> StepMetrics:
    """One optimizer update on a batch; the batch loss averages video losses.

    Videos are processed in video-id order so gradient accumulation has a
    fixed reduction order regardless of how the batch was assembled.
    """
    if not batch:
        raise TrainingError("empty batch")
    ordered = sorted(batch, key=lambda r: r.video_id)
    ndiff.zero_grads(params.tensors())
    sums = {"video": 0.0, "point": 0.0, "score": 0.0, "feature": 0.0, "total": 0.0}
    n_searches = n_skipped = 0
    search_seconds = 0.0
    acc_sum, acc_count = 0.0, 0
    with Tape() as tape:
        batch_total = None
        for rec in ordered:
            try:
                total, components, stats = _video_terms(
                    rec, params, config, epoch, mined_cache, sequence_cache
                )
            except NonFiniteError as err:
                raise TrainingError(
                    f"non-finite value while processing video {rec.video_id}: {err}"
                ) from err
            batch_total = total if batch_total is None else batch_total + total
            for key in sums:
                sums[key] += components[key]
            searches, skipped, seconds, asum, acount = stats
            n_searches += searches
            n_skipped += skipped
            search_seconds += seconds
            acc_sum += asum
            acc_count += acount
        batch_total = batch_total / float(len(ordered))
        tape.backward(batch_total)
    apply_adam(params, state, config)
    n = float(len(ordered))
    return StepMetrics(
        n_videos=len(ordered),
        loss_total=sums["total"] / n,
        loss_video=sums["video"] / n,
        loss_point=sums["point"] / n,
        loss_score=sums["score"] / n,
        loss_feature=sums["feature"] / n,
        n_searches=n_searches,
        n_skipped_classes=n_skipped,
        search_seconds=search_seconds,
        accuracy_sum=acc_sum,
        accuracy_count=acc_count,
    )


def _epoch_caches(records, params, config, epoch):
    """Precompute mining and searches at epoch start when configured."""
    mined_cache = None
    sequence_cache = None
    search_seconds = 0.0
    n_searches = 0
    acc_sum, acc_count = 0.0, 0
    need_mine = config.mining_frequency == "per_epoch"
    need_seq = config.search_frequency == "per_epoch" and (
        config.loss.score_weight > 0 or config.loss.feature_weight > 0
    )
    if not need_mine and not need_seq:
        return None, None, 0, 0.0, 0.0, 0
    mined_cache = {} if need_mine or need_seq else None
    sequence_cache = {} if need_seq else None
    for rec in sorted(records, key=lambda r: r.video_id):
        out = model.forward(rec.features, params)
        mined = mine_pseudo_background(
            out.background_scores.value, rec.points.action_times(),
            config.loss.mining_threshold, config.mining_mode,
        )
        if need_mine:
            mined_cache[rec.video_id] = mined
        if need_seq:
            started = time.perf_counter()
            sequences, skipped = _search_video(rec, out.fused_scores.value, mined, config)
            search_seconds += time.perf_counter() - started
            n_searches += len(sequences)
            for c in sorted(sequences):
                acc_sum += sequence_accuracy(sequences[c], rec.occupancy(c))
                acc_count += 1
            sequence_cache[rec.video_id] = (sequences, skipped)
    if not need_mine:
        mined_cache = None
    return mined_cache, sequence_cache, n_searches, search_seconds, acc_sum, acc_count


def run_training(records: Sequence[VideoRecord], config: TrainConfig,
                 n_classes: int | None = None) -> tuple[TrainReport, HeadParams]:
    """Full training run; returns the report and the trained head."""
    if not records:
        raise TrainingError("no training videos")
    dims = {rec.feature_dim for rec in records}
    if len(dims) != 1:
        raise TrainingError(f"inconsistent feature dims: {sorted(dims)}")
    feature_dim = dims.pop()
    if n_classes is None:
        n_classes = infer_n_classes(records)
    for rec in records:
        rec.points.validate(rec.n_segments)

    params = model.init_head(feature_dim, n_classes, config.seed)
    state = init_adam(params)
    epoch_stats: list[EpochStats] = []
    run_start = time.perf_counter()
    ordered = sorted(records, key=lambda r: r.video_id)

    for epoch in range(config.epochs):
        epoch_start = time.perf_counter()
        mined_cache, sequence_cache, cache_searches, cache_seconds, cache_acc, cache_cnt = (
            _epoch_caches(ordered, params, config, epoch)
        )
        rng = np.random.default_rng([config.seed, 0xE9, epoch])
        order = rng.permutation(len(ordered))
        sums = {"total": 0.0, "video": 0.0, "point": 0.0, "score": 0.0, "feature": 0.0}
        n_videos = 0
        n_searches, n_skipped = cache_searches, 0
        search_seconds = cache_seconds
        acc_sum, acc_count = cache_acc, cache_cnt
        for lo in range(0, len(ordered), config.batch_size):
            batch = [ordered[i] for i in order[lo : lo + config.batch_size]]
            metrics = train_step(
                batch, params, state, config,
                epoch=epoch, mined_cache=mined_cache, sequence_cache=sequence_cache,
            )
            weight = metrics.n_videos
            n_videos += weight
            sums["total"] += metrics.loss_total * weight
            sums["video"] += metrics.loss_video * weight
            sums["point"] += metrics.loss_point * weight
            sums["score"] += metrics.loss_score * weight
            sums["feature"] += metrics.loss_feature * weight
            n_searches += metrics.n_searches
            n_skipped += metrics.n_skipped_classes
            search_seconds += metrics.search_seconds
            acc_sum += metrics.accuracy_sum
            acc_count += metrics.accuracy_count
        epoch_stats.append(EpochStats(
            epoch=epoch,
            loss_total=sums["total"] / n_videos,
            loss_video=sums["video"] / n_videos,
            loss_point=sums["point"] / n_videos,
            loss_score=sums["score"] / n_videos,
            loss_feature=sums["feature"] / n_videos,
            sequence_accuracy=(acc_sum / acc_count) if acc_count else None,
            n_searches=n_searches,
            n_skipped_classes=n_skipped,
            search_seconds=search_seconds,
            epoch_seconds=time.perf_counter() - epoch_start,
        ))

    report = TrainReport(
        config=config.to_dict(),
        seed=config.seed,
        n_classes=n_classes,
        feature_dim=feature_dim,
        n_videos=len(records),
        epoch_stats=epoch_stats,
        total_seconds=time.perf_counter() - run_start,
    )
    return report, params
