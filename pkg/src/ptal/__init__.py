"""Point-supervised temporal action localization at desk scale.

A small, fully deterministic implementation of localization from one labeled
segment per action instance: a differentiable scoring head, pseudo-background
mining, completeness-guided label-sequence search, training losses, proposal
generation, and mAP evaluation, plus synthetic data tooling and a CLI.
"""

from .inference import InferenceConfig, Proposal, generate_proposals, temporal_nms
from .losses import InstanceFeature, LossConfig
from .metrics import EvalReport, GroundTruthInstance, evaluate, pearson_r, tiou
from .mining import PointAnnotation, PointSet, mine_pseudo_background
from .model import HeadParams, ModelOutput, forward, init_head, video_scores
from .ndiff import ConvParams, Tape, Tensor, finite_diff_check
from .sequence import (InstanceSpan, LabelSequence, ScoredSequence,
                       completeness_score, exhaustive_search, greedy_search,
                       sequence_accuracy, span_contrast)
from .synthio import SyntheticSpec, VideoRecord, generate_dataset, load_dataset
from .trainer import TrainConfig, TrainReport, run_training, train_step

__version__ = "0.1.0"

__all__ = [
    "ConvParams", "EvalReport", "GroundTruthInstance", "HeadParams",
    "InferenceConfig", "InstanceFeature", "InstanceSpan", "LabelSequence",
    "LossConfig", "ModelOutput", "PointAnnotation", "PointSet", "Proposal",
    "ScoredSequence", "SyntheticSpec", "Tape", "Tensor", "TrainConfig",
    "TrainReport", "VideoRecord", "completeness_score", "evaluate",
    "exhaustive_search", "finite_diff_check", "forward", "generate_dataset",
    "generate_proposals", "greedy_search", "init_head", "load_dataset",
    "mine_pseudo_background", "pearson_r", "run_training", "sequence_accuracy",
    "span_contrast", "temporal_nms", "tiou", "train_step", "video_scores",
    "__version__",
]
