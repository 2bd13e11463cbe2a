"""Segment scoring head: shared embedding, per-class scores, background score.

The head embeds pre-extracted segment features with a width-3 convolution and
relu, then produces per-class segment probabilities and a class-agnostic
background probability with width-1 convolutions and sigmoids. Fused scores
down-weight each class score by the probability the segment is not background,
and video-level scores average the top-k fused scores per class.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import ndiff
from .ndiff import ConvParams, DimensionError, Tensor

CHECKPOINT_MAGIC = b"PTLH"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint file."""


@dataclass
class HeadParams:
    """All trainable tensors, in fixed declaration order."""

    embed: ConvParams
    classifier: ConvParams
    background: ConvParams

    def __post_init__(self):
        if self.embed.out_channels != self.classifier.in_channels:
            raise DimensionError("classifier input width must match embedding width")
        if self.embed.out_channels != self.background.in_channels:
            raise DimensionError("background input width must match embedding width")
        if self.background.out_channels != 1:
            raise DimensionError("background head must have exactly one output channel")

    @property
    def feature_dim(self) -> int:
        return self.embed.in_channels

    @property
    def n_classes(self) -> int:
        return self.classifier.out_channels

    def tensors(self) -> list[Tensor]:
        return self.embed.tensors() + self.classifier.tensors() + self.background.tensors()


@dataclass
class ModelOutput:
    """Per-video forward results; all tensors share the same time length."""

    embedded: Tensor           # [D, T]
    class_scores: Tensor       # [C, T], sigmoid outputs
    background_scores: Tensor  # [T], sigmoid outputs
    fused_scores: Tensor       # [C, T]

    @property
    def n_segments(self) -> int:
        return int(self.background_scores.value.shape[0])


def init_conv(in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator) -> ConvParams:
    """Uniform init in ±1/sqrt(fan_in) for both weight and bias."""
    bound = 1.0 / np.sqrt(in_channels * kernel)
    weight = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel))
    bias = rng.uniform(-bound, bound, size=(out_channels,))
    return ConvParams(ndiff.parameter(weight), ndiff.parameter(bias))


def init_head(feature_dim: int, n_classes: int, seed: int, embed_kernel: int = 3) -> HeadParams:
    """Seeded head initialization; the three convs draw from one stream."""
    if feature_dim < 1 or n_classes < 1:
        raise DimensionError("feature_dim and n_classes must be positive")
    rng = np.random.default_rng([int(seed), 0x1A17])
    return HeadParams(
        embed=init_conv(feature_dim, feature_dim, embed_kernel, rng),
        classifier=init_conv(feature_dim, n_classes, 1, rng),
        background=init_conv(feature_dim, 1, 1, rng),
    )


def fuse_scores(class_scores: Tensor, background_scores: Tensor) -> Tensor:
    """Fused score = class score * (1 - background score), per segment."""
    if class_scores.value.ndim != 2 or background_scores.value.ndim != 1:
        raise DimensionError("fuse_scores expects [C, T] class scores and [T] background scores")
    if class_scores.value.shape[1] != background_scores.value.shape[0]:
        raise DimensionError(
            f"time mismatch: class scores have T={class_scores.value.shape[1]}, "
            f"background has T={background_scores.value.shape[0]}"
        )
    return class_scores * (1.0 - background_scores)


def forward(features, params: HeadParams) -> ModelOutput:
    """Run the head on a [D, T] feature matrix (ndarray or tensor)."""
    x = ndiff.lift(features)
    if x.value.ndim != 2:
        raise DimensionError(f"features must be [D, T], got shape {x.value.shape}")
    if x.value.shape[0] != params.feature_dim:
        raise DimensionError(
            f"features have {x.value.shape[0]} channels, head expects {params.feature_dim}"
        )
    embedded = ndiff.relu(ndiff.conv1d(x, params.embed))
    class_scores = ndiff.sigmoid(ndiff.conv1d(embedded, params.classifier))
    background_scores = ndiff.sigmoid(ndiff.conv1d(embedded, params.background))[0]
    fused = fuse_scores(class_scores, background_scores)
    return ModelOutput(embedded, class_scores, background_scores, fused)


def top_k_for_length(n_segments: int) -> int:
    """Top-k pool size: one eighth of the video, at least one segment."""
    return max(1, n_segments // 8)


def video_scores(fused_scores: Tensor) -> Tensor:
    """Per-class video score: mean of the top-k fused segment scores."""
    t = fused_scores.value.shape[1]
    return ndiff.topk_mean_rows(fused_scores, top_k_for_length(t))


def save_checkpoint(path, params: HeadParams) -> None:
    """Write the head to a small self-describing binary file.

    Layout: magic, version, feature dim, class count, three kernel widths as
    little-endian u32, then each tensor's float64 little-endian bytes in
    declaration order.
    """
    header = struct.pack(
        "<4s6I",
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        params.feature_dim,
        params.n_classes,
        params.embed.kernel,
        params.classifier.kernel,
        params.background.kernel,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for t in params.tensors():
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> HeadParams:
    """Read a checkpoint written by ``save_checkpoint``; validates layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head_size = struct.calcsize("<4s6I")
    if len(blob) < head_size:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes is shorter than the header")
    magic, version, dim, n_classes, k_embed, k_cls, k_bkg = struct.unpack_from("<4s6I", blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    shapes = [
        (dim, dim, k_embed), (dim,),
        (n_classes, dim, k_cls), (n_classes,),
        (1, dim, k_bkg), (1,),
    ]
    expected = head_size + sum(int(np.prod(s)) * 8 for s in shapes)
    if len(blob) != expected:
        raise CheckpointError(f"checkpoint has {len(blob)} bytes, expected {expected}")
    offset = head_size
    tensors = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors.append(ndiff.parameter(arr.astype(np.float64)))
        offset += count * 8
    return HeadParams(
        embed=ConvParams(tensors[0], tensors[1]),
        classifier=ConvParams(tensors[2], tensors[3]),
        background=ConvParams(tensors[4], tensors[5]),
    )
