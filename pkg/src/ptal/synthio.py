"""Synthetic corpus generation and dataset IO.

Videos are sequences of feature columns: background segments draw from a
background prototype and instance segments from their class prototype, plus
isotropic noise. Prototypes share a common component so classes are similar
but separable; the margin knob moves them apart. Features are stored in a
small binary format (32-bit on disk, 64-bit in memory) next to a JSON
manifest holding ground truth and the sampled action points.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import GroundTruthInstance
from .mining import PointAnnotation, PointSet

FEATURE_MAGIC = b"PTAL"
FEATURE_VERSION = 1
MANIFEST_FORMAT = "ptal-dataset"
MANIFEST_VERSION = 1

POINT_DISTRIBUTIONS = ("uniform", "gaussian")


class SynthesisError(ValueError):
    """Invalid synthesis spec or impossible packing."""


class FeatureFormatError(Exception):
    """Malformed feature file."""


class BadMagicError(FeatureFormatError):
    pass


class BadVersionError(FeatureFormatError):
    pass


class TruncatedFileError(FeatureFormatError):
    pass


@dataclass
class SyntheticSpec:
    """Knobs for the generated corpus; defaults are desk scale."""

    n_videos: int = 60
    n_classes: int = 3
    feature_dim: int = 32
    segment_range: tuple[int, int] = (80, 120)
    instances_range: tuple[int, int] = (2, 4)
    length_range: tuple[int, int] = (8, 16)
    noise_scale: float = 0.55
    noise_span: int = 1
    margin: float = 0.5
    point_distribution: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        self.segment_range = tuple(int(v) for v in self.segment_range)
        self.instances_range = tuple(int(v) for v in self.instances_range)
        self.length_range = tuple(int(v) for v in self.length_range)
        if self.n_videos < 0:
            raise SynthesisError("n_videos must be non-negative")
        if self.n_classes < 1 or self.feature_dim < 1:
            raise SynthesisError("n_classes and feature_dim must be positive")
        for name in ("segment_range", "instances_range", "length_range"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise SynthesisError(f"{name} must satisfy 1 <= lo <= hi")
        if self.noise_scale < 0:
            raise SynthesisError("noise_scale must be non-negative")
        if self.noise_span < 1:
            raise SynthesisError("noise_span must be at least 1")
        if not 0 < self.margin <= 1:
            raise SynthesisError("margin must lie in (0, 1]")
        if self.point_distribution not in POINT_DISTRIBUTIONS:
            raise SynthesisError(f"unknown point distribution {self.point_distribution!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("segment_range", "instances_range", "length_range"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_mapping(cls, data: Mapping) -> "SyntheticSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise SynthesisError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class VideoRecord:
    """One video: features [D, T], ground truth, and its action points."""

    video_id: str
    features: np.ndarray
    ground_truth: list[GroundTruthInstance]
    points: PointSet = field(default_factory=PointSet)

    @property
    def n_segments(self) -> int:
        return int(self.features.shape[1])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[0])

    def occupancy(self, class_id: int) -> np.ndarray:
        """Binary truth vector for one class."""
        out = np.zeros(self.n_segments, dtype=np.int8)
        for g in self.ground_truth:
            if g.class_id == class_id:
                out[g.start - 1 : g.end] = 1
        return out


def _quantize(x: np.ndarray) -> np.ndarray:
    """Round through 32-bit so in-memory values match the on-disk format."""
    return x.astype(np.float32).astype(np.float64)


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Unit-norm prototype per class plus one background prototype (last row).

    Each prototype blends a shared component with its own direction; a larger
    margin weighs the own direction more, spreading the prototypes apart.
    """
    rng = np.random.default_rng([spec.seed, 0x9E01])
    own = rng.standard_normal((spec.n_classes + 1, spec.feature_dim))
    common = rng.standard_normal(spec.feature_dim)
    blend = spec.margin * own + (1.0 - spec.margin) * common
    blend /= np.linalg.norm(blend, axis=1, keepdims=True)
    return _quantize(blend)


def sample_points(instances: Sequence[GroundTruthInstance], distribution: str,
                  seed) -> list[PointAnnotation]:
    """Draw one labeled point inside each instance.

    ``uniform`` draws any segment of the instance; ``gaussian`` draws near the
    center (standard deviation one sixth of the length, clipped to the
    instance). Instances must be disjoint so the points come out strictly
    increasing.
    """
    if distribution not in POINT_DISTRIBUTIONS:
        raise SynthesisError(f"unknown point distribution {distribution!r}")
    rng = np.random.default_rng(seed)
    ordered = sorted(instances, key=lambda g: (g.start, g.end))
    points = []
    for g in ordered:
        if distribution == "uniform":
            t = int(rng.integers(g.start, g.end + 1))
        else:
            center = (g.start + g.end) / 2.0
            sigma = (g.end - g.start + 1) / 6.0
            t = int(np.clip(round(rng.normal(center, sigma)), g.start, g.end))
        points.append(PointAnnotation(t, g.class_id))
    times = [p.t for p in points]
    if sorted(set(times)) != times:
        raise SynthesisError("instances overlap; cannot sample one point each")
    return points


def _noise_field(rng: np.random.Generator, dim: int, n_segments: int,
                 span: int) -> np.ndarray:
    """Gaussian noise with unit marginal variance, correlated over ``span``
    consecutive segments (span 1 is white). Mimics features extracted from
    overlapping windows, whose errors persist for a stretch of segments."""
    white = rng.standard_normal((dim, n_segments + span - 1))
    if span == 1:
        return white
    kernel = np.ones(span)
    mixed = np.apply_along_axis(np.convolve, 1, white, kernel, "valid")
    return mixed / np.sqrt(span)


def generate_video(spec: SyntheticSpec, index: int,
                   prototypes: np.ndarray) -> VideoRecord:
    """Deterministically synthesize one video from the spec seed and index."""
    rng = np.random.default_rng([spec.seed, 0x51D, index])
    t_lo, t_hi = spec.segment_range
    n_segments = int(rng.integers(t_lo, t_hi + 1))
    i_lo, i_hi = spec.instances_range
    l_lo, l_hi = spec.length_range
    for _ in range(100):
        n_instances = int(rng.integers(i_lo, i_hi + 1))
        lengths = rng.integers(l_lo, l_hi + 1, size=n_instances)
        if int(lengths.sum()) + n_instances + 1 <= n_segments:
            break
    else:
        raise SynthesisError(
            f"cannot pack {i_lo}..{i_hi} instances of length {l_lo}..{l_hi} "
            f"into {n_segments} segments"
        )
    classes = rng.integers(0, spec.n_classes, size=n_instances)
    slack = n_segments - int(lengths.sum()) - (n_instances + 1)
    extra = rng.multinomial(slack, np.full(n_instances + 1, 1.0 / (n_instances + 1)))
    gaps = 1 + extra

    video_id = f"video_{index:04d}"
    instances = []
    cursor = 1
    for i in range(n_instances):
        cursor += int(gaps[i])
        start = cursor
        end = start + int(lengths[i]) - 1
        instances.append(GroundTruthInstance(video_id, int(classes[i]), start, end))
        cursor = end + 1

    base = np.tile(prototypes[spec.n_classes][:, None], (1, n_segments))
    for g in instances:
        base[:, g.start - 1 : g.end] = prototypes[g.class_id][:, None]
    noise = _noise_field(rng, spec.feature_dim, n_segments, spec.noise_span)
    features = _quantize(base + spec.noise_scale * noise)

    points = sample_points(instances, spec.point_distribution, [spec.seed, 0xB0B, index])
    return VideoRecord(video_id, features, instances, PointSet(action=points))


def generate_dataset(spec: SyntheticSpec) -> list[VideoRecord]:
    """The full corpus for a spec; byte-deterministic in the spec."""
    prototypes = class_prototypes(spec)
    return [generate_video(spec, i, prototypes) for i in range(spec.n_videos)]


def write_features(path, features: np.ndarray) -> None:
    """Write a [D, T] feature matrix as 32-bit time-major binary."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise SynthesisError(f"features must be 2-D, got shape {features.shape}")
    dim, n_segments = features.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", FEATURE_MAGIC, FEATURE_VERSION, n_segments, dim))
        fh.write(np.ascontiguousarray(features.T, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Read a feature file back to a [D, T] float64 matrix."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sIII")
    if len(blob) < head:
        raise TruncatedFileError(f"{path}: shorter than the header")
    magic, version, n_segments, dim = struct.unpack_from("<4sIII", blob)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    expected = head + n_segments * dim * 4
    if len(blob) != expected:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", count=n_segments * dim, offset=head)
    return data.reshape(n_segments, dim).T.astype(np.float64)


def write_dataset(out_dir, records: Sequence[VideoRecord],
                  spec: SyntheticSpec | None = None) -> Path:
    """Write feature files plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    videos = []
    for rec in records:
        rel = f"features/{rec.video_id}.ptal"
        write_features(out / rel, rec.features)
        videos.append({
            "video_id": rec.video_id,
            "features": rel,
            "n_segments": rec.n_segments,
            "feature_dim": rec.feature_dim,
            "ground_truth": [
                {"class_id": g.class_id, "start": g.start, "end": g.end}
                for g in rec.ground_truth
            ],
            "action_points": [
                {"t": p.t, "class_id": p.label} for p in rec.points.action
            ],
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "spec": spec.to_dict() if spec is not None else None,
        "videos": videos,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(manifest_path) -> tuple[list[VideoRecord], dict]:
    """Load records from a manifest; returns (records, manifest dict)."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise SynthesisError(f"{manifest_path}: not a dataset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise SynthesisError(f"{manifest_path}: unsupported manifest version")
    records = []
    for entry in manifest["videos"]:
        features = read_features(manifest_path.parent / entry["features"])
        if features.shape != (entry["feature_dim"], entry["n_segments"]):
            raise SynthesisError(
                f"{entry['video_id']}: feature shape {features.shape} does not "
                f"match manifest"
            )
        vid = entry["video_id"]
        gts = [GroundTruthInstance(vid, g["class_id"], g["start"], g["end"])
               for g in entry["ground_truth"]]
        points = PointSet(action=[PointAnnotation(p["t"], p["class_id"])
                                  for p in entry["action_points"]])
        points.validate(entry["n_segments"])
        records.append(VideoRecord(vid, features, gts, points))
    return records, manifest


def export_annotations(path, records: Sequence[VideoRecord]) -> None:
    """Human-readable TSV of instances and points, one row per item."""
    lines = ["video_id\tkind\tclass_id\tstart\tend"]
    for rec in records:
        for g in rec.ground_truth:
            lines.append(f"{rec.video_id}\tinstance\t{g.class_id}\t{g.start}\t{g.end}")
        for p in rec.points.action:
            lines.append(f"{rec.video_id}\tpoint\t{p.label}\t{p.t}\t{p.t}")
    Path(path).write_text("\n".join(lines) + "\n")
