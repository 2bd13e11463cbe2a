"""Synthetic corpus generation, point sampling, and dataset codecs."""

import json
import struct

import numpy as np
import pytest
from scipy.stats import chisquare

from ptal.metrics import GroundTruthInstance
from ptal.synthio import (
    BadMagicError,
    BadVersionError,
    SynthesisError,
    SyntheticSpec,
    TruncatedFileError,
    VideoRecord,
    class_prototypes,
    export_annotations,
    generate_dataset,
    generate_video,
    load_dataset,
    read_features,
    sample_points,
    write_dataset,
    write_features,
)

SMALL = dict(n_videos=4, n_classes=2, feature_dim=6, segment_range=(30, 40),
             instances_range=(1, 3), length_range=(4, 8), seed=11)


# ---------------------------------------------------------------- spec knobs

def test_spec_zero_videos_gives_empty_dataset(tmp_path):
    spec = SyntheticSpec(**{**SMALL, "n_videos": 0})
    records = generate_dataset(spec)
    assert records == []
    manifest_path = write_dataset(tmp_path, records, spec)
    manifest = json.loads(manifest_path.read_text())
    assert manifest["videos"] == []
    loaded, _ = load_dataset(manifest_path)
    assert loaded == []


@pytest.mark.parametrize("overrides,needle", [
    ({"n_videos": -1}, "non-negative"),
    ({"n_classes": 0}, "positive"),
    ({"feature_dim": 0}, "positive"),
    ({"segment_range": (0, 5)}, "segment_range"),
    ({"instances_range": (3, 2)}, "instances_range"),
    ({"length_range": (5, 4)}, "length_range"),
    ({"noise_scale": -0.1}, "noise_scale"),
    ({"noise_span": 0}, "noise_span"),
    ({"margin": 0.0}, "margin"),
    ({"margin": 1.5}, "margin"),
    ({"point_distribution": "manual"}, "distribution"),
])
def test_spec_validation(overrides, needle):
    with pytest.raises(SynthesisError, match=needle):
        SyntheticSpec(**{**SMALL, **overrides})


def test_spec_mapping_roundtrip():
    spec = SyntheticSpec(**SMALL)
    again = SyntheticSpec.from_mapping(spec.to_dict())
    assert again == spec


def test_spec_unknown_key_rejected():
    with pytest.raises(SynthesisError, match="unknown"):
        SyntheticSpec.from_mapping({"n_videos": 3, "sigma": 0.5})


# ---------------------------------------------------------------- prototypes

def test_prototypes_shape_and_unit_norm():
    spec = SyntheticSpec(**SMALL)
    protos = class_prototypes(spec)
    assert protos.shape == (spec.n_classes + 1, spec.feature_dim)
    # unit norm up to 32-bit storage rounding
    assert np.allclose(np.linalg.norm(protos, axis=1), 1.0, atol=1e-6)


def test_prototypes_deterministic_and_seed_sensitive():
    a = class_prototypes(SyntheticSpec(**SMALL))
    b = class_prototypes(SyntheticSpec(**SMALL))
    c = class_prototypes(SyntheticSpec(**{**SMALL, "seed": 12}))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_smaller_margin_means_more_similar_prototypes():
    def mean_offdiag_cosine(margin):
        protos = class_prototypes(
            SyntheticSpec(**{**SMALL, "n_classes": 4, "margin": margin}))
        gram = protos @ protos.T
        off = gram[~np.eye(len(gram), dtype=bool)]
        return off.mean()

    assert mean_offdiag_cosine(0.2) > mean_offdiag_cosine(0.9)


# ------------------------------------------------------------ point sampling

def toy_instances():
    return [GroundTruthInstance("v", 0, 11, 20)]


def test_length_one_instance_forces_the_point():
    gts = [GroundTruthInstance("v", 1, 7, 7)]
    for dist in ("uniform", "gaussian"):
        for seed in range(5):
            pts = sample_points(gts, dist, seed)
            assert len(pts) == 1
            assert pts[0].t == 7
            assert pts[0].label == 1


def test_one_point_per_instance_inside_and_labeled():
    gts = [GroundTruthInstance("v", 0, 3, 6),
           GroundTruthInstance("v", 1, 10, 12),
           GroundTruthInstance("v", 0, 20, 27)]
    for dist in ("uniform", "gaussian"):
        pts = sample_points(gts, dist, seed=5)
        assert len(pts) == len(gts)
        for p, g in zip(pts, gts):
            assert g.start <= p.t <= g.end
            assert p.label == g.class_id
        times = [p.t for p in pts]
        assert times == sorted(times)


def test_unknown_distribution_rejected():
    with pytest.raises(SynthesisError, match="distribution"):
        sample_points(toy_instances(), "triangular", seed=0)


def test_overlapping_instances_rejected():
    gts = [GroundTruthInstance("v", 0, 5, 5), GroundTruthInstance("v", 1, 5, 5)]
    with pytest.raises(SynthesisError, match="overlap"):
        sample_points(gts, "uniform", seed=0)


def test_uniform_draws_cover_the_extent_evenly():
    gts = toy_instances()
    draws = np.array([sample_points(gts, "uniform", [909, i])[0].t
                      for i in range(10_000)])
    counts = np.array([(draws == t).sum() for t in range(11, 21)])
    assert counts.min() > 0  # every segment of the instance appears
    assert chisquare(counts).pvalue > 0.01


def test_gaussian_draws_concentrate_near_the_center():
    gts = toy_instances()
    gauss = np.array([sample_points(gts, "gaussian", [707, i])[0].t
                      for i in range(10_000)])
    uniform = np.array([sample_points(gts, "uniform", [909, i])[0].t
                        for i in range(10_000)])
    midpoint = (11 + 20) / 2.0
    assert abs(gauss.mean() - midpoint) <= 0.05 * midpoint
    assert gauss.var() < uniform.var()
    assert gauss.min() >= 11 and gauss.max() <= 20


# ------------------------------------------------------------- video records

def test_generated_videos_satisfy_point_and_gt_invariants():
    spec = SyntheticSpec(**{**SMALL, "n_videos": 12})
    for rec in generate_dataset(spec):
        T = rec.n_segments
        assert spec.segment_range[0] <= T <= spec.segment_range[1]
        assert rec.feature_dim == spec.feature_dim
        gts = sorted(rec.ground_truth, key=lambda g: g.start)
        for prev, cur in zip(gts, gts[1:]):
            assert prev.end < cur.start  # disjoint instances
        assert len(rec.points.action) == len(gts)
        for p, g in zip(rec.points.action, gts):
            assert g.start <= p.t <= g.end
            assert p.label == g.class_id
        assert 1 <= gts[0].start and gts[-1].end <= T
        rec.points.validate(T)


def test_video_ids_are_stable_and_zero_padded():
    spec = SyntheticSpec(**SMALL)
    records = generate_dataset(spec)
    assert [r.video_id for r in records] == [f"video_{i:04d}" for i in range(4)]


def test_same_seed_twice_gives_byte_identical_feature_files(tmp_path):
    spec = SyntheticSpec(**SMALL)
    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    manifest_a = write_dataset(dir_a, generate_dataset(spec), spec)
    manifest_b = write_dataset(dir_b, generate_dataset(spec), spec)
    assert manifest_a.read_bytes() == manifest_b.read_bytes()
    for i in range(spec.n_videos):
        rel = f"features/video_{i:04d}.ptal"
        assert (dir_a / rel).read_bytes() == (dir_b / rel).read_bytes()


def test_zero_noise_features_equal_the_prototypes_exactly():
    spec = SyntheticSpec(**{**SMALL, "noise_scale": 0.0})
    protos = class_prototypes(spec)
    background = protos[spec.n_classes]
    for rec in generate_dataset(spec):
        covered = np.zeros(rec.n_segments, dtype=bool)
        for g in rec.ground_truth:
            block = rec.features[:, g.start - 1 : g.end]
            assert np.array_equal(block, np.tile(protos[g.class_id][:, None],
                                                 (1, block.shape[1])))
            covered[g.start - 1 : g.end] = True
        rest = rec.features[:, ~covered]
        assert np.array_equal(rest, np.tile(background[:, None],
                                            (1, rest.shape[1])))


def test_noise_span_correlates_deviations_over_time():
    def lag1_autocorr(span):
        spec = SyntheticSpec(**{**SMALL, "n_videos": 1, "noise_span": span,
                                "noise_scale": 0.4})
        protos = class_prototypes(spec)
        rec = generate_video(spec, 0, protos)
        base = np.tile(protos[spec.n_classes][:, None], (1, rec.n_segments))
        for g in rec.ground_truth:
            base[:, g.start - 1 : g.end] = protos[g.class_id][:, None]
        dev = rec.features - base
        a, b = dev[:, :-1].ravel(), dev[:, 1:].ravel()
        return np.corrcoef(a, b)[0, 1]

    assert abs(lag1_autocorr(1)) < 0.2   # white noise
    assert lag1_autocorr(8) > 0.5        # boxcar-mixed noise persists


def test_impossible_packing_raises():
    spec = SyntheticSpec(**{**SMALL, "segment_range": (5, 5),
                            "instances_range": (2, 2), "length_range": (4, 4)})
    with pytest.raises(SynthesisError, match="cannot pack"):
        generate_video(spec, 0, class_prototypes(spec))


def test_occupancy_marks_instance_segments():
    rec = VideoRecord("v", np.zeros((2, 8)),
                      [GroundTruthInstance("v", 0, 2, 3),
                       GroundTruthInstance("v", 1, 6, 8)])
    assert rec.occupancy(0).tolist() == [0, 1, 1, 0, 0, 0, 0, 0]
    assert rec.occupancy(1).tolist() == [0, 0, 0, 0, 0, 1, 1, 1]
    assert rec.occupancy(2).tolist() == [0] * 8


# -------------------------------------------------------------- feature file

def test_feature_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    raw = rng.standard_normal((5, 9))
    stored = raw.astype(np.float32).astype(np.float64)
    path = tmp_path / "x.ptal"
    write_features(path, raw)
    back = read_features(path)
    assert back.dtype == np.float64
    assert back.shape == (5, 9)
    assert np.array_equal(back, stored)


def test_feature_header_layout(tmp_path):
    path = tmp_path / "x.ptal"
    write_features(path, np.zeros((3, 7)))
    blob = path.read_bytes()
    magic, version, n_segments, dim = struct.unpack_from("<4sIII", blob)
    assert magic == b"PTAL"
    assert (version, n_segments, dim) == (1, 7, 3)
    assert len(blob) == struct.calcsize("<4sIII") + 7 * 3 * 4


def test_write_features_rejects_non_matrix(tmp_path):
    with pytest.raises(SynthesisError, match="2-D"):
        write_features(tmp_path / "x.ptal", np.zeros(5))


def test_read_features_error_variants(tmp_path):
    path = tmp_path / "x.ptal"
    write_features(path, np.ones((2, 3)))
    blob = path.read_bytes()

    short = tmp_path / "short.ptal"
    short.write_bytes(blob[:6])
    with pytest.raises(TruncatedFileError, match="header"):
        read_features(short)

    cut = tmp_path / "cut.ptal"
    cut.write_bytes(blob[:-4])
    with pytest.raises(TruncatedFileError, match="expected"):
        read_features(cut)

    padded = tmp_path / "padded.ptal"
    padded.write_bytes(blob + b"\x00\x00\x00\x00")
    with pytest.raises(TruncatedFileError, match="expected"):
        read_features(padded)

    wrong_magic = tmp_path / "magic.ptal"
    wrong_magic.write_bytes(b"XTAL" + blob[4:])
    with pytest.raises(BadMagicError, match="magic"):
        read_features(wrong_magic)

    wrong_version = tmp_path / "version.ptal"
    wrong_version.write_bytes(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(BadVersionError, match="version"):
        read_features(wrong_version)


# ------------------------------------------------------------------ manifest

def records_equal(a, b):
    return (a.video_id == b.video_id
            and np.array_equal(a.features, b.features)
            and a.ground_truth == b.ground_truth
            and a.points.action == b.points.action
            and a.points.background == b.points.background)


def test_dataset_roundtrip_reconstructs_records(tmp_path):
    spec = SyntheticSpec(**SMALL)
    records = generate_dataset(spec)
    manifest_path = write_dataset(tmp_path, records, spec)
    loaded, manifest = load_dataset(manifest_path)
    assert manifest["format"] == "ptal-dataset"
    assert manifest["version"] == 1
    assert SyntheticSpec.from_mapping(manifest["spec"]) == spec
    assert len(loaded) == len(records)
    for got, want in zip(loaded, records):
        assert records_equal(got, want)


def test_dataset_without_spec_has_null_spec(tmp_path):
    records = generate_dataset(SyntheticSpec(**SMALL))
    manifest_path = write_dataset(tmp_path, records)
    _, manifest = load_dataset(manifest_path)
    assert manifest["spec"] is None


def test_manifest_validation_errors(tmp_path):
    spec = SyntheticSpec(**SMALL)
    manifest_path = write_dataset(tmp_path, generate_dataset(spec), spec)
    manifest = json.loads(manifest_path.read_text())

    bad_format = dict(manifest, format="other")
    p = tmp_path / "bad_format.json"
    p.write_text(json.dumps(bad_format))
    with pytest.raises(SynthesisError, match="manifest"):
        load_dataset(p)

    bad_version = dict(manifest, version=99)
    p = tmp_path / "bad_version.json"
    p.write_text(json.dumps(bad_version))
    with pytest.raises(SynthesisError, match="version"):
        load_dataset(p)

    lying_shape = json.loads(manifest_path.read_text())
    lying_shape["videos"][0]["n_segments"] += 1
    p = tmp_path / "bad_shape.json"
    p.write_text(json.dumps(lying_shape))
    with pytest.raises(SynthesisError, match="shape"):
        load_dataset(p)


def test_annotation_export_shape(tmp_path):
    records = generate_dataset(SyntheticSpec(**SMALL))
    path = tmp_path / "ann.tsv"
    export_annotations(path, records)
    lines = path.read_text().splitlines()
    assert lines[0] == "video_id\tkind\tclass_id\tstart\tend"
    n_instances = sum(len(r.ground_truth) for r in records)
    n_points = sum(len(r.points.action) for r in records)
    assert len(lines) == 1 + n_instances + n_points
    for line in lines[1:]:
        vid, kind, class_id, start, end = line.split("\t")
        assert kind in ("instance", "point")
        assert int(start) <= int(end)
        if kind == "point":
            assert start == end
