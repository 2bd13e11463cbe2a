"""End-to-end command line pipeline on a small synthetic workspace."""

import json
from types import SimpleNamespace

import pytest

from ptal import report
from ptal.cli import main
from ptal.inference import Proposal
from ptal.synthio import load_dataset, read_features

CONFIG = {
    "synthetic": {"n_videos": 6, "n_classes": 2, "feature_dim": 8,
                  "segment_range": [25, 35], "instances_range": [1, 2],
                  "length_range": [4, 8], "seed": 3},
    "train": {"epochs": 3, "batch_size": 3, "seed": 0},
}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Generated dataset (train/test split) plus one trained checkpoint."""
    root = tmp_path_factory.mktemp("cli_ws")
    config = root / "config.json"
    config.write_text(json.dumps(CONFIG))
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--config", str(config),
                 "--split", "train=4,test=2"]) == 0
    run = root / "run"
    assert main(["train", "--data", str(data / "train" / "manifest.json"),
                 "--out", str(run), "--config", str(config)]) == 0
    return SimpleNamespace(
        root=root,
        config=config,
        train_manifest=data / "train" / "manifest.json",
        test_manifest=data / "test" / "manifest.json",
        checkpoint=run / "checkpoint.ptlh",
        run=run,
    )


def fresh(tmp_path, name):
    out = tmp_path / name
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ gen-data

def test_gen_data_artifacts_and_report(ws):
    for split in ("train", "test"):
        base = ws.train_manifest.parent if split == "train" else ws.test_manifest.parent
        assert (base / "manifest.json").is_file()
        assert (base / "annotations.tsv").is_file()
    doc = report.read_json_report(ws.train_manifest.parent.parent / "report.json")
    assert doc["subcommand"] == "gen-data"
    assert doc["seed"] == 3
    assert doc["config"]["n_videos"] == 6
    assert doc["results"]["splits"]["train"]["n_videos"] == 4
    assert doc["results"]["splits"]["test"]["n_videos"] == 2
    assert "total_seconds" in doc["timings"]


def test_gen_data_split_counts_must_match(tmp_path, ws, capsys):
    rc = main(["gen-data", "--out", str(tmp_path / "x"), "--config",
               str(ws.config), "--split", "train=4,test=1"])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_gen_data_rerun_is_byte_identical(tmp_path, ws):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen-data", "--out", str(out), "--config",
                     str(ws.config), "--seed", "3"]) == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (a / "annotations.tsv").read_bytes() == (b / "annotations.tsv").read_bytes()
    for i in range(CONFIG["synthetic"]["n_videos"]):
        rel = f"features/video_{i:04d}.ptal"
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    doc_a = report.strip_timings(report.read_json_report(a / "report.json"))
    doc_b = report.strip_timings(report.read_json_report(b / "report.json"))
    assert doc_a == doc_b


def test_top_level_seed_flows_into_sections(tmp_path):
    config = tmp_path / "config.json"
    section = {k: v for k, v in CONFIG["synthetic"].items() if k != "seed"}
    config.write_text(json.dumps({"seed": 9, "synthetic": section}))
    out = tmp_path / "out"
    assert main(["gen-data", "--out", str(out), "--config", str(config)]) == 0
    doc = report.read_json_report(out / "report.json")
    assert doc["seed"] == 9
    assert doc["config"]["seed"] == 9


# --------------------------------------------------------------------- train

def test_train_artifacts(ws):
    assert ws.checkpoint.is_file()
    assert (ws.run / "epochs.csv").is_file()
    assert (ws.run / "curves.svg").is_file()
    doc = report.read_json_report(ws.run / "report.json")
    assert doc["subcommand"] == "train"
    assert doc["config"]["epochs"] == 3
    assert len(doc["results"]["epochs"]) == 3
    assert len(doc["timings"]["per_epoch_seconds"]) == 3
    assert "total_seconds" in doc["timings"]
    lines = (ws.run / "epochs.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,loss_total")
    assert len(lines) == 1 + 3


def test_train_flag_overrides_config(tmp_path, ws):
    out = fresh(tmp_path, "override")
    assert main(["train", "--data", str(ws.train_manifest), "--out", str(out),
                 "--config", str(ws.config), "--epochs", "1"]) == 0
    doc = report.read_json_report(out / "report.json")
    assert doc["config"]["epochs"] == 1
    assert len(doc["results"]["epochs"]) == 1


def test_train_rerun_reproduces_checkpoint_and_report(tmp_path, ws):
    out = fresh(tmp_path, "again")
    assert main(["train", "--data", str(ws.train_manifest), "--out", str(out),
                 "--config", str(ws.config)]) == 0
    assert out.joinpath("checkpoint.ptlh").read_bytes() == ws.checkpoint.read_bytes()
    doc_a = report.strip_timings(report.read_json_report(out / "report.json"))
    doc_b = report.strip_timings(report.read_json_report(ws.run / "report.json"))
    assert doc_a == doc_b


def test_train_unknown_config_key_fails(tmp_path, ws, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"train": {"epochs": 1, "bogus": 2}}))
    rc = main(["train", "--data", str(ws.train_manifest),
               "--out", str(tmp_path / "out"), "--config", str(config)])
    assert rc == 2
    assert "bogus" in capsys.readouterr().err


def test_unknown_config_section_fails(tmp_path, ws, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"trainer": {}}))
    rc = main(["train", "--data", str(ws.train_manifest),
               "--out", str(tmp_path / "out"), "--config", str(config)])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_missing_data_path_fails(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nope" / "manifest.json"),
               "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "error" in capsys.readouterr().err


# ------------------------------------------------------------- infer + eval

@pytest.fixture(scope="module")
def inferred(ws, tmp_path_factory):
    out = tmp_path_factory.mktemp("inferred")
    assert main(["infer", "--data", str(ws.test_manifest),
                 "--checkpoint", str(ws.checkpoint), "--out", str(out),
                 "--dump-scores"]) == 0
    return out


def test_infer_artifacts(inferred, ws):
    lines = (inferred / "proposals.tsv").read_text().splitlines()
    assert lines[0] == "video_id\tclass_id\tstart\tend\tconfidence"
    doc = report.read_json_report(inferred / "report.json")
    assert doc["subcommand"] == "infer"
    assert doc["results"]["n_videos"] == 2
    assert doc["results"]["n_proposals"] == len(lines) - 1
    records, _ = load_dataset(ws.test_manifest)
    for rec in records:
        matrix = read_features(inferred / "scores" / f"{rec.video_id}.ptal")
        assert matrix.shape == (CONFIG["synthetic"]["n_classes"] + 1, rec.n_segments)


def test_infer_rerun_is_identical(inferred, ws, tmp_path):
    out = fresh(tmp_path, "infer2")
    assert main(["infer", "--data", str(ws.test_manifest),
                 "--checkpoint", str(ws.checkpoint), "--out", str(out)]) == 0
    assert (out / "proposals.tsv").read_bytes() == (inferred / "proposals.tsv").read_bytes()
    doc_a = report.strip_timings(report.read_json_report(out / "report.json"))
    doc_b = report.strip_timings(report.read_json_report(inferred / "report.json"))
    assert doc_a == doc_b


def test_eval_consumes_inferred_proposals(inferred, ws, tmp_path):
    out = fresh(tmp_path, "eval")
    assert main(["eval", "--data", str(ws.test_manifest),
                 "--proposals", str(inferred / "proposals.tsv"),
                 "--out", str(out)]) == 0
    doc = report.read_json_report(out / "report.json")
    assert doc["subcommand"] == "eval"
    for value in doc["results"]["map_at"].values():
        assert 0.0 <= value <= 1.0
    assert (out / "ap.csv").is_file()
    assert (out / "map.svg").is_file()


def test_eval_threshold_flags(inferred, ws, tmp_path):
    out = fresh(tmp_path, "eval_flags")
    assert main(["eval", "--data", str(ws.test_manifest),
                 "--proposals", str(inferred / "proposals.tsv"),
                 "--out", str(out), "--iou-thresholds", "0.3,0.5",
                 "--average-ranges", "0.3:0.5"]) == 0
    doc = report.read_json_report(out / "report.json")
    assert doc["config"]["iou_thresholds"] == [0.3, 0.5]
    assert sorted(doc["results"]["map_at"]) == ["0.3", "0.5"]
    assert list(doc["results"]["average_map"]) == ["0.3:0.5"]


def test_eval_ground_truth_as_proposals_scores_one(ws, tmp_path):
    records, _ = load_dataset(ws.test_manifest)
    proposals = {
        rec.video_id: [Proposal(g.class_id, g.start, g.end, 1.0)
                       for g in rec.ground_truth]
        for rec in records
    }
    path = tmp_path / "gt.tsv"
    report.write_proposals_tsv(path, proposals)
    out = fresh(tmp_path, "eval_gt")
    assert main(["eval", "--data", str(ws.test_manifest), "--proposals",
                 str(path), "--out", str(out)]) == 0
    doc = report.read_json_report(out / "report.json")
    assert doc["results"]["map_at"]
    for value in doc["results"]["map_at"].values():
        assert value == 1.0


def test_eval_rerun_reports_and_figures_identical(inferred, ws, tmp_path):
    outs = []
    for name in ("e1", "e2"):
        out = fresh(tmp_path, name)
        assert main(["eval", "--data", str(ws.test_manifest),
                     "--proposals", str(inferred / "proposals.tsv"),
                     "--out", str(out)]) == 0
        outs.append(out)
    a, b = outs
    assert (a / "ap.csv").read_bytes() == (b / "ap.csv").read_bytes()
    assert (a / "map.svg").read_bytes() == (b / "map.svg").read_bytes()
    doc_a = report.strip_timings(report.read_json_report(a / "report.json"))
    doc_b = report.strip_timings(report.read_json_report(b / "report.json"))
    assert doc_a == doc_b


# -------------------------------------------------------------------- search

def test_search_with_checkpoint(ws, tmp_path):
    out = fresh(tmp_path, "search_ckpt")
    assert main(["search", "--data", str(ws.train_manifest),
                 "--checkpoint", str(ws.checkpoint), "--out", str(out),
                 "--budget", "10"]) == 0
    doc = report.read_json_report(out / "report.json")
    assert doc["config"]["budget"] == 10
    videos = doc["results"]["videos"]
    assert sorted(videos) == [f"video_{i:04d}" for i in range(4)]
    # classes without any usable background points are skipped, so the count
    # is bounded by the present (video, class) pairs but may be smaller
    assert doc["results"]["n_searches"] == sum(len(v) for v in videos.values())
    assert doc["results"]["n_searches"] >= 1
    for entry in doc["results"]["videos"].values():
        for found in entry.values():
            for start, end, is_action in found["spans"]:
                assert 1 <= start <= end
                assert is_action in (0, 1)
            assert 0.0 <= found["accuracy"] <= 1.0
    assert (out / "sequences.svg").is_file()


def test_search_on_dumped_scores_matches_checkpoint_search(inferred, ws, tmp_path):
    kwargs = ["--data", str(ws.test_manifest), "--budget", "10"]
    out_ckpt = fresh(tmp_path, "s_ckpt")
    assert main(["search", *kwargs, "--checkpoint", str(ws.checkpoint),
                 "--out", str(out_ckpt)]) == 0
    out_scores = fresh(tmp_path, "s_scores")
    assert main(["search", *kwargs, "--scores", str(inferred / "scores"),
                 "--out", str(out_scores)]) == 0
    doc_c = report.read_json_report(out_ckpt / "report.json")["results"]
    doc_s = report.read_json_report(out_scores / "report.json")["results"]
    assert doc_c["n_searches"] == doc_s["n_searches"]
    assert sorted(doc_c["videos"]) == sorted(doc_s["videos"])
    # scores roundtrip through 32-bit storage, so allow tiny numeric drift
    assert doc_s["mean_accuracy"] == pytest.approx(doc_c["mean_accuracy"], abs=1e-6)


def test_search_needs_exactly_one_score_source(ws, tmp_path, capsys):
    base = ["search", "--data", str(ws.train_manifest),
            "--out", str(tmp_path / "out")]
    assert main(base) == 2
    assert "exactly one" in capsys.readouterr().err
    assert main([*base, "--checkpoint", str(ws.checkpoint),
                 "--scores", str(tmp_path)]) == 2


# ------------------------------------------------------------------- analyze

def test_analyze_outputs(ws, tmp_path):
    out = fresh(tmp_path, "analyze")
    assert main(["analyze", "--data", str(ws.train_manifest),
                 "--checkpoint", str(ws.checkpoint), "--out", str(out),
                 "--samples", "300", "--seed", "1",
                 "--budget-sweep", "1,5"]) == 0
    doc = report.read_json_report(out / "report.json")
    assert doc["config"]["budgets"] == [1, 5]
    sweep = doc["results"]["budget_sweep"]
    assert [row["budget"] for row in sweep] == [1, 5]
    for row in sweep:
        assert row["n_searches"] > 0
    corr = doc["results"]["correlation"]
    assert corr["n_samples"] == 300
    csv_lines = (out / "intervals.csv").read_text().splitlines()
    assert len(csv_lines) == 1 + 300
    budget_lines = (out / "budget.csv").read_text().splitlines()
    assert len(budget_lines) == 1 + 2
    assert (out / "scatter.svg").is_file()
    assert (out / "budget.svg").is_file()


# ------------------------------------------------------------------- general

def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("ptal ")


def test_unknown_subcommand_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
