"""Command line pipeline: gen-data, train, search, infer, eval, analyze.

Every subcommand reads an optional JSON config file (strict schema, unknown
keys rejected), applies command line overrides on top, writes its artifacts
into --out, and drops a JSON report echoing the effective config and seed.
Verbosity comes from --log-level or the PTAL_LOG environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, model, report
from .inference import InferenceConfig, InferenceError, generate_proposals, temporal_nms
from .losses import LossError
from .metrics import (DEFAULT_AVERAGE_RANGES, DEFAULT_IOU_THRESHOLDS,
                      MetricsError, contrast_iou_analysis, evaluate)
from .mining import MiningError, mine_pseudo_background
from .model import CheckpointError
from .sequence import SequenceError, greedy_search, sequence_accuracy
from .synthio import (FeatureFormatError, SynthesisError, SyntheticSpec,
                      export_annotations, generate_dataset, load_dataset,
                      read_features, write_dataset, write_features)
from .trainer import TrainConfig, TrainingError, run_training

log = logging.getLogger("ptal")

CONFIG_SECTIONS = ("synthetic", "train", "inference", "evaluation")
DEFAULT_BUDGET_SWEEP = (1, 5, 10, 25, 50, 100)

_USER_ERRORS = (SynthesisError, TrainingError, SequenceError, LossError,
                MiningError, MetricsError, InferenceError, CheckpointError,
                FeatureFormatError, report.ReportError, FileNotFoundError,
                ValueError, KeyError)


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    allowed = set(CONFIG_SECTIONS) | {"seed"}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {unknown}")
    for section in CONFIG_SECTIONS:
        if section in cfg and not isinstance(cfg[section], dict):
            raise ConfigError(f"{path}: section {section!r} must be a JSON object")
    return cfg


def _section(cfg: dict, name: str, overrides: dict) -> dict:
    merged = dict(cfg.get(name, {}))
    if "seed" not in merged and "seed" in cfg and overrides.get("seed") is None:
        merged["seed"] = cfg["seed"]
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _parse_ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _forward_all(records, params):
    """Fused scores, background scores, and video scores for each record."""
    out = {}
    for rec in sorted(records, key=lambda r: r.video_id):
        result = model.forward(rec.features, params)
        out[rec.video_id] = (
            result.fused_scores.value,
            result.background_scores.value,
            model.video_scores(result.fused_scores).value,
        )
    return out


def _sequences_for_video(rec, fused, background, *, budget, variant,
                         strict_start, outer_ratio, mining_threshold,
                         mining_mode):
    """Greedy sequences per present class, with accuracy against the truth."""
    mined = mine_pseudo_background(
        background, rec.points.action_times(), mining_threshold, mining_mode
    )
    results = {}
    for c in rec.points.present_classes():
        acts = [p.t for p in rec.points.action if p.label == c]
        other = [p.t for p in rec.points.action if p.label != c]
        bkgs = sorted(set(mined) | set(other))
        if not bkgs:
            continue
        found = greedy_search(
            fused[c], acts, bkgs, budget=budget, outer_ratio=outer_ratio,
            variant=variant, strict_start=strict_start, class_id=c,
        )
        acc = sequence_accuracy(found.sequence, rec.occupancy(c))
        results[c] = (found, acc)
    return results


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    overrides = {"seed": args.seed, "n_videos": args.n_videos}
    spec = SyntheticSpec.from_mapping(_section(cfg, "synthetic", overrides))
    out = _out_dir(args)
    started = time.perf_counter()
    records = generate_dataset(spec)

    splits: list[tuple[str, Path, list]] = []
    if args.split:
        names_counts = []
        for token in args.split.split(","):
            name, _, count = token.partition("=")
            if not count:
                raise ConfigError(f"bad split token {token!r}, expected name=count")
            names_counts.append((name.strip(), int(count)))
        total = sum(c for _, c in names_counts)
        if total != spec.n_videos:
            raise ConfigError(
                f"split counts sum to {total} but the spec generates {spec.n_videos} videos"
            )
        lo = 0
        for name, count in names_counts:
            splits.append((name, out / name, records[lo : lo + count]))
            lo += count
    else:
        splits.append(("all", out, records))

    summary = {}
    for name, directory, chunk in splits:
        manifest_path = write_dataset(directory, chunk, spec)
        export_annotations(directory / "annotations.tsv", chunk)
        summary[name] = {
            "n_videos": len(chunk),
            "manifest": str(manifest_path.relative_to(out)),
            "n_instances": sum(len(r.ground_truth) for r in chunk),
        }
        log.info("wrote %d videos to %s", len(chunk), directory)
    report.write_json_report(
        out / "report.json", "gen-data", spec.to_dict(), spec.seed,
        {"splits": summary},
        {"total_seconds": time.perf_counter() - started},
    )
    print(f"generated {spec.n_videos} videos under {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    overrides = {
        "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.learning_rate, "budget": args.budget,
        "scoring_variant": args.variant, "search_frequency": args.search_frequency,
        "mining_mode": args.mining_mode, "mining_frequency": args.mining_frequency,
    }
    if args.strict_start:
        overrides["strict_start"] = True
    train_config = TrainConfig.from_mapping(_section(cfg, "train", overrides))
    records, _ = load_dataset(args.data)
    out = _out_dir(args)

    train_report, params = run_training(records, train_config)
    model.save_checkpoint(out / "checkpoint.ptlh", params)
    doc = train_report.to_dict()
    timings = doc.pop("timings")
    report.write_json_report(out / "report.json", "train", train_config.to_dict(),
                             train_config.seed, doc, timings)
    report.write_epoch_csv(out / "epochs.csv", doc)
    report.save_training_curves(out / "curves.svg", doc)
    if doc["epochs"]:
        last = doc["epochs"][-1]
        print(f"trained {len(doc['epochs'])} epochs; "
              f"final loss {last['loss_total']:.4f}; checkpoint at {out / 'checkpoint.ptlh'}")
    else:
        print(f"no epochs requested; initial checkpoint at {out / 'checkpoint.ptlh'}")
    return 0


def _load_scores(scores_dir: Path, records):
    """Score matrices dumped by `infer --dump-scores`: fused rows + background."""
    out = {}
    for rec in records:
        matrix = read_features(scores_dir / f"{rec.video_id}.ptal")
        if matrix.shape[0] < 2 or matrix.shape[1] != rec.n_segments:
            raise ConfigError(
                f"score matrix for {rec.video_id} has shape {matrix.shape}, "
                f"expected [classes + 1, {rec.n_segments}]"
            )
        fused, background = matrix[:-1], matrix[-1]
        video = np.array([
            np.sort(row)[-model.top_k_for_length(len(row)):].mean() for row in fused
        ])
        out[rec.video_id] = (fused, background, video)
    return out


def _cmd_search(args) -> int:
    cfg = _load_config(args.config)
    train_defaults = _section(cfg, "train", {})
    loss_defaults = train_defaults.get("loss", {})
    budget = args.budget if args.budget is not None else train_defaults.get("budget", 25)
    variant = args.variant or train_defaults.get("scoring_variant", "contrast_both")
    outer_ratio = loss_defaults.get("outer_ratio", 0.25)
    mining_threshold = loss_defaults.get("mining_threshold", 0.95)
    mining_mode = train_defaults.get("mining_mode", "sectional_fill")
    records, _ = load_dataset(args.data)
    out = _out_dir(args)

    if bool(args.checkpoint) == bool(args.scores):
        raise ConfigError("search needs exactly one of --checkpoint or --scores")
    started = time.perf_counter()
    if args.checkpoint:
        params = model.load_checkpoint(args.checkpoint)
        forwarded = _forward_all(records, params)
    else:
        forwarded = _load_scores(Path(args.scores), records)

    videos = {}
    panels = []
    scores_acc, acc_acc = [], []
    for rec in sorted(records, key=lambda r: r.video_id):
        fused, background, _ = forwarded[rec.video_id]
        found = _sequences_for_video(
            rec, fused, background, budget=budget, variant=variant,
            strict_start=args.strict_start, outer_ratio=outer_ratio,
            mining_threshold=mining_threshold, mining_mode=mining_mode,
        )
        entry = {}
        for c, (scored, acc) in sorted(found.items()):
            entry[str(c)] = {
                "spans": [[s.start, s.end, int(s.is_action)] for s in scored.sequence.spans],
                "score": scored.score,
                "accuracy": acc,
            }
            scores_acc.append(scored.score)
            acc_acc.append(acc)
            if len(panels) < args.plot_limit:
                panels.append({
                    "title": f"{rec.video_id} class {c} "
                             f"(score {scored.score:.3f}, accuracy {acc:.3f})",
                    "row": fused[c],
                    "spans": [(s.start, s.end, s.is_action) for s in scored.sequence.spans],
                    "truth": rec.occupancy(c),
                    "points": [p.t for p in rec.points.action if p.label == c],
                })
        videos[rec.video_id] = entry

    results = {
        "videos": videos,
        "n_searches": len(scores_acc),
        "mean_score": float(np.mean(scores_acc)) if scores_acc else None,
        "mean_accuracy": float(np.mean(acc_acc)) if acc_acc else None,
    }
    effective = {
        "budget": budget, "variant": variant, "strict_start": args.strict_start,
        "outer_ratio": outer_ratio, "mining_threshold": mining_threshold,
        "mining_mode": mining_mode,
    }
    report.write_json_report(out / "report.json", "search", effective,
                             cfg.get("seed"), results,
                             {"total_seconds": time.perf_counter() - started})
    if panels:
        report.save_sequence_panels(out / "sequences.svg", panels)
    mean_acc = results["mean_accuracy"]
    print(f"searched {results['n_searches']} (video, class) pairs; "
          f"mean accuracy {mean_acc if mean_acc is None else round(mean_acc, 4)}")
    return 0


def _cmd_infer(args) -> int:
    cfg = _load_config(args.config)
    overrides = {
        "video_threshold": args.video_threshold,
        "nms_iou": args.nms_iou,
        "outer_ratio": args.outer_ratio,
    }
    if args.segment_thresholds is not None:
        overrides["segment_thresholds"] = _parse_floats(args.segment_thresholds)
    section = _section(cfg, "inference", overrides)
    section.pop("seed", None)
    infer_config = InferenceConfig.from_mapping(section)
    records, _ = load_dataset(args.data)
    params = model.load_checkpoint(args.checkpoint)
    out = _out_dir(args)

    started = time.perf_counter()
    forwarded = _forward_all(records, params)
    proposals_by_video = {}
    for rec in sorted(records, key=lambda r: r.video_id):
        fused, background, video = forwarded[rec.video_id]
        kept = temporal_nms(
            generate_proposals(fused, video, infer_config), infer_config.nms_iou
        )
        proposals_by_video[rec.video_id] = kept
        if args.dump_scores:
            scores_dir = out / "scores"
            scores_dir.mkdir(exist_ok=True)
            write_features(scores_dir / f"{rec.video_id}.ptal",
                           np.vstack([fused, background[None, :]]))
    report.write_proposals_tsv(out / "proposals.tsv", proposals_by_video)
    n_total = sum(len(v) for v in proposals_by_video.values())
    report.write_json_report(
        out / "report.json", "infer", infer_config.to_dict(), None,
        {"n_videos": len(records), "n_proposals": n_total,
         "per_video": {vid: len(v) for vid, v in sorted(proposals_by_video.items())}},
        {"total_seconds": time.perf_counter() - started},
    )
    print(f"wrote {n_total} proposals for {len(records)} videos to {out / 'proposals.tsv'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    section = _section(cfg, "evaluation", {})
    thresholds = (tuple(_parse_floats(args.iou_thresholds))
                  if args.iou_thresholds else
                  tuple(section.get("iou_thresholds", DEFAULT_IOU_THRESHOLDS)))
    if args.average_ranges:
        ranges = tuple(tuple(float(v) for v in token.split(":"))
                       for token in args.average_ranges.split(","))
    else:
        ranges = tuple(tuple(r) for r in section.get("average_ranges",
                                                     DEFAULT_AVERAGE_RANGES))
    records, _ = load_dataset(args.data)
    proposals = report.read_proposals_tsv(args.proposals)
    ground_truth = [g for rec in records for g in rec.ground_truth]
    out = _out_dir(args)

    started = time.perf_counter()
    result = evaluate(proposals, ground_truth, thresholds, ranges,
                      video_ids=[r.video_id for r in records])
    effective = {"iou_thresholds": list(thresholds),
                 "average_ranges": [list(r) for r in ranges]}
    report.write_json_report(out / "report.json", "eval", effective, None,
                             result.to_dict(),
                             {"total_seconds": time.perf_counter() - started})
    report.write_ap_csv(out / "ap.csv", result)
    report.save_map_curve(out / "map.svg", result)
    shown = ", ".join(f"mAP@{t:g}={result.map_at[t]:.4f}" for t in thresholds)
    print(shown)
    for key, value in result.average_map.items():
        print(f"average mAP {key}: {value:.4f}")
    return 0


def _cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    train_defaults = _section(cfg, "train", {})
    loss_defaults = train_defaults.get("loss", {})
    outer_ratio = loss_defaults.get("outer_ratio", 0.25)
    mining_threshold = loss_defaults.get("mining_threshold", 0.95)
    mining_mode = train_defaults.get("mining_mode", "sectional_fill")
    variant = args.variant or train_defaults.get("scoring_variant", "contrast_both")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    records, _ = load_dataset(args.data)
    params = model.load_checkpoint(args.checkpoint)
    out = _out_dir(args)

    started = time.perf_counter()
    analysis = contrast_iou_analysis(records, params, args.samples, seed, outer_ratio)
    report.write_analysis_csv(out / "intervals.csv", analysis)
    report.save_analysis_scatter(out / "scatter.svg", analysis)

    budgets = _parse_ints(args.budget_sweep) if args.budget_sweep else list(DEFAULT_BUDGET_SWEEP)
    forwarded = _forward_all(records, params)
    sweep_rows = []
    for budget in budgets:
        sweep_start = time.perf_counter()
        scores, accs = [], []
        for rec in sorted(records, key=lambda r: r.video_id):
            fused, background, _ = forwarded[rec.video_id]
            found = _sequences_for_video(
                rec, fused, background, budget=budget, variant=variant,
                strict_start=args.strict_start, outer_ratio=outer_ratio,
                mining_threshold=mining_threshold, mining_mode=mining_mode,
            )
            for _, (scored, acc) in sorted(found.items()):
                scores.append(scored.score)
                accs.append(acc)
        sweep_rows.append({
            "budget": budget,
            "mean_score": float(np.mean(scores)) if scores else 0.0,
            "mean_accuracy": float(np.mean(accs)) if accs else 0.0,
            "n_searches": len(scores),
            "wall_seconds": time.perf_counter() - sweep_start,
        })
    report.write_budget_csv(out / "budget.csv", sweep_rows)
    report.save_budget_curve(out / "budget.svg", sweep_rows)

    results = {
        "correlation": analysis.to_dict(),
        "budget_sweep": [
            {k: row[k] for k in ("budget", "mean_score", "mean_accuracy", "n_searches")}
            for row in sweep_rows
        ],
    }
    effective = {
        "samples": args.samples, "seed": seed, "variant": variant,
        "outer_ratio": outer_ratio, "mining_threshold": mining_threshold,
        "mining_mode": mining_mode, "budgets": budgets,
    }
    report.write_json_report(out / "report.json", "analyze", effective, seed,
                             results, {"total_seconds": time.perf_counter() - started})
    print(f"correlations: inside mean r={analysis.r_inner}, flank contrast r={analysis.r_contrast}")
    print(f"budget sweep written for budgets {budgets}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptal",
        description="Point-supervised temporal action localization pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"ptal {__version__}")
    parser.add_argument("--log-level", default=os.environ.get("PTAL_LOG", "WARNING"),
                        help="logging level (or set PTAL_LOG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-videos", type=int, dest="n_videos")
    p.add_argument("--split", help="comma list of name=count manifests, e.g. train=60,test=20")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the scoring head")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--budget", type=int)
    p.add_argument("--variant", choices=("contrast_both", "contrast_action", "inner_only"))
    p.add_argument("--search-frequency", choices=("per_step", "per_epoch"),
                   dest="search_frequency")
    p.add_argument("--mining-mode", choices=("sectional_fill", "sectional", "global"),
                   dest="mining_mode")
    p.add_argument("--mining-frequency", choices=("per_step", "per_epoch"),
                   dest="mining_frequency")
    p.add_argument("--strict-start", action="store_true", dest="strict_start")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("search", help="one-shot sequence search on stored scores")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="head checkpoint to score with")
    p.add_argument("--scores", help="directory of score matrices from infer --dump-scores")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--budget", type=int)
    p.add_argument("--variant", choices=("contrast_both", "contrast_action", "inner_only"))
    p.add_argument("--strict-start", action="store_true", dest="strict_start")
    p.add_argument("--plot-limit", type=int, default=6, dest="plot_limit")
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("infer", help="generate and suppress proposals")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--video-threshold", type=float, dest="video_threshold")
    p.add_argument("--segment-thresholds", dest="segment_thresholds",
                   help="comma list, e.g. 0,0.05,0.1,0.15,0.2,0.25")
    p.add_argument("--nms-iou", type=float, dest="nms_iou")
    p.add_argument("--outer-ratio", type=float, dest="outer_ratio")
    p.add_argument("--dump-scores", action="store_true", dest="dump_scores")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score proposals against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--iou-thresholds", dest="iou_thresholds",
                   help="comma list, e.g. 0.1,0.2,0.3")
    p.add_argument("--average-ranges", dest="average_ranges",
                   help="comma list of lo:hi, e.g. 0.1:0.5,0.3:0.7")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze", help="interval correlation study and budget sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("contrast_both", "contrast_action", "inner_only"))
    p.add_argument("--strict-start", action="store_true", dest="strict_start")
    p.add_argument("--budget-sweep", dest="budget_sweep",
                   help=f"comma list of budgets (default {','.join(map(str, DEFAULT_BUDGET_SWEEP))})")
    p.set_defaults(func=_cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except _USER_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
