"""Run reports, delimited tables, and figure rendering.

Every pipeline run writes a JSON report echoing its effective configuration
and seed; numeric results live under "results" and wall-clock measurements
under a separate "timings" subtree so reports can be compared with timings
stripped. Figures render to SVG with a fixed hash salt and no embedded date,
keeping them byte-stable for identical inputs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .inference import Proposal  # noqa: E402
from .metrics import AnalysisResult, EvalReport  # noqa: E402

REPORT_FORMAT = "ptal-report"
REPORT_VERSION = 1

plt.rcParams["svg.hashsalt"] = "ptal"
plt.rcParams["figure.max_open_warning"] = 0

_SVG_META = {"Date": None}


class ReportError(Exception):
    """Malformed report or interchange file."""


def write_json_report(path, subcommand: str, config: Mapping, seed,
                      results: Mapping, timings: Mapping | None = None) -> None:
    doc = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "subcommand": subcommand,
        "seed": seed,
        "config": dict(config),
        "results": dict(results),
        "timings": dict(timings or {}),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != REPORT_FORMAT:
        raise ReportError(f"{path}: not a run report")
    return doc


def strip_timings(doc: Mapping) -> dict:
    """Copy of a report without its timing subtree, for determinism checks."""
    out = {k: v for k, v in doc.items() if k != "timings"}
    return out


def write_proposals_tsv(path, proposals_by_video: Mapping[str, Sequence[Proposal]]) -> None:
    """One proposal per line: video, class, 1-based span, full-precision score."""
    lines = ["video_id\tclass_id\tstart\tend\tconfidence"]
    for vid in sorted(proposals_by_video):
        for p in proposals_by_video[vid]:
            lines.append(f"{vid}\t{p.class_id}\t{p.start}\t{p.end}\t{p.confidence!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_proposals_tsv(path) -> dict[str, list[Proposal]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].split("\t") != ["video_id", "class_id", "start", "end", "confidence"]:
        raise ReportError(f"{path}: missing proposals header")
    out: dict[str, list[Proposal]] = {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ReportError(f"{path}:{lineno}: expected 5 columns, got {len(parts)}")
        vid, cls, start, end, conf = parts
        out.setdefault(vid, []).append(
            Proposal(int(cls), int(start), int(end), float(conf))
        )
    return out


def write_epoch_csv(path, report_dict: Mapping) -> None:
    """Per-epoch loss components and sequence accuracy from a train report."""
    fields = ["epoch", "loss_total", "loss_video", "loss_point", "loss_score",
              "loss_feature", "sequence_accuracy", "n_searches", "n_skipped_classes"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in report_dict["epochs"]:
            writer.writerow({k: row.get(k) for k in fields})


def write_ap_csv(path, report: EvalReport) -> None:
    classes = sorted({c for row in report.ap.values() for c in row})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iou_threshold"] + [f"ap_class_{c}" for c in classes] + ["map"])
        for t in report.iou_thresholds:
            row = [f"{t:g}"]
            for c in classes:
                v = report.ap[t][c]
                row.append("" if v is None else f"{v:.6f}")
            row.append(f"{report.map_at[t]:.6f}")
            writer.writerow(row)


def write_analysis_csv(path, analysis: AnalysisResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "class_id", "start", "end", "iou",
                         "inner_mean", "contrast"])
        for i in range(len(analysis.starts)):
            writer.writerow([
                analysis.video_ids[i], analysis.class_ids[i],
                analysis.starts[i], analysis.ends[i],
                f"{analysis.ious[i]:.6f}", f"{analysis.inner_means[i]:.6f}",
                f"{analysis.contrasts[i]:.6f}",
            ])


def write_budget_csv(path, rows: Sequence[Mapping]) -> None:
    """One row per search budget from a budget sweep."""
    fields = ["budget", "mean_score", "mean_accuracy", "n_searches", "wall_seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def save_training_curves(path, report_dict: Mapping) -> None:
    epochs = report_dict["epochs"]
    xs = [e["epoch"] for e in epochs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    for key, style in (("loss_total", "-"), ("loss_video", "--"),
                       ("loss_point", "--"), ("loss_score", ":"), ("loss_feature", ":")):
        ax1.plot(xs, [e[key] for e in epochs], style, label=key.replace("loss_", ""))
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.set_title("training losses")
    acc = [(e["epoch"], e["sequence_accuracy"]) for e in epochs
           if e["sequence_accuracy"] is not None]
    if acc:
        ax2.plot([a for a, _ in acc], [b for _, b in acc], "-o", markersize=2)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("sequence accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.set_title("best-sequence frame accuracy")
    fig.tight_layout()
    _save(fig, path)


def save_sequence_panels(path, panels: Sequence[Mapping]) -> None:
    """One row per (video, class): score track, found spans, ground truth.

    Each panel dict needs: title, row (score track), spans (list of
    (start, end, is_action)), truth (binary vector), points (segment indices).
    """
    n = max(1, len(panels))
    fig, axes = plt.subplots(n, 1, figsize=(9, 1.9 * n), squeeze=False)
    for ax, panel in zip(axes[:, 0], panels):
        row = panel["row"]
        xs = range(1, len(row) + 1)
        ax.plot(xs, row, lw=1.0, label="fused score")
        for start, end, is_action in panel["spans"]:
            if is_action:
                ax.axvspan(start - 0.5, end + 0.5, ymin=0.0, ymax=0.16,
                           color="tab:orange", alpha=0.8)
        truth = panel["truth"]
        for i, v in enumerate(truth):
            if v:
                ax.axvspan(i + 0.5, i + 1.5, ymin=0.20, ymax=0.30,
                           color="tab:green", alpha=0.5)
        for t in panel["points"]:
            ax.axvline(t, color="tab:red", lw=0.8, alpha=0.7)
        ax.set_ylim(-0.05, 1.05)
        ax.set_title(panel["title"], fontsize=8)
    axes[-1, 0].set_xlabel("segment")
    fig.tight_layout()
    _save(fig, path)


def save_map_curve(path, report: EvalReport) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ts = list(report.iou_thresholds)
    ax.plot(ts, [report.map_at[t] for t in ts], "-o", label="mAP")
    classes = sorted({c for row in report.ap.values() for c in row
                      if row[c] is not None})
    for c in classes:
        ax.plot(ts, [report.ap[t].get(c) for t in ts], "--", alpha=0.5,
                label=f"class {c}")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    ax.set_title("localization quality")
    fig.tight_layout()
    _save(fig, path)


def save_analysis_scatter(path, analysis: AnalysisResult) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.8))
    ax1.scatter(analysis.inner_means, analysis.ious, s=4, alpha=0.35)
    r1 = "n/a" if analysis.r_inner is None else f"{analysis.r_inner:.3f}"
    ax1.set_title(f"inside mean vs IoU (r = {r1})", fontsize=9)
    ax1.set_xlabel("inside mean")
    ax1.set_ylabel("IoU")
    ax2.scatter(analysis.contrasts, analysis.ious, s=4, alpha=0.35,
                color="tab:orange")
    r2 = "n/a" if analysis.r_contrast is None else f"{analysis.r_contrast:.3f}"
    ax2.set_title(f"flank contrast vs IoU (r = {r2})", fontsize=9)
    ax2.set_xlabel("flank contrast")
    ax2.set_ylabel("IoU")
    fig.tight_layout()
    _save(fig, path)


def save_budget_curve(path, rows: Sequence[Mapping]) -> None:
    budgets = [r["budget"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(budgets, [r["mean_score"] for r in rows], "-o")
    ax1.set_xscale("log")
    ax1.set_xlabel("search budget")
    ax1.set_ylabel("mean sequence score")
    ax1.set_title("score vs budget")
    ax2.plot(budgets, [r["wall_seconds"] for r in rows], "-o", color="tab:red")
    ax2.set_xscale("log")
    ax2.set_xlabel("search budget")
    ax2.set_ylabel("wall seconds")
    ax2.set_title("cost vs budget")
    fig.tight_layout()
    _save(fig, path)
