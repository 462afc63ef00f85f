"""Human-readable run summaries: text tables, CSV, and rendered figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import render_accuracy  # noqa: E402

_PNG_METADATA = {"Software": None}  # keep output bytes reproducible

BREAKDOWN_DIMENSIONS = ("by_qtype", "by_difficulty", "by_subfield")


def summary_table(summary: dict) -> str:
    lines = [
        f"questions     {summary['total']}",
        f"correct       {summary['correct']}",
        f"accuracy      {render_accuracy(summary['accuracy'])}",
        "",
    ]
    for dimension in BREAKDOWN_DIMENSIONS:
        title = dimension.removeprefix("by_")
        lines.append(f"{title}:")
        for key, bucket in summary[dimension].items():
            lines.append(
                f"  {key:<22} {bucket['correct']:>4}/{bucket['total']:<4} "
                f"{render_accuracy(bucket['accuracy'])}"
            )
        lines.append("")
    return "\n".join(lines)


def write_breakdown_csv(summary: dict, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["dimension", "key", "total", "correct", "accuracy"])
        writer.writerow(
            ["overall", "all", summary["total"], summary["correct"],
             render_accuracy(summary["accuracy"])]
        )
        for dimension in BREAKDOWN_DIMENSIONS:
            for key, bucket in summary[dimension].items():
                writer.writerow(
                    [
                        dimension.removeprefix("by_"),
                        key,
                        bucket["total"],
                        bucket["correct"],
                        render_accuracy(bucket["accuracy"]),
                    ]
                )


def plot_accuracy_breakdown(summary: dict, path: Path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for axis, dimension in zip(axes, BREAKDOWN_DIMENSIONS):
        buckets = summary[dimension]
        keys = list(buckets)
        values = [buckets[k]["accuracy"] or 0.0 for k in keys]
        axis.bar(range(len(keys)), values, color="#4878a8")
        axis.set_xticks(range(len(keys)))
        axis.set_xticklabels(keys, rotation=30, ha="right", fontsize=8)
        axis.set_ylim(0, 100)
        axis.set_ylabel("accuracy (%)")
        axis.set_title(dimension.removeprefix("by_"))
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def plot_refinement_progress(per_iteration: list[dict], path: Path) -> None:
    iterations = [entry["iteration"] for entry in per_iteration]
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    for group, style in (("q_plus", "o-"), ("q_minus", "s--"), ("q_gap", "^:")):
        left.plot(
            iterations,
            [entry["sizes_after"][group] for entry in per_iteration],
            style,
            label=group,
        )
    left.set_xlabel("iteration")
    left.set_ylabel("questions")
    left.set_title("partition after each iteration")
    left.legend(fontsize=8)
    left.set_xticks(iterations)

    width = 0.35
    right.bar(
        [i - width / 2 for i in iterations],
        [entry["commits"] for entry in per_iteration],
        width,
        label="commits",
        color="#3a7d44",
    )
    right.bar(
        [i + width / 2 for i in iterations],
        [entry["rollbacks"] for entry in per_iteration],
        width,
        label="rollbacks",
        color="#a84848",
    )
    right.set_xlabel("iteration")
    right.set_ylabel("gate outcomes")
    right.set_title("commits and rollbacks")
    right.legend(fontsize=8)
    right.set_xticks(iterations)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def delta_pp(with_summary: dict, baseline_summary: dict) -> Optional[float]:
    """Absolute improvement in percentage points over the baseline."""
    if with_summary["accuracy"] is None or baseline_summary["accuracy"] is None:
        return None
    return round(with_summary["accuracy"] - baseline_summary["accuracy"], 2)


def render_eval_report(run_dir: Path, out_dir: Path) -> list[Path]:
    """Render text, CSV, and figures for a directory written by the eval command."""
    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    out_dir.mkdir(parents=True, exist_ok=True)
    figures_dir = out_dir / "figures"
    figures_dir.mkdir(exist_ok=True)

    text = summary_table(summary)
    baseline_path = run_dir / "baseline_summary.json"
    if baseline_path.is_file():
        baseline = json.loads(baseline_path.read_text(encoding="utf-8"))
        delta = delta_pp(summary, baseline)
        delta_display = "—" if delta is None else f"{delta:+.2f} pp"
        text += (
            f"baseline accuracy   {render_accuracy(baseline['accuracy'])}\n"
            f"delta               {delta_display}\n"
        )

    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    write_breakdown_csv(summary, out_dir / "breakdown.csv")
    plot_accuracy_breakdown(summary, figures_dir / "accuracy_breakdown.png")
    return [out_dir / "report.txt", out_dir / "breakdown.csv", figures_dir / "accuracy_breakdown.png"]


def render_refinement_report(run_dir: Path, out_dir: Path) -> list[Path]:
    manifest = json.loads(
        (run_dir / "refinement_manifest.json").read_text(encoding="utf-8")
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    figures_dir = out_dir / "figures"
    figures_dir.mkdir(exist_ok=True)

    lines = [
        f"iterations    {manifest['iterations']}",
        f"tau_cov       {manifest['tau_cov']}",
        f"tau_safe      {manifest['tau_safe_retain']}",
        f"n_max         {manifest['n_max']}",
        "",
        "iter  q+ before  q- before  gap before  q+ after  q- after  gap after  commits  rollbacks",
    ]
    for entry in manifest["per_iteration"]:
        before, after = entry["sizes_before"], entry["sizes_after"]
        lines.append(
            f"{entry['iteration']:>4}  {before['q_plus']:>9}  {before['q_minus']:>9}  "
            f"{before['q_gap']:>10}  {after['q_plus']:>8}  {after['q_minus']:>8}  "
            f"{after['q_gap']:>9}  {entry['commits']:>7}  {entry['rollbacks']:>9}"
        )
    lines.append("")
    lines.append(f"final library version  {manifest['final_library_version']}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    with (out_dir / "iterations.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["iteration", "q_plus_after", "q_minus_after", "q_gap_after", "commits", "rollbacks"]
        )
        for entry in manifest["per_iteration"]:
            after = entry["sizes_after"]
            writer.writerow(
                [
                    entry["iteration"],
                    after["q_plus"],
                    after["q_minus"],
                    after["q_gap"],
                    entry["commits"],
                    entry["rollbacks"],
                ]
            )
    plot_refinement_progress(
        manifest["per_iteration"], figures_dir / "refinement_progress.png"
    )
    return [
        out_dir / "report.txt",
        out_dir / "iterations.csv",
        figures_dir / "refinement_progress.png",
    ]
