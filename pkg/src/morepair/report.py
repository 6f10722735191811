"""Report artifacts: line-oriented records, the stdout table, and figures.

Every report path writes a machine-readable jsonl file and renders a
matplotlib figure next to it: a loss curve beside the training log, a TOP-k
bar chart beside the evaluation report.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evalharness import EvalReport

__all__ = [
    "write_eval_report",
    "load_report_matrix",
    "format_top_k_table",
    "render_loss_curve",
    "render_top_k_chart",
]


def write_eval_report(report: EvalReport, path) -> Path:
    """Header line with the summary, then one line per problem row."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({
            "type": "header",
            "benchmark": report.benchmark_name,
            "top_k": {str(k): v for k, v in sorted(report.top_k_values.items())},
            "candidates": len(report.matrix[0]) if report.matrix else 0,
            "config": report.config_snapshot,
            "started": report.started,
            "finished": report.finished,
        }, ensure_ascii=False) + "\n")
        for pid, passes, statuses in zip(report.problem_ids, report.matrix,
                                         report.statuses):
            fh.write(json.dumps({
                "type": "problem",
                "id": pid,
                "passes": passes,
                "statuses": statuses,
            }, ensure_ascii=False) + "\n")
    return path


def load_report_matrix(path) -> tuple[list[str], list[list[bool]]]:
    ids, matrix = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            if record.get("type") == "problem":
                ids.append(record["id"])
                matrix.append(record["passes"])
    return ids, matrix


def format_top_k_table(report: EvalReport) -> str:
    lines = [
        f"benchmark: {report.benchmark_name}  "
        f"({len(report.problem_ids)} problems)",
        "metric    value",
        "------    -----",
    ]
    for k, value in sorted(report.top_k_values.items()):
        lines.append(f"TOP-{k:<5} {value:5.1f}")
    return "\n".join(lines)


def render_loss_curve(log_path, out_path) -> Path:
    """Loss curve figure from a training log of {step, loss1, loss2, combined}."""
    steps, loss1, loss2, combined = [], [], [], []
    with open(log_path, "r", encoding="utf-8") as fh:
        for line in fh:
            record = json.loads(line)
            if "step" not in record:
                continue
            steps.append(record["step"])
            loss1.append(record["loss1"])
            loss2.append(record.get("loss2"))
            combined.append(record["combined"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, combined, label="combined", lw=1.5)
    ax.plot(steps, loss1, label="code objective", lw=1.0, alpha=0.8)
    if any(v is not None for v in loss2):
        pts = [(s, v) for s, v in zip(steps, loss2) if v is not None]
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                label="guidance objective", lw=1.0, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_top_k_chart(report: EvalReport, out_path) -> Path:
    ks = sorted(report.top_k_values)
    values = [report.top_k_values[k] for k in ks]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar([f"TOP-{k}" for k in ks], values, color="#4878a8")
    for i, v in enumerate(values):
        ax.text(i, v + 1, f"{v:.1f}", ha="center", fontsize=9)
    ax.set_ylim(0, 105)
    ax.set_ylabel("% problems repaired")
    ax.set_title(report.benchmark_name or "evaluation")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
