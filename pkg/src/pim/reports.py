"""Experiment report writers: line-oriented text, key=value file, CSV, and a
rendered figure per experiment, all side by side in the output directory."""

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(report, out_dir, basename="report"):
    """Write report.txt / report.kv / report.csv / report.png for one
    experiment; returns the key-value file path."""
    os.makedirs(out_dir, exist_ok=True)
    txt_path = os.path.join(out_dir, f"{basename}.txt")
    kv_path = os.path.join(out_dir, f"{basename}.kv")
    csv_path = os.path.join(out_dir, f"{basename}.csv")
    png_path = os.path.join(out_dir, f"{basename}.png")

    with open(txt_path, "w", encoding="utf-8") as f:
        f.write(f"experiment: {report.kind}\n")
        if report.score is not None:
            f.write(f"score: {_fmt(report.score)}\n")
        f.write(f"seed: {report.seed}\n")
        for k, v in sorted(report.config.items()):
            f.write(f"{k}: {_fmt(v)}\n")
        for label, value in report.conditions:
            f.write(f"condition {label} value {_fmt(value)}\n")

    with open(kv_path, "w", encoding="utf-8") as f:
        f.write(f"experiment={report.kind}\n")
        if report.score is not None:
            f.write(f"score={_fmt(report.score)}\n")
        f.write(f"seed={report.seed}\n")
        for k, v in sorted(report.config.items()):
            f.write(f"config.{k}={_fmt(v)}\n")
        for label, value in report.conditions:
            f.write(f"condition.{label}={_fmt(value)}\n")

    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["condition", "value"])
        if report.score is not None:
            w.writerow(["score", _fmt(report.score)])
        for label, value in report.conditions:
            w.writerow([label, _fmt(value)])

    _render_figure(report, png_path)
    return kv_path


def read_report(kv_path):
    """Parse a report.kv file back into a flat dict (round-trip aid)."""
    out = {}
    with open(kv_path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or "=" not in line:
                continue
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _render_figure(report, png_path):
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    labels = [c[0] for c in report.conditions]
    values = [c[1] for c in report.conditions]
    numeric = [v for v in values if isinstance(v, (int, float))]
    if labels and len(numeric) == len(values):
        xs = range(len(labels))
        if len(labels) > 1:
            ax.plot(xs, values, marker="o")
        else:
            ax.bar(xs, values, width=0.5)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("value")
    elif report.score is not None:
        ax.bar([0], [report.score], width=0.4)
        ax.set_xticks([0])
        ax.set_xticklabels([report.kind])
        ax.set_ylabel("score")
    title = report.kind if report.score is None else f"{report.kind}: {report.score:.4g}"
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)


def write_loss_curve(log_entries, out_dir, basename="loss_curve"):
    """Render the training loss and beta schedule from the step log."""
    os.makedirs(out_dir, exist_ok=True)
    png_path = os.path.join(out_dir, f"{basename}.png")
    steps = [e.step for e in log_entries]
    losses = [e.loss for e in log_entries]
    betas = [e.beta for e in log_entries]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.8, label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(steps, betas, lw=0.8, color="tab:orange", label="beta")
    ax2.set_ylabel("beta")
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return png_path
