"""Figure rendering for the report paths.

Every plot-bound artifact (loss curves, fold metrics, label-efficiency
rows, attention maps, bench stats) gets a PNG rendered next to its CSV or
JSON source. Rendering is best-effort decoration of the delimited
outputs, never a data source.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, out_png):
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_loss_curve(csv_path, out_png):
    rows = list(csv.DictReader(open(csv_path)))
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax, ax_lr) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax.plot(epochs, [float(r["train_loss"]) for r in rows], label="train")
    ax.plot(epochs, [float(r["val_loss"]) for r in rows], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax_lr.plot(epochs, [float(r["lr"]) for r in rows], color="tab:green")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("lr")
    return _save(fig, out_png)


def plot_cv_metrics(metrics, out_png):
    fig, ax = plt.subplots(figsize=(6, 3.2))
    folds = metrics["folds"]
    xs = range(len(folds))
    if metrics["mode"] == "three_class":
        ax.bar(xs, [f["overall"]["accuracy"] for f in folds], color="tab:blue")
        ax.set_ylabel("overall accuracy")
    else:
        width = 0.4
        ax.bar([x - width / 2 for x in xs], [f["head_hc_pd"]["accuracy"] for f in folds],
               width, label="HC vs PD")
        ax.bar([x + width / 2 for x in xs], [f["head_pd_dd"]["accuracy"] for f in folds],
               width, label="PD vs DD")
        ax.legend()
        ax.set_ylabel("accuracy")
    ax.set_xlabel("fold")
    ax.set_ylim(0, 1.02)
    return _save(fig, out_png)


def plot_label_efficiency(csv_path, out_png):
    rows = list(csv.DictReader(open(csv_path)))
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for mode in sorted({r["mode"] for r in rows}):
        pts = sorted((float(r["fraction"]), float(r["head1_acc"]), float(r["head2_acc"]))
                     for r in rows if r["mode"] == mode)
        ax.plot([p[0] for p in pts], [(p[1] + p[2]) / 2 for p in pts], marker="o", label=mode)
    ax.set_xlabel("label fraction")
    ax.set_ylabel("mean head accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    return _save(fig, out_png)


def plot_attention_map(matrix, out_png, title=""):
    fig, ax = plt.subplots(figsize=(4, 3.6))
    im = ax.imshow(matrix, aspect="auto", origin="lower", cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("key step")
    ax.set_ylabel("query step")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, out_png)


def plot_bench(report, out_png):
    fig, ax = plt.subplots(figsize=(4.4, 3.2))
    keys = ["mean_ms", "p95_ms"]
    ax.bar(keys, [report[k] for k in keys], color=["tab:blue", "tab:orange"])
    ax.errorbar([0], [report["mean_ms"]], yerr=[report["std_ms"]], fmt="none",
                ecolor="black", capsize=4)
    ax.set_ylabel("latency (ms)")
    ax.set_title(f"{report['fps']:.1f} windows/s", fontsize=9)
    return _save(fig, out_png)
