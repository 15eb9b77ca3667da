"""Figure rendering for reports: PR curves, overlays, training traces.

Everything renders through the Agg backend straight to PNG files, so the
report commands work headless and their figures land next to the text
output they illustrate.
"""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import InputError
from .evaluation import bilinear_resize, expand_map_to_frames


def _save(fig, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def save_pr_curve(report, path, title="attention localization"):
    """Precision-recall curve with the best-F1 operating point marked."""
    recalls = [p.recall for p in report.curve]
    precisions = [p.precision for p in report.curve]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(recalls, precisions, lw=1.5)
    ax.plot([report.best.recall], [report.best.precision], "o", ms=8,
            label=f"best F1 {report.best.f1:.3f} @ thr {report.best.threshold:.3g}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{title} (tol {report.tolerance}px @ {report.resolution}px)")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    return _save(fig, path)


def save_attention_overlay(rgb_clip, amap, path, frames=(0, -1)):
    """Chosen frames with the upsampled attention map blended on top."""
    rgb_clip = np.asarray(rgb_clip)
    amap = np.asarray(amap, dtype=np.float64)
    if rgb_clip.ndim != 4 or amap.ndim != 3:
        raise InputError("need one clip (T,H,W,3) and its map (T_grid,H,W)")
    t_frames, h, w, _ = rgb_clip.shape
    per_frame = expand_map_to_frames(amap, t_frames)
    fig, axes = plt.subplots(1, len(frames), figsize=(4 * len(frames), 4))
    if len(frames) == 1:
        axes = [axes]
    for ax, f in zip(axes, frames):
        f = f % t_frames
        heat = bilinear_resize(per_frame[f], h, w)
        peak = heat.max()
        if peak > 0:
            heat = heat / peak
        ax.imshow(rgb_clip[f])
        ax.imshow(heat, cmap="inferno", alpha=0.45, vmin=0.0, vmax=1.0)
        ax.set_title(f"frame {f}")
        ax.axis("off")
    return _save(fig, path)


def parse_training_log(path):
    """Step records and epoch summaries from a harness log file.

    Returns (steps, epochs): steps as a float array with columns
    epoch, step, ce, kl_distill, kl_uniform, total, lr; epochs as a list of
    (epoch, mean_total) pairs.
    """
    steps, epochs = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                cols = line.split()
                if "mean_total" in cols:
                    epoch = int(cols[2])
                    mean = float(cols[cols.index("mean_total") + 1])
                    epochs.append((epoch, mean))
                continue
            cols = line.split()
            if len(cols) != 7:
                raise InputError(f"malformed log line: {line!r}")
            steps.append([float(c) for c in cols])
    if not steps:
        raise InputError(f"log {path} holds no step records")
    return np.array(steps), epochs


def save_training_curves(log_path, path):
    """Loss components over steps plus the per-epoch mean total."""
    steps, epochs = parse_training_log(log_path)
    x = np.arange(len(steps))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(x, steps[:, 5], lw=0.8, alpha=0.8, label="total")
    ax.plot(x, steps[:, 2], lw=0.8, alpha=0.8, label="ce")
    if np.any(steps[:, 3] != 0):
        ax.plot(x, steps[:, 3], lw=0.8, alpha=0.6, label="mimicry")
    if np.any(steps[:, 4] != 0):
        ax.plot(x, steps[:, 4], lw=0.8, alpha=0.6, label="uniform kl")
    if epochs:
        per_epoch = len(steps) / len(epochs)
        ex = [(e + 1) * per_epoch - 1 for e, _ in enumerate(epochs)]
        ax.plot(ex, [m for _, m in epochs], "k.-", lw=1.2, ms=5,
                label="epoch mean total")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def save_accuracy_bars(entries, path, title="forward vs reversed accuracy"):
    """Grouped bars of forward/reversed accuracy per labeled run.

    entries: list of (label, forward, reversed) triples.
    """
    if not entries:
        raise InputError("no accuracy entries to plot")
    labels = [e[0] for e in entries]
    fwd = [e[1] for e in entries]
    rev = [e[2] for e in entries]
    x = np.arange(len(entries))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.6 * len(entries) + 2, 4))
    ax.bar(x - width / 2, fwd, width, label="forward")
    ax.bar(x + width / 2, rev, width, label="reversed")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("mean class accuracy")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    return _save(fig, path)
