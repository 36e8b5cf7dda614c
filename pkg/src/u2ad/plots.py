"""Raster figures: map overlays, anomaly curves, training trends, sweeps, CV box plots."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .phantom import SEGMENT_NAMES  # noqa: E402


def _save(fig, path, **meta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={k: str(v) for k, v in meta.items()})
    plt.close(fig)
    return path


def overlay(image, ano_map, components, path, title: str = "") -> Path:
    """Image with the anomaly map on top and one outline per retained component."""
    fig, ax = plt.subplots(figsize=(3, 5))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    shown = np.ma.masked_where(np.asarray(ano_map) <= 0, ano_map)
    ax.imshow(shown, cmap="inferno", alpha=0.6)
    for cc in components:
        mask = cc.mask(np.shape(image)).astype(float)
        ax.contour(mask, levels=[0.5], colors="cyan", linewidths=0.8)
    ax.set_title(title, fontsize=8)
    ax.axis("off")
    return _save(fig, path, components=len(components))


def curve_plot(curve, segment_labels, path, title: str = "") -> Path:
    """Anomaly curve along the longitudinal axis with segment boundaries."""
    curve = np.asarray(curve)
    seg = np.asarray(segment_labels)
    fig, ax = plt.subplots(figsize=(6, 2.5))
    ax.plot(np.arange(curve.size), curve, lw=1)
    rows = seg.max(axis=1)
    for s, name in enumerate(SEGMENT_NAMES, start=1):
        idx = np.flatnonzero(rows == s)
        if idx.size:
            ax.axvline(idx[0], color="gray", lw=0.5, ls="--")
            ax.text((idx[0] + idx[-1]) / 2, ax.get_ylim()[1], name, fontsize=6, ha="center", va="top")
    ax.set_xlim(0, curve.size - 1)
    ax.set_xlabel("row")
    ax.set_ylabel("anomaly")
    ax.set_title(title, fontsize=8)
    fig.tight_layout()
    return _save(fig, path, x_length=curve.size)


def trend_plot(records: list[dict], path) -> Path:
    """Loss per epoch and refresh statistics (mean EU, AU inside/outside anomalies)."""
    epochs = [r for r in records if r.get("kind") == "epoch"]
    refresh = [r for r in records if r.get("kind") == "refresh"]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    for phase in ("pretrain", "adapt"):
        pts = [(r["epoch"], r["loss"]) for r in epochs if r["phase"] == phase]
        if pts:
            axes[0].plot(*zip(*pts), label=phase, lw=1)
    axes[0].set_title("loss")
    axes[0].legend(fontsize=7)
    if refresh:
        x = [r["epoch"] for r in refresh]
        axes[1].plot(x, [r["mean_eu"] for r in refresh], marker="o", ms=3)
        axes[1].set_title("mean EU over ROI")
        if all("au_in" in r for r in refresh):
            axes[2].plot(x, [r["au_in"] for r in refresh], marker="o", ms=3, label="inside anomaly")
            axes[2].plot(x, [r["au_out"] for r in refresh], marker="o", ms=3, label="outside anomaly")
            axes[2].legend(fontsize=7)
        axes[2].set_title("mean AU")
    for ax in axes:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    return _save(fig, path, refreshes=len(refresh))


def sweep_plot(rows: list[dict], parameter: str, path) -> Path:
    """F1 and per-image time against a swept parameter (rows parsed from a sweep table)."""
    x = [float(r["value"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(x, [float(r["patient_f1_mean"]) for r in rows], marker="o", label="patient F1")
    ax.plot(x, [float(r["segment_f1_mean"]) for r in rows], marker="s", label="segment F1")
    ax.set_xlabel(parameter)
    ax.set_ylim(0, 1.05)
    ax2 = ax.twinx()
    ax2.plot(x, [float(r["seconds_per_image"]) for r in rows], color="gray", ls=":", label="s / image")
    ax2.set_ylabel("seconds per image")
    ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    return _save(fig, path, points=len(rows))


def cv_boxplot(fold_metrics: dict[str, list[float]], path, title: str = "") -> Path:
    """One box per metric across all repeats and folds."""
    names = list(fold_metrics)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.boxplot([fold_metrics[n] for n in names])
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(title, fontsize=8)
    fig.tight_layout()
    return _save(fig, path, boxes=len(names))
