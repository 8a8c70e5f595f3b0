"""Matplotlib figures for the CLI report path. Every function writes a PNG and returns its path."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}

LOSS_COLORS = {"total": "k", "amip": "tab:blue", "ampd": "tab:orange", "aitd": "tab:green", "gitd": "tab:red"}


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def moving_average(x, window: int = 10) -> np.ndarray:
    """Trailing mean over at most ``window`` points, same length as ``x``."""
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_loss_curves(losses: dict, path, window: int = 10) -> Path:
    """Raw (faint) and moving-average loss components against step."""
    with plt.rc_context(STYLE):
        fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
        step = np.asarray(losses["step"])
        for key, color in LOSS_COLORS.items():
            if key not in losses:
                continue
            target = ax if key in ("total", "amip") else ax2
            target.plot(step, losses[key], color=color, alpha=0.25, lw=0.8)
            target.plot(step, moving_average(losses[key], window), color=color, lw=1.5, label=key)
        ax.set_title("total and reconstruction")
        ax2.set_title("distillation (cross-entropy)")
        for a in (ax, ax2):
            a.set_xlabel("step")
            a.legend()
        ax.set_ylabel("loss")
        return _finish(fig, path)


def plot_entropy(report, path) -> Path:
    """Per-head attention-distance entropy, one column of points per stage."""
    by_stage = report.by_stage()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        rng = np.random.default_rng(0)
        for stage, values in sorted(by_stage.items()):
            jitter = rng.uniform(-0.12, 0.12, size=len(values))
            ax.scatter(stage + jitter, values, s=14, alpha=0.7)
            ax.hlines(np.mean(values), stage - 0.25, stage + 0.25, color="k", lw=1.5)
        ax.set_xticks(sorted(by_stage))
        ax.set_xlabel("stage")
        ax.set_ylabel("normalized entropy")
        ax.set_ylim(-0.02, 1.02)
        return _finish(fig, path)


def plot_attention_map(values: np.ndarray, path, volume: np.ndarray | None = None) -> Path:
    """Central axial, coronal and sagittal slices of a [0, 1] attention map, optionally beside the volume."""
    values = np.asarray(values)
    rows = 2 if volume is not None else 1
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(rows, 3, figsize=(7.5, 2.6 * rows), squeeze=False)
        for col in range(3):
            sl = [slice(None)] * 3
            sl[col] = values.shape[col] // 2
            im = axes[0, col].imshow(values[tuple(sl)], cmap="magma", vmin=0, vmax=1, interpolation="nearest")
            axes[0, col].set_title(f"attention, axis {col}")
            if volume is not None:
                sl[col] = volume.shape[col] // 2
                axes[1, col].imshow(np.asarray(volume)[tuple(sl)], cmap="gray")
                axes[1, col].set_title(f"volume, axis {col}")
        for a in axes.flat:
            a.set_xticks([])
            a.set_yticks([])
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
        # colorbar layouts do not mix with tight_layout
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
        return path


def plot_cluster(report, path) -> Path:
    """Intra- and inter-cluster distances with population sds as error bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        means = [report.intra_mean, report.inter_mean]
        sds = [report.intra_sd, report.inter_sd]
        ax.bar(["intra", "inter"], means, yerr=sds, color=["tab:gray", "tab:blue"], capsize=4)
        ax.set_ylabel("distance")
        ax.set_title(f"inter/intra = {report.ratio:.3g}")
        return _finish(fig, path)


def plot_probe(result, path) -> Path:
    """Per-class test accuracy of a probe or fine-tune run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        classes = sorted(result.per_class)
        ax.bar([str(c) for c in classes], [result.per_class[c] for c in classes], color="tab:green")
        ax.set_ylim(0, 1)
        ax.set_xlabel("class")
        ax.set_ylabel("accuracy")
        auc = "n/a" if result.auc is None else f"{result.auc:.3f}"
        ax.set_title(f"{result.mode}: acc {result.accuracy:.3f}, AUC {auc}")
        return _finish(fig, path)
