"""Figures for the CLI report paths. Everything renders off-screen to PNG."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

golden = (math.sqrt(5) - 1.0) / 2.0
width = 5.0
style = {
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "font.size": 8,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (width, width * golden),
    "figure.dpi": 120,
    "svg.hashsalt": "hypercrs",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(path, epochs, losses, title="training loss", extra=None):
    """``extra`` maps a label to a second ``(epochs, values)`` series."""
    with plt.rc_context(style):
        fig, ax = plt.subplots()
        ax.plot(epochs, losses, marker="o", label="loss")
        for label, (xs, ys) in (extra or {}).items():
            ax.plot(xs, ys, marker="s", linestyle="--", label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def metric_curves(path, history, keys, title="validation metrics"):
    """One line per metric key over the epochs of a training history."""
    with plt.rc_context(style):
        fig, ax = plt.subplots()
        xs = [row["epoch"] for row in history]
        for k in keys:
            ax.plot(xs, [row.get(k, float("nan")) for row in history], marker="o", label=k)
        ax.set_xlabel("epoch")
        ax.set_ylabel("value")
        ax.set_ylim(bottom=0)
        ax.set_title(title)
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def metric_bars(path, metrics, title="metrics"):
    names = sorted(metrics)
    with plt.rc_context(style):
        fig, ax = plt.subplots()
        ax.bar(range(len(names)), [metrics[n] for n in names], color="#4eb3d3")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_title(title)
        return _save(fig, path)


def length_histogram(path, lengths, title="response length"):
    with plt.rc_context(style):
        fig, ax = plt.subplots()
        top = max(lengths, default=0)
        ax.hist(lengths, bins=range(0, top + 2), color="#7bccc4", edgecolor="white")
        ax.set_xlabel("tokens")
        ax.set_ylabel("responses")
        ax.set_title(title)
        return _save(fig, path)
