"""Report figures rendered next to the delimited outputs.

Only two plots exist: the training loss curve (with the learning-rate
ramp on a twin axis) and recall versus k. Both are written straight to
file with the Agg backend, so they work headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .retrieval import EvalReport

_STYLE = {
    "figure.figsize": (6.0, 3.8),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}


def plot_loss_log(log, path):
    """Loss per iteration with the learning-rate schedule overlaid."""
    iters = [it for it, _, _ in log]
    lrs = [lr for _, lr, _ in log]
    losses = [loss for _, _, loss in log]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(iters, losses, color="tab:blue", lw=1.5, label="loss")
        ax.set_xlabel("iteration")
        ax.set_ylabel("batch loss")
        ax2 = ax.twinx()
        ax2.plot(iters, lrs, color="tab:orange", lw=1.0, ls="--", label="lr")
        ax2.set_ylabel("learning rate")
        ax2.grid(False)
        ax2.spines.right.set_visible(True)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_recall(report: EvalReport, path):
    """Recall@k curve with per-point annotations."""
    ks = sorted(report.recalls)
    vals = [report.recalls[k] for k in ks]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(ks, vals, marker="o", color="tab:blue")
        for k, v in zip(ks, vals):
            ax.annotate(f"{v:.3f}", (k, v), textcoords="offset points", xytext=(0, 6), fontsize=8)
        ax.set_xticks(ks)
        ax.set_xlabel("k")
        ax.set_ylabel("Recall@k")
        ax.set_ylim(0.0, 1.05)
        ax.set_title(f"{report.evaluated} queries evaluated, {report.excluded} excluded")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
