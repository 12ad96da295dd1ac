"""Matplotlib figure helpers; every figure is written straight to a file."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (4.2, 2.8),
    "font.size": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.linewidth": 0.8,
    "svg.hashsalt": "attrdebias",
    "svg.fonttype": "path",
}


def category_bars(frequencies, categories, path, title="", description="", target=None):
    """Grouped bars: one group per category, one bar per sample set.

    ``frequencies`` maps a set name to per-category fractions; ``target``
    (optional) is drawn as a step outline.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(frequencies)
        width = 0.8 / max(1, len(names))
        x = np.arange(len(categories))
        for i, name in enumerate(names):
            ax.bar(x + (i - (len(names) - 1) / 2) * width, frequencies[name], width, label=name)
        if target is not None:
            ax.step(np.r_[x - 0.5, x[-1] + 0.5], np.r_[target, target[-1]], where="post",
                    color="k", linewidth=0.8, linestyle="--", label="target")
        ax.set_xticks(x)
        ax.set_xticklabels(categories)
        ax.set_ylim(0, 1)
        ax.set_ylabel("fraction of samples")
        ax.set_title(title)
        ax.grid(axis="y", alpha=0.2, linewidth=0.6)
        ax.set_axisbelow(True)
        ax.legend(frameon=False, fontsize=6)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
        plt.close(fig)
    return path


def fd_bars(rows, path, description=""):
    """Horizontal FD bars (with bootstrap interval) for benchmark rows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 0.35 * len(rows) + 0.9))
        y = np.arange(len(rows))
        fd = np.array([r["fd"] for r in rows])
        err = np.array([[r["fd"] - r["ci_lo"], r["ci_hi"] - r["fd"]] for r in rows]).T
        ax.barh(y, fd, xerr=np.clip(err, 0, None), color="0.55", error_kw={"linewidth": 0.8})
        ax.set_yticks(y)
        ax.set_yticklabels([f"{r['variant']} | {r['target']} | {r['attribute']}" for r in rows], fontsize=6)
        ax.invert_yaxis()
        ax.set_xlabel("fairness discrepancy (lower is better)")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
        plt.close(fig)
    return path
