"""Report figures: metric trend across self-learning iterations, detection by generation."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

colors = ["#1b6ca8", "#d1495b", "#66a182", "#edae49", "#5c4d7d"]

params = {
    "axes.prop_cycle": matplotlib.cycler(color=colors),
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.linestyle": ":",
    "grid.linewidth": 0.5,
    "font.size": 8,
    "font.family": "sans-serif",
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.5,
    "lines.markersize": 5,
    "figure.figsize": [4.8, 3.2],
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

# PNG metadata without version strings keeps files byte-stable across installs
_PNG_META = {"Software": None}


def plot_iteration_trend(summaries: list[dict], path, selected: int | None = None,
                         metrics=("tld_pct", "bd_pct", "precision_pct")) -> None:
    """Mean pseudo-label metrics per iteration; ``summaries`` are ``IterationState.summary()`` dicts."""
    names = {"tld_pct": "TLD", "bd_pct": "BD", "precision_pct": "Precision",
             "dsc_pct": "DSC", "sensitivity_pct": "Sensitivity"}
    iters = [s["iteration"] for s in summaries]
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        for m in metrics:
            vals = [s["mean"][m] for s in summaries]
            ax.plot(iters, vals, marker="o", label=names.get(m, m))
        if selected is not None:
            ax.axvline(selected, color="0.5", linestyle="--", linewidth=1)
        ax.set_xticks(iters)
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean over cases (%)")
        ax.legend(loc="lower right")
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)


def plot_generation_coverage(coverage: dict[int, float], path, title: str | None = None) -> None:
    """Bar chart of the fraction of reference branches detected per generation."""
    gens = sorted(coverage)
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.bar(gens, [100.0 * coverage[g] for g in gens], color=colors[0], width=0.7)
        ax.set_xticks(gens)
        ax.set_ylim(0, 105)
        ax.set_xlabel("generation")
        ax.set_ylabel("branches detected (%)")
        if title:
            ax.set_title(title)
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
