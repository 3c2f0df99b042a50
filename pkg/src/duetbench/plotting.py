"""Boxplot figures of per-second percent deviation v2 vs v1.

One figure per experiment label, one panel per endpoint, noise configurations
along the x axis and one box per phase split within each configuration.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from duetbench.analysis import ExperimentAnalysis, PhaseSplit  # noqa: E402
from duetbench.core import Endpoint  # noqa: E402

SPLIT_COLORS = {
    PhaseSplit.NO_NOISE: "#4c72b0",
    PhaseSplit.ONLY_NOISE: "#dd8452",
    PhaseSplit.ALL_DATA: "#55a868",
}

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "axes.grid.axis": "y",
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _config_key(config: str):
    try:
        return (0, float(config), config)
    except ValueError:
        return (1, 0.0, config)


def boxplot_figure(analyses: Iterable[ExperimentAnalysis], title: str | None = None,
                   show_outliers: bool = False):
    """Build the figure for analyses sharing one label. Returns the Figure."""
    analyses = sorted(analyses, key=lambda a: _config_key(a.configuration))
    if not analyses:
        raise ValueError("no analyses to plot")
    configs = [a.configuration for a in analyses]
    splits = list(PhaseSplit)
    width = 0.8 / len(splits)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(Endpoint), figsize=(3.2 * len(Endpoint), 3.4), sharey=False)
        for ax, endpoint in zip(axes, Endpoint):
            for j, split in enumerate(splits):
                data, positions = [], []
                for i, a in enumerate(analyses):
                    pts = [p for _, p in a.distributions.get((endpoint, split), [])]
                    if pts:
                        data.append(pts)
                        positions.append(i + (j - (len(splits) - 1) / 2) * width)
                if not data:
                    continue
                bp = ax.boxplot(data, positions=positions, widths=width * 0.9, whis=1.5,
                                showfliers=show_outliers, patch_artist=True,
                                medianprops={"color": "black", "linewidth": 1})
                for box in bp["boxes"]:
                    box.set_facecolor(SPLIT_COLORS[split])
                    box.set_alpha(0.8)
            ax.axhline(0.0, color="grey", linewidth=0.8, linestyle="--")
            ax.set_xticks(range(len(configs)), configs)
            ax.set_xlim(-0.6, len(configs) - 0.4)
            ax.set_title(f"/{endpoint.value}")
            ax.set_xlabel("noise threads")
        axes[0].set_ylabel("per-second change v2 vs v1 [%]")
        handles = [plt.Rectangle((0, 0), 1, 1, color=SPLIT_COLORS[s], alpha=0.8) for s in splits]
        fig.legend(handles, [s.title for s in splits], loc="upper center", ncol=len(splits),
                   frameon=False, bbox_to_anchor=(0.5, 1.0))
        if title:
            fig.suptitle(title, y=0.92, x=0.01, ha="left", fontsize=10)
        fig.tight_layout(rect=(0, 0, 1, 0.9))
    return fig


def write_boxplots(analyses: list[ExperimentAnalysis], out_dir: str | Path,
                   formats: tuple[str, ...] = ("png",)) -> list[Path]:
    """One file per label and format, named ``boxplot_<label>.<fmt>``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_label: dict[str, list[ExperimentAnalysis]] = {}
    for a in analyses:
        by_label.setdefault(a.label, []).append(a)
    written = []
    for label, group in by_label.items():
        fig = boxplot_figure(group, title=label)
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in label)
        for fmt in formats:
            path = out / f"boxplot_{safe}.{fmt}"
            fig.savefig(path)
            written.append(path)
        plt.close(fig)
    return written
