"""Figures written next to the benchmark tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "figure.figsize": (5.0, 3.2),
}
_PNG_META = {"Software": None}  # keeps reruns byte-identical


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def timing_figure(pairs, path) -> Path:
    """Bar chart of mean unlearning seconds per method."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [m for m, _ in pairs]
        secs = [s for _, s in pairs]
        bars = ax.bar(names, secs, color="0.55", edgecolor="0.2", linewidth=0.6)
        ax.bar_label(bars, fmt="%.1f", fontsize=8)
        ax.set_ylabel("unlearning time (s)")
        ax.set_title("Wall-clock cost of unlearning")
        return _save(fig, Path(path))


def forget_f1_figure(averages, path) -> Path:
    """Grouped bars: forget-set and test micro-F1 per method, one panel per fraction."""
    fractions = sorted({r.fraction for r in averages})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(fractions), squeeze=False, sharey=True,
                                 figsize=(2.8 * len(fractions) + 1.0, 3.2))
        for ax, frac in zip(axes[0], fractions):
            rows = [r for r in averages if r.fraction == frac]
            x = np.arange(len(rows))
            ax.bar(x - 0.2, [100 * r.forget.f1 for r in rows], 0.4, label="forget", color="0.3")
            ax.bar(x + 0.2, [100 * r.test.f1 for r in rows], 0.4, label="test", color="0.75")
            ax.set_xticks(x, [r.method for r in rows], rotation=30)
            ax.set_title(f"{frac:g} forgotten")
            ax.set_ylim(0, 105)
        axes[0][0].set_ylabel("micro-F1")
        axes[0][-1].legend(frameon=False, fontsize=8)
        return _save(fig, Path(path))


def render_figures(result, out_dir) -> dict[str, Path]:
    from .bench import timing_pairs

    out = Path(out_dir)
    return {
        "timing_figure": timing_figure(timing_pairs(result), out / "timing.png"),
        "f1_figure": forget_f1_figure(result.averages, out / "forget_f1.png"),
    }
