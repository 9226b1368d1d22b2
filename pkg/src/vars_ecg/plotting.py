"""Matplotlib setup and SVG output shared by every figure writer.

Figures are written with a fixed hash salt and without date metadata so that
identical inputs give byte-identical SVG files. The DOCTYPE line (which
points at an external DTD) is dropped.
"""
from __future__ import annotations

import io
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "vars-ecg",
    "svg.fonttype": "path",
    "font.family": "DejaVu Sans",
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 0.8,
}

_DOCTYPE = re.compile(r"<!DOCTYPE[^>]*>\s*", re.S)


def new(width: float = 6.0, height: float = 3.5, **kw):
    with plt.rc_context(STYLE):
        return plt.figure(figsize=(width, height), **kw)


def svg_bytes(fig) -> bytes:
    buf = io.StringIO()
    with plt.rc_context(STYLE):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return _DOCTYPE.sub("", buf.getvalue()).encode()


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(svg_bytes(fig))
    return path


def line_plot(xs, series: dict[str, list], xlabel: str, ylabel: str, title: str = ""):
    """One line per named series over shared x values; None values are skipped."""
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(4.0, 2.8))
        ax = fig.add_subplot(1, 1, 1)
        for i, (name, ys) in enumerate(series.items()):
            pts = [(x, y) for x, y in zip(xs, ys) if y is not None]
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", ms=3, color=f"C{i}", label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
    return fig
