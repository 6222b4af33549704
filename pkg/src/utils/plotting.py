"""SVG figures for the report command."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed ids and no date so reruns produce identical files
plt.rcParams["svg.hashsalt"] = "flowforest"
_SVG_METADATA = {"Date": None}
FIGSIZE = (7.0, 4.0)


def plot_classified_by_count(frame: pd.DataFrame, path: Path) -> Path:
    """Cumulative classified percentage and F1 against the packet count."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.step(
        frame["packet_count"],
        frame["cumulative_classified_pct"],
        where="post",
        label="classified flows (%)",
    )
    ax.set_xlabel("packet count")
    ax.set_ylabel("classified flows (%)")
    ax.set_ylim(0, 100)
    f1 = frame["cumulative_f1"].astype("float64") * 100.0
    ax.plot(frame["packet_count"], f1, marker="o", linestyle="--", label="F1 of classified (%)")
    ax.legend(loc="lower right")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_bits_vs_threshold(frame: pd.DataFrame, path: Path) -> Path:
    """Per-flow register bits for each score threshold."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ordered = frame.sort_values("thr_s")
    ax.plot(ordered["thr_s"], ordered["row_bits"], marker="s")
    ax.set_xlabel("score threshold")
    ax.set_ylabel("bits per flow")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def _save(fig: plt.Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_METADATA)
    plt.close(fig)
    logger.debug(f"Saved figure {path}")
    return path
