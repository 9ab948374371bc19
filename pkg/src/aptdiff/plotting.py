"""Static figures: per-bin gamma curves and cross-attention maps."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed metadata keeps reruns byte-identical
_PNG_METADATA = {"Software": None}


def plot_gamma_curves(
    curves: dict[int, list[tuple[int, float]]],
    out_path: str | Path,
    title: str = "",
) -> Path:
    """Line plot of gamma against training step, one line per timestep bin."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    cmap = plt.get_cmap("viridis")
    n = max(len(curves), 1)
    for i, (b, series) in enumerate(sorted(curves.items())):
        if series:
            steps, values = zip(*series)
        else:
            steps, values = (0,), (0.0,)
        ax.plot(steps, values, color=cmap(i / max(n - 1, 1)), label=f"bin {b}", linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("gamma")
    ax.set_ylim(-0.02, 1.0)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, ncol=2, loc="upper left")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
    logger.debug("Wrote gamma plot %s", out_path.name)
    return out_path


def plot_attention_maps(
    rows: dict[str, np.ndarray],
    tokens: list[str],
    out_path: str | Path,
) -> Path:
    """Grid of per-token attention maps.

    ``rows`` maps a row label to an array (tokens, h, w); columns follow
    ``tokens``.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n_rows, n_cols = len(rows), len(tokens)
    if n_rows == 0 or n_cols == 0:
        raise ValueError("Nothing to plot: no rows or no tokens")
    fig, axes = plt.subplots(
        n_rows, n_cols, figsize=(1.4 * n_cols, 1.5 * n_rows), squeeze=False
    )
    for r, (label, maps) in enumerate(rows.items()):
        vmax = float(maps.max()) or 1.0
        for c, token in enumerate(tokens):
            ax = axes[r][c]
            ax.imshow(maps[c], cmap="magma", vmin=0.0, vmax=vmax, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(token, fontsize=8)
            if c == 0:
                ax.set_ylabel(label, fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)
    return out_path
