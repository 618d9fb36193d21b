"""Density-map exports: pixmap heatmaps, per-pixel text grids, and rendered
figures.

Each exported map produces three files next to each other: a binary
portable-pixmap heatmap, a plain-text grid of the per-pixel values, and a
matplotlib PNG of the same heatmap with a colorbar and the count in the
title. Matplotlib is imported lazily so the core library never pays for it.
"""

from __future__ import annotations

import os
from typing import List, Optional

import numpy as np

from .data import write_ppm

# piecewise-linear black -> red -> yellow -> white ramp, used for the ppm
_RAMP = np.array(
    [[0.0, 0.0, 0.0], [0.35, 0.0, 0.1], [0.8, 0.2, 0.0], [1.0, 0.8, 0.0], [1.0, 1.0, 1.0]]
)


def heatmap_rgb(density: np.ndarray) -> np.ndarray:
    """(H, W) map -> (3, H, W) heat colours in [0, 1], scaled by the max."""
    if density.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {density.shape}")
    peak = density.max()
    norm = density / peak if peak > 0 else np.zeros_like(density)
    positions = np.linspace(0.0, 1.0, len(_RAMP))
    channels = [np.interp(norm, positions, _RAMP[:, c]) for c in range(3)]
    return np.stack(channels)


def write_density_text(path: str, density: np.ndarray) -> None:
    """Plain-text grid, one row per line, %.6g per pixel."""
    with open(path, "w") as f:
        for row in density:
            f.write(" ".join(f"{v:.6g}" for v in row) + "\n")


def write_density_figure(path: str, density: np.ndarray,
                         title: Optional[str] = None) -> None:
    """Render the heatmap through matplotlib with a colorbar."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.0, 3.2))
    im = ax.imshow(density, cmap="magma", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def export_density_map(out_dir: str, stem: str, density: np.ndarray,
                       title: Optional[str] = None) -> List[str]:
    """Write <stem>.ppm, <stem>.txt and <stem>.png; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    ppm_path = os.path.join(out_dir, f"{stem}.ppm")
    txt_path = os.path.join(out_dir, f"{stem}.txt")
    png_path = os.path.join(out_dir, f"{stem}.png")
    write_ppm(ppm_path, heatmap_rgb(density))
    write_density_text(txt_path, density)
    write_density_figure(png_path, density, title=title)
    return [ppm_path, txt_path, png_path]
