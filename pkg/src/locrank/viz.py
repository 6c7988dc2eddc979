"""Center-distribution heatmaps and ranked image strips, written as P6 PPM."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import RunConfig
from .errors import UsageError
from .model import ModelParams, score_branch
from .netpbm import write_image
from .spatial import grid_bbox
from .train import score_images

__all__ = ["hot_ramp", "heatmap_density", "render_heatmap", "emit_heatmap", "draw_box", "emit_ranked_strip"]

RED = (1.0, 0.0, 0.0)


def hot_ramp(x: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white for ``x`` in [0, 1]; returns ``[3, ...]``."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.clip(3 * x, 0, 1), np.clip(3 * x - 1, 0, 1), np.clip(3 * x - 2, 0, 1)])


def heatmap_density(centers: np.ndarray, image_size: tuple[int, int], sigma: float = 1.5) -> np.ndarray:
    """Smoothed 2-D histogram of ``centers [N, 2]`` with one bin per pixel, scaled to max 1."""
    w, h = image_size
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    hist, _, _ = np.histogram2d(centers[:, 1], centers[:, 0], bins=(h, w), range=((-0.5, h - 0.5), (-0.5, w - 0.5)))
    if sigma > 0:
        hist = gaussian_filter(hist, sigma, mode="nearest")
    peak = hist.max()
    return hist / peak if peak > 0 else hist


def render_heatmap(
    centers: np.ndarray,
    image_size: tuple[int, int],
    background: np.ndarray | None = None,
    alpha: float = 0.6,
    sigma: float = 1.5,
) -> np.ndarray:
    """RGB ``[3, H, W]`` heatmap, optionally blended over a ``[C, H, W]`` background."""
    rgb = hot_ramp(heatmap_density(centers, image_size, sigma))
    if background is None:
        return rgb
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape[0] == 1:
        bg = np.repeat(bg, 3, axis=0)
    if bg.shape != rgb.shape:
        raise UsageError(f"background is {bg.shape[1:]}, heatmap is {rgb.shape[1:]}")
    return alpha * rgb + (1 - alpha) * bg


def emit_heatmap(
    center_logs: Sequence[np.ndarray],
    image_size: tuple[int, int],
    out_dir,
    epochs: Sequence[int] | None = None,
    background: np.ndarray | None = None,
    alpha: float = 0.6,
    sigma: float = 1.5,
) -> list[Path]:
    """Write ``heatmap_epochNNNN.ppm`` for each sampled epoch (1-based; default all).

    ``center_logs`` is either a per-epoch list or a ``{epoch: centers}`` mapping.
    """
    if isinstance(center_logs, dict):
        logs = dict(center_logs)
    else:
        logs = {e + 1: c for e, c in enumerate(center_logs)}
    if not logs:
        raise UsageError("no logged centers to draw")
    chosen = sorted(logs) if epochs is None else list(epochs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for epoch in chosen:
        if epoch not in logs:
            raise UsageError(f"no centers logged for epoch {epoch}")
        path = out_dir / f"heatmap_epoch{epoch:04d}.ppm"
        write_image(path, render_heatmap(logs[epoch], image_size, background, alpha, sigma))
        paths.append(path)
    return paths


def draw_box(image: np.ndarray, box: tuple[float, float, float, float], color=RED) -> np.ndarray:
    """Return an RGB copy of ``image`` with a 1-pixel rectangle, clipped to the frame."""
    img = np.asarray(image, dtype=np.float64)
    rgb = np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img.copy()
    _, h, w = rgb.shape
    x0, y0, x1, y1 = (int(np.rint(v)) for v in box)
    col = np.asarray(color, dtype=np.float64)[:, None]
    xa, xb = max(x0, 0), min(x1, w - 1)
    ya, yb = max(y0, 0), min(y1, h - 1)
    if xa <= xb:
        for y in (y0, y1):
            if 0 <= y < h:
                rgb[:, y, xa : xb + 1] = col
    if ya <= yb:
        for x in (x0, x1):
            if 0 <= x < w:
                rgb[:, ya : yb + 1, x] = col
    return rgb


def emit_ranked_strip(
    images: np.ndarray | Sequence[np.ndarray],
    params: ModelParams,
    k: int,
    out_path,
    config: RunConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sort images by predicted strength, take ``k`` evenly spaced ranks, draw a strip.

    Each tile is the full image with a red box at the bounding box of the
    sampling grid the localizer produces on the center crop. Tiles run from
    weakest to strongest. Returns ``(chosen indices, all scores)``.
    """
    config = config or RunConfig(image_size=np.shape(images[0])[-1], crop_size=params.arch.input_size)
    images = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    n = len(images)
    if not 1 <= k <= n:
        raise UsageError(f"k must be in [1, {n}], got {k}")
    scores = score_images(images, params, config, tta=True)
    order = np.argsort(scores, kind="stable")
    picks = order[np.rint(np.linspace(0, n - 1, k)).astype(int)] if k > 1 else order[[n // 2]]

    crop = config.crop_size
    _, _, h, w = images.shape
    ox, oy = (w - crop) // 2, (h - crop) // 2
    out = score_branch(images[picks][:, :, oy : oy + crop, ox : ox + crop], params)
    tiles = []
    for img, bbox in zip(images[picks], grid_bbox(out.grid.data)):
        x0, y0, x1, y1 = np.asarray(bbox, dtype=np.float64)
        tiles.append(draw_box(img, (x0 + ox, y0 + oy, x1 + ox, y1 + oy)))
    write_image(out_path, np.concatenate(tiles, axis=2))
    return picks, scores
