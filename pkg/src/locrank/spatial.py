"""Scale + translation spatial transformer: grid generation and bilinear sampling.

The warp maps canonical output coordinates ``(x_out, y_out)`` in ``[-1, 1]``
to normalized input coordinates

    x_in = s * (x_out + t_x),   y_in = s * (y_out + t_y)

so the patch center lands at ``(s * t_x, s * t_y)``. Normalized input
coordinates become pixels via ``px = (x_in + 1) / 2 * (W - 1)``. Grids are
stored in pixel units.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, _accum, _node, as_tensor
from .errors import ConfigurationError

__all__ = [
    "Theta",
    "theta_tensor",
    "canonical_coords",
    "generate_grid",
    "bilinear_sample",
    "resample",
    "patch_center_px",
    "in_bounds",
    "grid_bbox",
    "S_MIN",
    "S_MAX",
]

S_MIN = 0.05
S_MAX = 2.0


class Theta(NamedTuple):
    s: float
    t_x: float
    t_y: float


def theta_tensor(theta, requires_grad: bool = False) -> Tensor:
    if isinstance(theta, Tensor):
        return theta
    return Tensor(np.asarray(theta, dtype=np.float64), requires_grad=requires_grad)


def canonical_coords(patch_size: int) -> np.ndarray:
    """Evenly spaced output coordinates spanning [-1, 1]."""
    k = np.arange(patch_size, dtype=np.float64)
    return (2.0 * k - (patch_size - 1)) / (patch_size - 1)


def _image_dims(image_size) -> tuple[int, int]:
    w, h = int(image_size[0]), int(image_size[1])
    if w < 2 or h < 2:
        raise ConfigurationError(f"image size must be at least 2x2, got {w}x{h}")
    return w, h


def generate_grid(theta, patch_size: int, image_size) -> Tensor:
    """Pixel-space sampling grid ``[..., 2, P, P]`` (x row first, then y) for ``theta [..., 3]``."""
    if patch_size < 2:
        raise ConfigurationError(f"patch size must be >= 2, got {patch_size}")
    w, h = _image_dims(image_size)
    theta = theta_tensor(theta)
    if theta.shape[-1] != 3 or theta.ndim not in (1, 2):
        raise ConfigurationError(f"theta must have shape [3] or [N, 3], got {theta.shape}")
    th = theta.data if theta.ndim == 2 else theta.data[None]
    s, tx, ty = th[:, 0, None], th[:, 1, None], th[:, 2, None]
    half_w, half_h = (w - 1) / 2.0, (h - 1) / 2.0
    # canonical coords pre-scaled to pixels; integer numerators keep the
    # identity warp exact when P equals the image side
    num = 2.0 * np.arange(patch_size) - (patch_size - 1)
    ux = (num * (w - 1) / (2.0 * (patch_size - 1)))[None, :]
    uy = (num * (h - 1) / (2.0 * (patch_size - 1)))[None, :]
    xs = s * ux + (s * tx + 1.0) * half_w  # [N, P]
    ys = s * uy + (s * ty + 1.0) * half_h
    n = th.shape[0]
    grid = np.empty((n, 2, patch_size, patch_size))
    grid[:, 0] = xs[:, None, :]
    grid[:, 1] = ys[:, :, None]
    if theta.ndim == 1:
        grid = grid[0]

    def backward(g):
        gb = g if theta.ndim == 2 else g[None]
        gx = gb[:, 0].sum(axis=1)  # [N, P] over x positions
        gy = gb[:, 1].sum(axis=2)  # [N, P] over y positions
        d = np.empty_like(th)
        d[:, 0] = (gx * (ux + tx * half_w)).sum(axis=1) + (gy * (uy + ty * half_h)).sum(axis=1)
        d[:, 1] = gx.sum(axis=1) * s[:, 0] * half_w
        d[:, 2] = gy.sum(axis=1) * s[:, 0] * half_h
        _accum(theta, d if theta.ndim == 2 else d[0])

    return _node(grid, (theta,), backward, "generate_grid")


def bilinear_sample(image, grid) -> Tensor:
    """Sample ``image [..., C, H, W]`` at pixel coordinates ``grid [..., 2, P, Q]``.

    Corners outside ``[0, W-1] x [0, H-1]`` read as zero. Gradients flow to
    both the image and the grid.
    """
    image, grid = as_tensor(image), as_tensor(grid)
    if image.ndim == 3 and grid.ndim == 3:
        img, grd, batched = image.data[None], grid.data[None], False
    elif image.ndim == 4 and grid.ndim == 4 and image.shape[0] == grid.shape[0]:
        img, grd, batched = image.data, grid.data, True
    else:
        raise ConfigurationError(f"bilinear_sample: image {image.shape} and grid {grid.shape} are incompatible")
    if grd.shape[1] != 2:
        raise ConfigurationError(f"bilinear_sample: grid must be [..., 2, P, Q], got {grid.shape}")
    n, c, h, w = img.shape
    x, y = grd[:, 0], grd[:, 1]  # [N, P, Q]
    x0f, y0f = np.floor(x), np.floor(y)
    fx, fy = x - x0f, y - y0f
    x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
    nidx = np.arange(n)[:, None, None]

    corners = []
    for dy, dx, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        xc, yc = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
        vals = img[nidx, :, yc, xc]  # [N, P, Q, C]
        vals = np.moveaxis(vals, -1, 1) * valid[:, None]
        corners.append((xc, yc, valid, wgt, vals))

    out = sum(wgt[:, None] * vals for _, _, _, wgt, vals in corners)
    kink = np.stack([x0, y0])
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]  # [N, C, P, Q]
        if image.requires_grad:
            base = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None, None]
            gimg = np.zeros(n * c * h * w)
            for xc, yc, valid, wgt, _ in corners:
                flat = (base * h + yc[:, None]) * w + xc[:, None]
                contrib = gb * (wgt * valid)[:, None]
                gimg += np.bincount(flat.ravel(), weights=contrib.ravel(), minlength=gimg.size)
            gimg = gimg.reshape(n, c, h, w)
            _accum(image, gimg if batched else gimg[0])
        if grid.requires_grad:
            v00, v01, v10, v11 = (cr[4] for cr in corners)
            dxv = (1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
            dyv = (1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
            ggrid = np.stack([(gb * dxv).sum(axis=1), (gb * dyv).sum(axis=1)], axis=1)
            _accum(grid, ggrid if batched else ggrid[0])

    return _node(out, (image, grid), backward, "bilinear_sample", kink=kink)


def resample(image, theta, patch_size: int) -> Tensor:
    """Warp ``image`` through ``theta`` and sample a ``patch_size`` square patch."""
    image = as_tensor(image)
    h, w = image.shape[-2:]
    return bilinear_sample(image, generate_grid(theta, patch_size, (w, h)))


def patch_center_px(theta, image_size) -> Tensor:
    """Pixel position ``[..., 2]`` (x, y) of the warped patch center."""
    w, h = _image_dims(image_size)
    theta = theta_tensor(theta)
    th = theta.data
    half = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    s = th[..., :1]
    t = th[..., 1:]
    out = (s * t + 1.0) * half

    def backward(g):
        d = np.empty_like(th)
        d[..., 0] = (g * t * half).sum(axis=-1)
        d[..., 1:] = g * s * half
        _accum(theta, d)

    return _node(out, (theta,), backward, "patch_center_px")


def in_bounds(center_px, image_size) -> np.ndarray:
    """True where ``0 <= c_x <= W-1`` and ``0 <= c_y <= H-1``."""
    w, h = _image_dims(image_size)
    c = center_px.data if isinstance(center_px, Tensor) else np.asarray(center_px, dtype=np.float64)
    return (c[..., 0] >= 0) & (c[..., 0] <= w - 1) & (c[..., 1] >= 0) & (c[..., 1] <= h - 1)


def grid_bbox(grid) -> np.ndarray:
    """Bounding box ``[..., 4]`` as (x_min, y_min, x_max, y_max) in pixels."""
    g = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    return np.stack(
        [g[..., 0, :, :].min(axis=(-2, -1)), g[..., 1, :, :].min(axis=(-2, -1)),
         g[..., 0, :, :].max(axis=(-2, -1)), g[..., 1, :, :].max(axis=(-2, -1))],
        axis=-1,
    )
