"""
Bilinear sampling and splatting on the pixel grid.

Samples outside the raster read as zero corner by corner, so a sample half a
pixel past the border gets half the border value.
"""

from typing import Tuple

import numpy as np


def _corners(xs: np.ndarray, ys: np.ndarray):
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    return x0, y0, xs - x0, ys - y0


def _gather(arr: np.ndarray, xi: np.ndarray, yi: np.ndarray) -> np.ndarray:
    """arr[..., yi, xi] with zeros where the index falls outside."""
    h, w = arr.shape[-2:]
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    values = arr[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(inside, values, 0.0)


def sample(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample of arr (..., H, W) at real positions xs, ys."""
    x0, y0, fx, fy = _corners(xs, ys)
    v00 = _gather(arr, x0, y0)
    v10 = _gather(arr, x0 + 1, y0)
    v01 = _gather(arr, x0, y0 + 1)
    v11 = _gather(arr, x0 + 1, y0 + 1)
    return ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10
            + (1 - fx) * fy * v01 + fx * fy * v11)


def sample_with_gradient(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Bilinear sample plus its derivatives with respect to the sample position.

    On cell edges the cell to the right (below) is used, which gives the
    right-continuous derivative.
    """
    x0, y0, fx, fy = _corners(xs, ys)
    v00 = _gather(arr, x0, y0)
    v10 = _gather(arr, x0 + 1, y0)
    v01 = _gather(arr, x0, y0 + 1)
    v11 = _gather(arr, x0 + 1, y0 + 1)
    value = ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10
             + (1 - fx) * fy * v01 + fx * fy * v11)
    d_dx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
    d_dy = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
    return value, d_dx, d_dy


def splat(values: np.ndarray, xs: np.ndarray, ys: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Scatter values onto an (H, W) raster with bilinear weights; off-raster weight is dropped."""
    h, w = shape
    out = np.zeros((h, w), dtype=np.float64)
    x0, y0, fx, fy = _corners(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
    for dx, dy, weight in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                           (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        keep = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (weight != 0)
        np.add.at(out, (yi[keep], xi[keep]), values[keep] * weight[keep])
    return out


def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Float (xs, ys) coordinate rasters."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys
