"""Inverse-mapped bilinear warping of channel-major images.

Images are float64 arrays shaped ``(C, H, W)``. Pixel ``(i, j)`` sits at the
normalized coordinate ``((j + 0.5) / W * 2 - 1, (i + 0.5) / H * 2 - 1)``;
source taps that fall outside the image contribute 0.
"""

from __future__ import annotations

import numpy as np

from .errors import LengthMismatch
from .xform import DET_EPS, Homography, invert


def pixel_grid(height: int, width: int):
    """Normalized ``(x, y)`` coordinates of every pixel center, each ``(H, W)``."""
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    return np.meshgrid(xs, ys)


def _as_chw(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None], True
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {img.shape}")
    return img, False


def bilinear_sample(img: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample ``img`` (C, H, W) at fractional pixel coordinates, zero outside."""
    c, h, w = img.shape
    # far-away coordinates are clamped to a band where every tap is invalid
    px = np.clip(px, -2.0, w + 1.0)
    py = np.clip(py, -2.0, h + 1.0)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros((c,) + px.shape)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            tap = img[:, np.where(valid, yi, 0), np.where(valid, xi, 0)]
            out += np.where(valid, wy * wx, 0.0) * tap
    return out


def warp_image(img, h: Homography) -> np.ndarray:
    """Warp ``img`` by ``h`` so that ``out(p) = img(h^-1 p)``."""
    img, squeeze = _as_chw(img)
    if h.is_identity():
        out = img.copy()
        return out[0] if squeeze else out
    inv = invert(h).m
    _, height, width = img.shape
    gx, gy = pixel_grid(height, width)
    z = inv[2, 0] * gx + inv[2, 1] * gy + inv[2, 2]
    ok = np.abs(z) >= DET_EPS
    z = np.where(ok, z, 1.0)
    sx = (inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]) / z
    sy = (inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]) / z
    # back to fractional pixel indices; points at infinity land off-image
    px = np.where(ok, (sx + 1.0) * 0.5 * width - 0.5, -2.0)
    py = np.where(ok, (sy + 1.0) * 0.5 * height - 0.5, -2.0)
    out = bilinear_sample(img, px, py)
    return out[0] if squeeze else out


def warp_batch(imgs, hs) -> list:
    imgs = list(imgs)
    hs = list(hs)
    if len(imgs) != len(hs):
        raise LengthMismatch(f"{len(imgs)} images but {len(hs)} homographies")
    return [warp_image(x, h) for x, h in zip(imgs, hs)]
