"""Dense float64 grids: serialization and the numeric kernels behind the tape.

A grid is a plain ``numpy.ndarray`` of dtype float64 with at most four axes.
The kernels here are pure array functions; the differentiable wrappers live in
:mod:`ruackit.autodiff`.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RGRD"
MAX_RANK = 4


class GridFormatError(ValueError):
    pass


def as_grid(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ValueError(f"grid rank {arr.ndim} exceeds {MAX_RANK}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid values must be finite")
    return arr


# --------------------------------------------------------------------------
# binary container


def grid_to_bytes(grid) -> bytes:
    arr = as_grid(grid)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes(order="C")


def grid_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise GridFormatError("missing RGRD magic")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if rank > MAX_RANK:
        raise GridFormatError(f"rank {rank} exceeds {MAX_RANK}")
    if len(buf) < 8 + 4 * rank:
        raise GridFormatError("truncated RGRD header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    payload = buf[offset:]
    if len(payload) != 8 * n:
        raise GridFormatError(f"payload holds {len(payload)} bytes, expected {8 * n}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_grid(path, grid) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def load_grid(path) -> np.ndarray:
    return grid_from_bytes(Path(path).read_bytes())


def save_png(path, grid) -> None:
    """Write a visualization PNG, min-max normalized per channel.

    Accepts H×W, 1×H×W or 3×H×W grids.
    """
    from PIL import Image

    arr = as_grid(grid)
    if arr.ndim == 2:
        arr = arr[None]
    lo = arr.min(axis=(1, 2), keepdims=True)
    hi = arr.max(axis=(1, 2), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    img = np.round(255.0 * (arr - lo) / span).astype(np.uint8)
    if img.shape[0] == 1:
        Image.fromarray(img[0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(np.moveaxis(img[:3], 0, -1), mode="RGB").save(path, format="PNG")


def png_bytes(grid) -> bytes:
    out = io.BytesIO()
    save_png(out, grid)
    return out.getvalue()


# --------------------------------------------------------------------------
# 3x3 convolution, unit stride, reflect padding


def _im2col3(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    cols = np.empty((c, 9, h, w))
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, k] = xp[:, dy:dy + h, dx:dx + w]
            k += 1
    return cols.reshape(c * 9, h * w)


def conv3x3_forward(x: np.ndarray, weight: np.ndarray):
    """Cross-correlate ``x`` (C×H×W) with ``weight`` (O×C×3×3).

    Returns the output and the im2col buffer needed by the backward pass.
    """
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1:] != (x.shape[0], 3, 3):
        raise ValueError(f"conv3x3 shape mismatch: x{x.shape} w{weight.shape}")
    if min(x.shape[1:]) < 2:
        raise ValueError("reflect padding needs H, W >= 2")
    cols = _im2col3(x)
    out = weight.reshape(weight.shape[0], -1) @ cols
    return out.reshape(weight.shape[0], *x.shape[1:]), cols


def conv3x3_backward(g: np.ndarray, x_shape, weight: np.ndarray, cols: np.ndarray):
    o = weight.shape[0]
    c, h, w = x_shape
    g2 = g.reshape(o, h * w)
    dweight = (g2 @ cols.T).reshape(weight.shape)
    dcols = (weight.reshape(o, -1).T @ g2).reshape(c, 9, h, w)
    dxp = np.zeros((c, h + 2, w + 2))
    k = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + h, dx:dx + w] += dcols[:, k]
            k += 1
    # fold the reflected border back onto its source pixels
    dxp[:, :, 2] += dxp[:, :, 0]
    dxp[:, :, w - 1] += dxp[:, :, w + 1]
    dxp[:, 2, :] += dxp[:, 0, :]
    dxp[:, h - 1, :] += dxp[:, h + 1, :]
    return dxp[:, 1:h + 1, 1:w + 1].copy(), dweight


# --------------------------------------------------------------------------
# bilinear grid sampling with pixel-unit offsets

BORDER_MODES = ("clamp", "zero")


def _sample_setup(h, w, offsets, border):
    if border not in BORDER_MODES:
        raise ValueError(f"border_mode must be one of {BORDER_MODES}, got {border!r}")
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    sy = yy + offsets[0]
    sx = xx + offsets[1]
    if border == "clamp":
        # derivative of the clamp: zero once a coordinate is pinned to the border
        dy_ok = ((sy > 0) & (sy < h - 1)).astype(np.float64)
        dx_ok = ((sx > 0) & (sx < w - 1)).astype(np.float64)
        sy = np.clip(sy, 0, h - 1)
        sx = np.clip(sx, 0, w - 1)
    else:
        dy_ok = dx_ok = None
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    if border == "clamp":
        y0 = np.minimum(y0, max(h - 2, 0))
        x0 = np.minimum(x0, max(w - 2, 0))
    wy = sy - y0
    wx = sx - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    if border == "clamp":
        y1 = np.minimum(y1, h - 1)
        x1 = np.minimum(x1, w - 1)
    return y0, x0, y1, x1, wy, wx, dy_ok, dx_ok


def _corner_weights(h, w, y0, x0, y1, x1, border):
    corners = []
    for yi, xi in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        corners.append((np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1),
                        valid.astype(np.float64)))
    return corners


def grid_sample_forward(image: np.ndarray, offsets: np.ndarray, border: str = "clamp"):
    """Bilinear sample ``image`` (C×H×W) at (y+δy, x+δx) for every pixel."""
    if image.ndim != 3 or offsets.shape != (2,) + image.shape[1:]:
        raise ValueError(f"grid sample shape mismatch: image{image.shape} offsets{offsets.shape}")
    c, h, w = image.shape
    y0, x0, y1, x1, wy, wx, dy_ok, dx_ok = _sample_setup(h, w, offsets, border)
    (ya, xa, va), (yb, xb, vb), (yc, xc, vc), (yd, xd, vd) = _corner_weights(
        h, w, y0, x0, y1, x1, border)
    a = image[:, ya, xa] * va
    b = image[:, yb, xb] * vb
    cc = image[:, yc, xc] * vc
    d = image[:, yd, xd] * vd
    out = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * cc + wx * d)
    saved = (y0, x0, y1, x1, wy, wx, dy_ok, dx_ok, a, b, cc, d)
    return out, saved


def grid_sample_backward(g: np.ndarray, image_shape, saved, border: str = "clamp"):
    c, h, w = image_shape
    y0, x0, y1, x1, wy, wx, dy_ok, dx_ok, a, b, cc, d = saved
    corners = _corner_weights(h, w, y0, x0, y1, x1, border)
    coefs = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
    dimage = np.zeros((c, h * w))
    for (yi, xi, valid), coef in zip(corners, coefs):
        flat = (yi * w + xi).ravel()
        wts = (coef * valid).ravel()
        for ch in range(c):
            dimage[ch] += np.bincount(flat, weights=wts * g[ch].ravel(), minlength=h * w)
    d_sy = ((1 - wx) * (cc - a) + wx * (d - b))
    d_sx = ((1 - wy) * (b - a) + wy * (d - cc))
    doff = np.stack([(g * d_sy).sum(axis=0), (g * d_sx).sum(axis=0)])
    if border == "clamp":
        doff[0] *= dy_ok
        doff[1] *= dx_ok
    return dimage.reshape(image_shape), doff


# --------------------------------------------------------------------------
# log-gamma (Lanczos, g=7, n=9) and its derivative

_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lanczos_series(z):
    # z = x - 1
    a = np.full_like(z, _LANCZOS_COEF[0])
    da = np.zeros_like(z)
    for i in range(1, len(_LANCZOS_COEF)):
        den = z + i
        a = a + _LANCZOS_COEF[i] / den
        da = da - _LANCZOS_COEF[i] / (den * den)
    return a, da


def lgamma(x) -> np.ndarray:
    """log|Γ(x)| for real x > 0 via the Lanczos approximation."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("lgamma is defined here for x > 0 only")
    small = x < 0.5
    # reflection: Γ(x)Γ(1-x) = π / sin(πx)
    xr = np.where(small, 1.0 - x, x)
    z = xr - 1.0
    a, _ = _lanczos_series(z)
    t = z + _LANCZOS_G + 0.5
    val = _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(a)
    refl = np.log(np.pi / np.abs(np.sin(np.pi * x))) - val
    return np.where(small, refl, val)


def digamma(x) -> np.ndarray:
    """Derivative of :func:`lgamma`, differentiated term by term."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("digamma is defined here for x > 0 only")
    small = x < 0.5
    xr = np.where(small, 1.0 - x, x)
    z = xr - 1.0
    a, da = _lanczos_series(z)
    t = z + _LANCZOS_G + 0.5
    val = np.log(t) + (z + 0.5) / t - 1.0 + da / a
    refl = val - np.pi / np.tan(np.pi * x)
    return np.where(small, refl, val)
