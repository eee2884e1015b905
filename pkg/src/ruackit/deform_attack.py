"""Bounded adversarial deformation: offset prediction, zero-mean bounding, joint warping.

Offsets are stored in pixel units.  The bound ``eps`` is given in normalized
grid coordinates ([-1, 1] across the image), so one unit of ``eps`` spans
``(min(H, W) - 1) / 2`` pixels; :func:`eps_pixels` does the conversion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .autodiff import Tape, Var
from .grid import grid_sample_forward

HIDDEN = 8
BLEND_SIGMA = 2.0
BLEND_FLOOR = 1e-3


@dataclass
class OffsetField:
    delta: np.ndarray  # 2×H×W, pixel units (dy, dx)

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0


def eps_pixels(eps: float, shape) -> float:
    h, w = shape[-2:]
    return float(eps) * (min(h, w) - 1) / 2.0


def init_deform_params(in_dim: int = 12, seed: int = 0) -> dict[str, np.ndarray]:
    """Frozen encoder convs (``deform_frozen.*``) and the zero-initialized offset conv."""
    rng = np.random.default_rng(seed)

    def conv(cout, cin):
        return rng.normal(0.0, np.sqrt(1.0 / (9 * cin)), size=(cout, cin, 3, 3))

    return {
        "deform_frozen.proj": conv(HIDDEN, in_dim),
        "deform_frozen.mask": conv(HIDDEN, 1),
        "deform_frozen.fuse": conv(HIDDEN, HIDDEN),
        "deform.offset_w": np.zeros((2, HIDDEN, 3, 3)),
        "deform.offset_b": np.zeros(2),
    }


def predict_offsets_var(tape: Tape, feats: Var, mask: np.ndarray, P: dict,
                        grl_scale: float | None = 1.0) -> Var:
    """Raw 2×H×W offset logits; GRL attached unless ``grl_scale`` is None."""
    m = tape.const(np.asarray(mask, dtype=float)[None])
    h = tape.tanh(tape.conv3x3(feats, P["deform_frozen.proj"])
                  + tape.conv3x3(m, P["deform_frozen.mask"]))
    h = tape.tanh(tape.conv3x3(h, P["deform_frozen.fuse"]))
    raw = tape.conv3x3(h, P["deform.offset_w"], P["deform.offset_b"])
    return raw if grl_scale is None else tape.grl(raw, grl_scale)


def predict_offsets(features: np.ndarray, mask: np.ndarray, params: dict) -> np.ndarray:
    tape = Tape()
    P = {k: tape.const(v) for k, v in params.items() if k.startswith("deform")}
    return predict_offsets_var(tape, tape.const(features), mask, P).value


def _centering_shift(d: np.ndarray, eps: float):
    """Per-component shift c with mean(clip(d − c, −ε, ε)) = 0.

    Returns ``(c, free)`` where ``free`` marks pixels left unclipped.  The
    shift is found by bisection, then recomputed in closed form from the
    clipped/free split so the mean is zero to rounding.
    """
    c = np.zeros((d.shape[0], 1, 1))
    free = np.ones(d.shape, dtype=bool)
    for i, comp in enumerate(d):
        if np.abs(comp - comp.mean()).max() < eps:
            c[i] = comp.mean()
            continue
        lo, hi = comp.min() - eps, comp.max() + eps
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.clip(comp - mid, -eps, eps).mean() > 0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * max(1.0, abs(mid)):
                break
        mid = 0.5 * (lo + hi)
        above, below = comp - mid >= eps, comp - mid <= -eps
        f = ~(above | below)
        if f.any():
            mid = (comp[f].sum() + eps * (above.sum() - below.sum())) / f.sum()
        c[i] = mid
        free[i] = f
    return c, free


def project_offsets(d: np.ndarray, eps: float) -> np.ndarray:
    """Nearest field (per component) with zero spatial mean and |δ| ≤ ε.

    Where nothing clips this is plain mean subtraction.
    """
    d = np.asarray(d, dtype=float)
    c, _ = _centering_shift(d, eps)
    return np.clip(d - c, -eps, eps)


def project_offsets_var(tape: Tape, d: Var, eps: float) -> Var:
    """Tape form of :func:`project_offsets`; the shift depends on the free pixels only."""
    c, free = _centering_shift(d.value, eps)
    if free.all():
        return tape.clip(d - d.mean(axis=(1, 2), keepdims=True), -eps, eps)
    # a component with no free pixels is fully clipped, so its shift gets no gradient
    weights = np.where(free.any(axis=(1, 2), keepdims=True), free, True).astype(float)
    mm = tape.masked_mean(d, tape.const(weights), axis=(1, 2)).reshape(-1, 1, 1)
    shift = mm + tape.const(c - mm.value)
    return tape.clip(d - shift, -eps, eps)


def bound_offsets(raw: np.ndarray, eps: float) -> OffsetField:
    """ε(2σ(raw) − 1) projected to zero spatial mean within [−ε, ε].  ``eps`` in pixels."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return OffsetField(project_offsets(eps * (2.0 * expit(np.asarray(raw, dtype=float)) - 1.0), eps))


def bound_offsets_var(tape: Tape, raw: Var, eps: float) -> Var:
    if eps <= 0:
        raise ValueError("eps must be positive")
    return project_offsets_var(tape, (tape.sigmoid(raw) * 2.0 - 1.0) * eps, eps)


def blend_weights(masks) -> list[np.ndarray]:
    """Smoothed soft masks used to composite per-object fields."""
    return [ndimage.gaussian_filter(np.asarray(m, dtype=float), BLEND_SIGMA) + BLEND_FLOOR
            for m in masks]


def composite_offsets(deltas, masks, eps: float) -> np.ndarray:
    """Mask-weighted blend of per-object fields, re-centred to zero mean."""
    if len(deltas) == 1:
        return np.asarray(deltas[0], dtype=float)
    ws = blend_weights(masks)
    total = np.sum(ws, axis=0)
    blend = np.sum([w[None] * d for w, d in zip(ws, deltas)], axis=0) / total[None]
    return project_offsets(blend, eps)


def composite_offsets_var(tape: Tape, deltas, masks, eps: float) -> Var:
    if len(deltas) == 1:
        return deltas[0]
    ws = blend_weights(masks)
    total = np.sum(ws, axis=0)
    out = None
    for w, d in zip(ws, deltas):
        term = d * tape.const((w / total)[None])
        out = term if out is None else out + term
    return project_offsets_var(tape, out, eps)


def warp_pair(image: np.ndarray, masks, delta, border: str = "clamp"):
    """Warp the image and every ground-truth mask by the same field; masks stay soft."""
    d = delta.delta if isinstance(delta, OffsetField) else np.asarray(delta, dtype=float)
    if not np.any(d):
        return image.copy(), [np.asarray(m, dtype=float).copy() for m in masks]
    img, _ = grid_sample_forward(image, d, border)
    out = []
    for m in masks:
        wm, _ = grid_sample_forward(np.asarray(m, dtype=float)[None], d, border)
        out.append(np.clip(wm[0], 0.0, 1.0))
    return img, out


def warp_var(tape: Tape, image: Var, delta: Var, border: str = "clamp") -> Var:
    return tape.grid_sample(image, delta, border)


def divergence_rgb(delta: np.ndarray) -> np.ndarray:
    """Red where the field contracts the image, green where it expands (3×H×W in [0,1])."""
    d = delta.delta if isinstance(delta, OffsetField) else np.asarray(delta)
    div = np.gradient(d[0], axis=0) + np.gradient(d[1], axis=1)
    scale = max(float(np.abs(div).max()), 1e-12)
    # sampling from further out (positive divergence) shrinks content on screen
    rgb = np.ones((3,) + div.shape)
    shrink = np.clip(div / scale, 0, 1)
    grow = np.clip(-div / scale, 0, 1)
    rgb[1] -= shrink
    rgb[2] -= shrink
    rgb[0] -= grow
    rgb[2] -= grow
    return np.clip(rgb, 0.0, 1.0)
