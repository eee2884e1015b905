"""Per-object adversarial style perturbation: bounded AdaIN residuals, optional GCN coordination."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist
from scipy.special import expit

from .autodiff import Tape, Var

SIGMA_GUARD = 1e-6
GCN_ALPHA = 0.1
NODE_DIM = 12
STYLE_DIM = 6


@dataclass
class ObjectStyle:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class StyleResidual:
    d_mu: np.ndarray
    d_sigma: np.ndarray
    d_shift: np.ndarray

    @classmethod
    def from_vector(cls, r):
        r = np.asarray(r, dtype=float)
        return cls(r[0:3], r[3:6], r[6:9])

    def as_vector(self):
        return np.concatenate([self.d_mu, self.d_sigma, self.d_shift])


@dataclass
class GraphThresholds:
    tau_iou: float = 0.1
    tau_sim: float = 0.5
    tau_d: float | None = None  # default: 0.25 × image diagonal
    d_max: float | None = None  # default: tau_d


@dataclass
class ObjectGraph:
    nodes: np.ndarray  # K × 12 node features, filled by gcn_refine
    adjacency: np.ndarray  # K × K, unit diagonal
    terms: dict = field(default_factory=dict)

    def normalized(self) -> np.ndarray:
        return self.adjacency / self.adjacency.sum(axis=1, keepdims=True)


def extract_object_style(image: np.ndarray, mask: np.ndarray) -> ObjectStyle:
    """Masked per-channel mean and population standard deviation."""
    m = np.asarray(mask) > 0.5
    if not m.any():
        raise ValueError("mask has no foreground pixels")
    px = image[:, m]
    return ObjectStyle(px.mean(axis=1), px.std(axis=1))


# --------------------------------------------------------------------------
# residual predictor


def init_style_params(in_dim: int = 12, hidden: int = 16, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "style.w1": rng.normal(0.0, np.sqrt(1.0 / in_dim), size=(in_dim, hidden)),
        "style.b1": np.zeros(hidden),
        "style.w2": rng.normal(0.0, 0.5 / np.sqrt(hidden), size=(hidden, 9)),
        "style.b2": np.zeros(9),
    }


def predict_style_residual_var(tape: Tape, pooled: Var, P: dict, grl_scale: float | None = 1.0):
    """Raw 9-vector residual; a GRL node is attached unless ``grl_scale`` is None."""
    h = tape.tanh(pooled.reshape(1, -1) @ P["style.w1"] + P["style.b1"])
    r = (h @ P["style.w2"] + P["style.b2"]).reshape(-1)
    return r if grl_scale is None else tape.grl(r, grl_scale)


def predict_style_residual(pooled: np.ndarray, params: dict) -> StyleResidual:
    tape = Tape()
    P = {k: tape.const(v) for k, v in params.items() if k.startswith("style.")}
    return StyleResidual.from_vector(predict_style_residual_var(tape, tape.const(pooled), P).value)


# --------------------------------------------------------------------------
# bounding and AdaIN


def bound_style(style: ObjectStyle, r: StyleResidual, eps_mu: float = 0.3, eps_sigma: float = 0.3,
                eps_shift: float = 0.3) -> ObjectStyle:
    if min(eps_mu, eps_sigma, eps_shift) <= 0:
        raise ValueError("style bounds must be positive")
    mu = style.mu * (1 + eps_mu * (2 * expit(r.d_mu) - 1)) + eps_shift * np.tanh(r.d_shift)
    sigma = np.maximum(style.sigma * (1 + eps_sigma * (2 * expit(r.d_sigma) - 1)), 0.0)
    return ObjectStyle(mu, sigma)


def bound_style_var(tape: Tape, style: ObjectStyle, r: Var, eps_mu=0.3, eps_sigma=0.3, eps_shift=0.3):
    """Tape form of :func:`bound_style`; ``r`` is the 9-vector residual."""
    mu = tape.const(style.mu) * ((tape.sigmoid(r[0:3]) * 2.0 - 1.0) * eps_mu + 1.0) \
        + tape.tanh(r[6:9]) * eps_shift
    sigma = tape.clip(tape.const(style.sigma) * ((tape.sigmoid(r[3:6]) * 2.0 - 1.0) * eps_sigma + 1.0),
                      0.0, np.inf)
    return mu, sigma


def _check_disjoint(masks):
    if masks and np.any(np.sum([np.asarray(m) > 0.5 for m in masks], axis=0) > 1):
        raise ValueError("object masks overlap")


def adain_apply(image: np.ndarray, masks, styles_adv, styles_src=None) -> np.ndarray:
    """Re-style each masked region to its target statistics; background untouched."""
    _check_disjoint(masks)
    if styles_src is None:
        styles_src = [extract_object_style(image, m) for m in masks]
    out = image.copy()
    for m, src, adv in zip(masks, styles_src, styles_adv):
        sel = np.asarray(m) > 0.5
        scale = (adv.sigma / np.maximum(src.sigma, SIGMA_GUARD))[:, None]
        out[:, sel] = np.clip(scale * (image[:, sel] - src.mu[:, None]) + adv.mu[:, None], 0.0, 1.0)
    return out


def adain_var(tape: Tape, image: np.ndarray, masks, styles_src, mus, sigmas) -> Var:
    """Composite I_bg + Σ M_k ⊙ AdaIN_k(I) on the tape, clipped to [0, 1]."""
    _check_disjoint(masks)
    img = tape.const(image)
    bg = 1.0 - np.clip(np.sum(masks, axis=0), 0.0, 1.0)
    out = img * tape.const(bg[None])
    for m, src, mu, sig in zip(masks, styles_src, mus, sigmas):
        norm = (image - src.mu[:, None, None]) / np.maximum(src.sigma, SIGMA_GUARD)[:, None, None]
        styled = tape.const(norm) * sig.reshape(3, 1, 1) + mu.reshape(3, 1, 1)
        out = out + styled * tape.const(np.asarray(m, dtype=float)[None])
    return tape.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# object graph and GCN


def _boundary(mask):
    m = np.asarray(mask) > 0.5
    return m & ~ndimage.binary_erosion(m)


def build_object_graph(masks, pooled_feats, thresholds: GraphThresholds = GraphThresholds()) -> ObjectGraph:
    k = len(masks)
    if k < 1:
        raise ValueError("need at least one object")
    h, w = np.shape(masks[0])
    tau_d = thresholds.tau_d if thresholds.tau_d is not None else 0.25 * float(np.hypot(h, w))
    d_max = thresholds.d_max if thresholds.d_max is not None else tau_d
    bins = [np.asarray(m) > 0.5 for m in masks]
    bounds = [np.argwhere(_boundary(m)) for m in masks]
    feats = np.asarray(pooled_feats, dtype=float)
    adj = np.eye(k)
    terms = {"iou": np.zeros((k, k)), "dist": np.zeros((k, k)), "sem": np.zeros((k, k))}
    for i in range(k):
        for j in range(i + 1, k):
            union = np.logical_or(bins[i], bins[j]).sum()
            iou = np.logical_and(bins[i], bins[j]).sum() / union if union else 0.0
            w_iou = iou if iou > thresholds.tau_iou else 0.0
            d = cdist(bounds[i], bounds[j]).min() if len(bounds[i]) and len(bounds[j]) else np.inf
            w_dist = max(0.0, 1.0 - d / d_max) if d < tau_d else 0.0
            ni, nj = np.linalg.norm(feats[i]), np.linalg.norm(feats[j])
            cos = float(feats[i] @ feats[j] / (ni * nj)) if ni > 0 and nj > 0 else 0.0
            w_sem = cos if cos > thresholds.tau_sim else 0.0
            for name, val in (("iou", w_iou), ("dist", w_dist), ("sem", w_sem)):
                terms[name][i, j] = terms[name][j, i] = val
            adj[i, j] = adj[j, i] = w_iou + w_dist + w_sem
    return ObjectGraph(np.zeros((k, NODE_DIM)), adj, terms)


def init_gcn_params(in_dim: int = 12, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "gcn.proj_w": rng.normal(0.0, np.sqrt(1.0 / in_dim), size=(in_dim, 6)),
        "gcn.proj_b": np.zeros(6),
        "gcn.w1": rng.normal(0.0, np.sqrt(1.0 / NODE_DIM), size=(NODE_DIM, NODE_DIM)),
        "gcn.ln_g": np.ones(NODE_DIM),
        "gcn.ln_b": np.zeros(NODE_DIM),
        "gcn.w2": rng.normal(0.0, 0.1 / np.sqrt(NODE_DIM), size=(NODE_DIM, STYLE_DIM)),
    }


def _layer_norm(tape, x, gain, bias, eps=1e-5):
    mean = x.mean(axis=1, keepdims=True)
    cen = x - mean
    var = (cen * cen).mean(axis=1, keepdims=True)
    return cen * ((var + eps) ** -0.5) * gain + bias


def gcn_refine_var(tape: Tape, graph: ObjectGraph, residuals: Var, pooled: Var, P: dict) -> Var:
    """Refine K×9 residuals; only the (Δμ, Δσ) block is touched, shift passes through."""
    a_norm = tape.const(graph.normalized())
    proj = pooled @ P["gcn.proj_w"] + P["gcn.proj_b"]
    h = tape.concat([residuals[:, 0:6], proj], axis=1)
    h = tape.ste_relu(_layer_norm(tape, a_norm @ (h @ P["gcn.w1"]), P["gcn.ln_g"], P["gcn.ln_b"]))
    h = a_norm @ (h @ P["gcn.w2"])
    style = residuals[:, 0:6] + h * GCN_ALPHA
    return tape.concat([style, residuals[:, 6:9]], axis=1)


def gcn_refine(graph: ObjectGraph, residuals, pooled_feats, params: dict) -> np.ndarray:
    tape = Tape()
    P = {k: tape.const(v) for k, v in params.items() if k.startswith("gcn.")}
    out = gcn_refine_var(tape, graph, tape.const(np.asarray(residuals, dtype=float)),
                         tape.const(np.asarray(pooled_feats, dtype=float)), P)
    return out.value
