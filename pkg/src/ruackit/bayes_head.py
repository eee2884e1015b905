"""Bayesian mask head with Weibull posteriors on pixel features and mask-token weights.

Two uncertainty modes:

* analytic -- closed-form Weibull moments, first-order logit variance, probit
  squashing of the mean logit, normalized Bernoulli entropy;
* Monte Carlo -- reparameterized samples, entropy of the mean probability.

The graph builders (``*_var``) put the head on a :class:`~ruackit.autodiff.Tape`
for training.  The plain functions run the same builders eagerly and return
arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import backbone
from .autodiff import Tape, Var
from .weibull import KAPPA_MAX, KAPPA_MIN, GammaPrior, kl_var, moments_var

LN2 = float(np.log(2.0))


@dataclass
class HeadConfig:
    in_channels: int = backbone.FEATURE_CHANNELS + backbone.PROMPT_CHANNELS
    feat_dim: int = 8
    n_masks: int = 1
    token_hidden: int = 16
    kappa_init: float = 3.0


@dataclass
class PixelPosterior:
    lam: np.ndarray  # C'×H×W
    kap: np.ndarray


@dataclass
class MaskTokenPosterior:
    fg_lam: np.ndarray  # K×C'
    fg_kap: np.ndarray
    bg_lam: np.ndarray
    bg_kap: np.ndarray
    bias: np.ndarray  # K


@dataclass
class LogitStats:
    m: np.ndarray
    v: np.ndarray


def _inv_softplus(y):
    return float(np.log(np.expm1(y)))


def init_head_params(cfg: HeadConfig = HeadConfig(), seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    c, f, k, hid = cfg.in_channels, cfg.feat_dim, cfg.n_masks, cfg.token_hidden

    def conv(o, i):
        return rng.normal(0.0, np.sqrt(1.0 / (9 * i)), size=(o, i, 3, 3))

    out_b = np.zeros(4 * f)
    out_b[f:2 * f] = _inv_softplus(cfg.kappa_init)
    out_b[3 * f:] = _inv_softplus(cfg.kappa_init)
    return {
        "head.conv_a": conv(f, c), "head.conv_a_b": np.zeros(f),
        "head.conv_lam": conv(f, f), "head.conv_lam_b": np.zeros(f),
        "head.conv_k1": conv(f, c), "head.conv_k1_b": np.zeros(f),
        "head.conv_k2": conv(f, f) * 0.1, "head.conv_k2_b": np.full(f, _inv_softplus(cfg.kappa_init)),
        "head.token": rng.normal(0.0, 1.0, size=(k, f)),
        "head.tok_w1": rng.normal(0.0, np.sqrt(1.0 / f), size=(f, hid)), "head.tok_b1": np.zeros(hid),
        "head.tok_w2": rng.normal(0.0, 0.3 * np.sqrt(1.0 / hid), size=(hid, 4 * f)),
        "head.tok_b2": out_b,
        "head.bias": np.zeros(k),
        "head.iou_w": np.zeros((f, k)), "head.iou_b": np.zeros(k),
    }


def bind(tape: Tape, params: dict, prefix: str, frozen: bool = False) -> dict[str, Var]:
    """Register every ``params`` entry under ``prefix`` as a tape leaf."""
    out = {}
    for name, value in params.items():
        if name.startswith(prefix):
            out[name] = tape.const(value) if frozen else tape.param(name, value)
    return out


# --------------------------------------------------------------------------
# graph builders


def pixel_posterior_var(tape: Tape, feats: Var, P: dict):
    """Return (λ_z, κ_z, hidden) for the pixel path."""
    hidden = tape.ste_relu(tape.conv3x3(feats, P["head.conv_a"], P["head.conv_a_b"]))
    lam = tape.softplus(tape.conv3x3(hidden, P["head.conv_lam"], P["head.conv_lam_b"]))
    k1 = tape.tanh(tape.conv3x3(feats, P["head.conv_k1"], P["head.conv_k1_b"]))
    kap = tape.clip(tape.softplus(tape.conv3x3(k1, P["head.conv_k2"], P["head.conv_k2_b"])),
                    KAPPA_MIN, KAPPA_MAX)
    return lam, kap, hidden


def mask_posterior_var(tape: Tape, token: Var, P: dict):
    """Shared token MLP -> (fg_λ, fg_κ, bg_λ, bg_κ), each K×C'."""
    f = P["head.tok_w2"].shape[1] // 4
    hid = tape.tanh(token @ P["head.tok_w1"] + P["head.tok_b1"])
    out = hid @ P["head.tok_w2"] + P["head.tok_b2"]
    fg_lam = tape.softplus(out[:, 0:f])
    fg_kap = tape.clip(tape.softplus(out[:, f:2 * f]), KAPPA_MIN, KAPPA_MAX)
    bg_lam = tape.softplus(out[:, 2 * f:3 * f])
    bg_kap = tape.clip(tape.softplus(out[:, 3 * f:]), KAPPA_MIN, KAPPA_MAX)
    return fg_lam, fg_kap, bg_lam, bg_kap


def logit_stats_var(tape: Tape, ez, vz, efg, vfg, ebg, vbg, bias, k: int):
    """Mean and first-order variance of logit k; pixel moments are C'×H×W."""
    c, h, w = ez.shape
    d_mean = (efg - ebg)[k:k + 1]
    d_var = (vfg + vbg)[k:k + 1]
    m = (d_mean @ ez.reshape(c, h * w)).reshape(h, w) + bias[k]
    v = (d_var @ vz.reshape(c, h * w)).reshape(h, w)
    return m, v


def uncertainty_var(tape: Tape, m: Var, v: Var):
    """Probit-squashed probability and normalized entropy (bits)."""
    a = m * ((v * (np.pi / 8.0) + 1.0) ** -0.5)
    p = tape.sigmoid(a)
    u = (p * tape.softplus(-a) + (1.0 - p) * tape.softplus(a)) * (1.0 / LN2)
    return p, u


def sampled_logits_var(tape: Tape, lam, kap, fg_lam, fg_kap, bg_lam, bg_kap, bias, k: int,
                       rng: np.random.Generator):
    c, h, w = lam.shape
    tiny = np.finfo(float).eps
    z = tape.weibull(lam, kap, tape.const(rng.uniform(tiny, 1 - tiny, size=lam.shape)))
    wfg = tape.weibull(fg_lam, fg_kap, tape.const(rng.uniform(tiny, 1 - tiny, size=fg_lam.shape)))
    wbg = tape.weibull(bg_lam, bg_kap, tape.const(rng.uniform(tiny, 1 - tiny, size=bg_lam.shape)))
    d = (wfg - wbg)[k:k + 1]
    return (d @ z.reshape(c, h * w)).reshape(h, w) + bias[k]


def iou_var(tape: Tape, hidden: Var, P: dict):
    pooled = hidden.mean(axis=(1, 2)).reshape(1, -1)
    return tape.sigmoid(pooled @ P["head.iou_w"] + P["head.iou_b"]).reshape(-1)


def kl_total_var(tape: Tape, posteriors, prior: GammaPrior = GammaPrior()):
    """Sum of element-wise KL over a list of (λ, κ) tape pairs."""
    total = None
    for lam, kap in posteriors:
        term = kl_var(tape, lam, kap, prior).sum()
        total = term if total is None else total + term
    return total


@dataclass
class HeadGraph:
    """Tape handles produced by :func:`build_head`."""

    lam: Var
    kap: Var
    hidden: Var
    fg: tuple
    bg: tuple
    bias: Var
    ez: Var
    vz: Var
    m: Var
    v: Var
    p: Var
    u: Var
    iou: Var
    efg: Var
    vfg: Var
    ebg: Var
    vbg: Var


def build_head(tape: Tape, feats: Var, P: dict, k: int = 0) -> HeadGraph:
    lam, kap, hidden = pixel_posterior_var(tape, feats, P)
    fg_lam, fg_kap, bg_lam, bg_kap = mask_posterior_var(tape, P["head.token"], P)
    ez, vz = moments_var(tape, lam, kap)
    efg, vfg = moments_var(tape, fg_lam, fg_kap)
    ebg, vbg = moments_var(tape, bg_lam, bg_kap)
    m, v = logit_stats_var(tape, ez, vz, efg, vfg, ebg, vbg, P["head.bias"], k)
    p, u = uncertainty_var(tape, m, v)
    return HeadGraph(lam, kap, hidden, (fg_lam, fg_kap), (bg_lam, bg_kap), P["head.bias"],
                     ez, vz, m, v, p, u, iou_var(tape, hidden, P), efg, vfg, ebg, vbg)


# --------------------------------------------------------------------------
# eager API


def _consts(tape, params):
    return {k: tape.const(v) for k, v in params.items() if k.startswith("head.")}


def predict_pixel_posterior(features: np.ndarray, params: dict) -> PixelPosterior:
    tape = Tape()
    lam, kap, _ = pixel_posterior_var(tape, tape.const(features), _consts(tape, params))
    return PixelPosterior(lam.value, kap.value)


def predict_mask_posterior(token: np.ndarray, params: dict) -> MaskTokenPosterior:
    """Posterior for one token vector (length C'); bias taken from ``params``."""
    tape = Tape()
    P = _consts(tape, params)
    tok = tape.const(np.asarray(token, dtype=float).reshape(1, -1))
    fg_lam, fg_kap, bg_lam, bg_kap = mask_posterior_var(tape, tok, P)
    return MaskTokenPosterior(fg_lam.value, fg_kap.value, bg_lam.value, bg_kap.value,
                              np.asarray(params["head.bias"], dtype=float)[:1])


def mask_posterior(params: dict) -> MaskTokenPosterior:
    tape = Tape()
    P = _consts(tape, params)
    fg_lam, fg_kap, bg_lam, bg_kap = mask_posterior_var(tape, P["head.token"], P)
    return MaskTokenPosterior(fg_lam.value, fg_kap.value, bg_lam.value, bg_kap.value,
                              np.asarray(params["head.bias"], dtype=float))


def _moments(lam, kap):
    tape = Tape()
    e, v = moments_var(tape, tape.const(lam), tape.const(kap))
    return e.value, v.value


def logit_stats_from_moments(ez, vz, efg, vfg, ebg, vbg, bias=0.0) -> LogitStats:
    """Direct numpy form; pixel moments C'×H×W, weight moments length C'."""
    efg, vfg, ebg, vbg = (np.asarray(a, dtype=float).reshape(-1, 1, 1) for a in (efg, vfg, ebg, vbg))
    m = np.sum(ez * (efg - ebg), axis=0) + bias
    v = np.sum(vz * (vfg + vbg), axis=0)
    return LogitStats(m, v)


def full_variance_from_moments(ez, vz, efg, vfg, ebg, vbg) -> np.ndarray:
    """Exact Var of Σ_c z_c (w_fg,c − w_bg,c) for independent factors."""
    efg, vfg, ebg, vbg = (np.asarray(a, dtype=float).reshape(-1, 1, 1) for a in (efg, vfg, ebg, vbg))
    vd = vfg + vbg
    ed = efg - ebg
    return np.sum(vz * vd + vz * ed ** 2 + vd * ez ** 2, axis=0)


def _all_moments(px: PixelPosterior, mk: MaskTokenPosterior, k: int):
    ez, vz = _moments(px.lam, px.kap)
    efg, vfg = _moments(mk.fg_lam[k], mk.fg_kap[k])
    ebg, vbg = _moments(mk.bg_lam[k], mk.bg_kap[k])
    return ez, vz, efg, vfg, ebg, vbg


def logits_analytic(px: PixelPosterior, mk: MaskTokenPosterior, k: int = 0) -> LogitStats:
    return logit_stats_from_moments(*_all_moments(px, mk, k), bias=float(mk.bias[k]))


def full_variance(px: PixelPosterior, mk: MaskTokenPosterior, k: int = 0) -> np.ndarray:
    return full_variance_from_moments(*_all_moments(px, mk, k))


def bernoulli_entropy(p) -> np.ndarray:
    """Entropy in bits with 0·log 0 := 0, so values lie in [0, 1]."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
        q = 1.0 - p
        t2 = np.where(q > 0, -q * np.log2(np.where(q > 0, q, 1.0)), 0.0)
    return np.clip(t1 + t2, 0.0, 1.0)


def probit_probability(ls: LogitStats) -> np.ndarray:
    if np.any(ls.v < 0):
        raise ValueError("logit variance must be non-negative")
    return expit(ls.m / np.sqrt(1.0 + np.pi * ls.v / 8.0))


def uncertainty_analytic(ls: LogitStats) -> np.ndarray:
    """Normalized entropy of the probit-squashed mean logit.

    Uses the log-sigmoid form, which stays exact where ``p`` rounds to 1.
    """
    if np.any(np.asarray(ls.v) < 0):
        raise ValueError("logit variance must be non-negative")
    a = np.asarray(ls.m, dtype=float) / np.sqrt(1.0 + np.pi * np.asarray(ls.v, dtype=float) / 8.0)
    p = expit(a)
    u = (p * np.logaddexp(0.0, -a) + (1.0 - p) * np.logaddexp(0.0, a)) / LN2
    return np.clip(u, 0.0, 1.0)


def forward_mc(px: PixelPosterior, mk: MaskTokenPosterior, k: int = 0, S: int = 20,
               rng_seed: int = 0, return_variance: bool = False):
    """Monte Carlo mean probability and entropy-of-mean uncertainty.

    With ``return_variance`` the per-pixel variance of the sample
    probabilities is returned as a third value.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = np.random.default_rng(rng_seed)
    tiny = np.finfo(float).eps
    c, h, w = px.lam.shape
    acc = np.zeros((h, w))
    acc2 = np.zeros((h, w))
    inv_kz = 1.0 / px.kap
    for _ in range(S):
        z = px.lam * np.power(-np.log1p(-rng.uniform(tiny, 1 - tiny, size=px.lam.shape)), inv_kz)
        wfg = mk.fg_lam[k] * np.power(-np.log1p(-rng.uniform(tiny, 1 - tiny, size=c)), 1.0 / mk.fg_kap[k])
        wbg = mk.bg_lam[k] * np.power(-np.log1p(-rng.uniform(tiny, 1 - tiny, size=c)), 1.0 / mk.bg_kap[k])
        logits = np.tensordot(wfg - wbg, z, axes=(0, 0)) + mk.bias[k]
        prob = expit(logits)
        acc += prob
        acc2 += prob * prob
    mean = acc / S
    unc = bernoulli_entropy(mean)
    if return_variance:
        return mean, unc, np.maximum(acc2 / S - mean * mean, 0.0)
    return mean, unc


@dataclass
class HeadOutput:
    logits: np.ndarray  # analytic mean logit m
    prob: np.ndarray
    uncertainty: np.ndarray
    iou: np.ndarray
    v: np.ndarray


def head_forward(features: np.ndarray, prompts: np.ndarray, params: dict,
                 mode: str | tuple = "analytic", k: int = 0, seed: int = 0) -> HeadOutput:
    """Full head pass.

    ``mode`` is ``"analytic"`` or ``("mc", S)``.  In Monte Carlo mode the
    segmentation output still comes from the analytic mean logit; only the
    uncertainty map and mean probability are sampled.
    """
    tape = Tape()
    P = _consts(tape, params)
    feats = tape.concat([tape.const(features), tape.const(prompts)], axis=0)
    hg = build_head(tape, feats, P, k)
    if mode == "analytic":
        return HeadOutput(hg.m.value, hg.p.value, hg.u.value, hg.iou.value, hg.v.value)
    kind, S = mode
    if kind != "mc":
        raise ValueError(f"unknown mode {mode!r}")
    px = PixelPosterior(hg.lam.value, hg.kap.value)
    mk = MaskTokenPosterior(hg.fg[0].value, hg.fg[1].value, hg.bg[0].value, hg.bg[1].value,
                            hg.bias.value)
    mean, unc = forward_mc(px, mk, k, int(S), seed)
    return HeadOutput(hg.m.value, mean, unc, hg.iou.value, hg.v.value)
