"""Segmentation and calibration metrics.

Undefined cases (single-class AUROC, constant PCC input, all-zero Wilcoxon
differences) raise :class:`UndefinedMetricError`; report builders turn those
into NaN cells.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

DEFAULT_TAUS = (0.01, 0.05, 0.1)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EvalRecord:
    pred_prob: np.ndarray
    gt_mask: np.ndarray
    unc: np.ndarray
    domain: str = "source"
    pred_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.pred_mask is None:
            self.pred_mask = self.pred_prob >= 0.5
        shapes = {np.shape(self.pred_prob), np.shape(self.gt_mask), np.shape(self.unc),
                  np.shape(self.pred_mask)}
        if len(shapes) != 1:
            raise ValueError(f"record shapes differ: {shapes}")

    @property
    def err(self) -> np.ndarray:
        return (np.asarray(self.pred_mask, bool) != (np.asarray(self.gt_mask) > 0.5)).astype(float)


# --------------------------------------------------------------------------
# segmentation quality


def jaccard(pred, gt) -> float:
    p = np.asarray(pred) > 0.5
    g = np.asarray(gt) > 0.5
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary(mask) -> np.ndarray:
    m = np.asarray(mask) > 0.5
    return m & ~ndimage.binary_erosion(m, structure=np.ones((3, 3)), border_value=0)


def boundary_f(pred, gt, tol: int = 1) -> float:
    bp, bg = boundary(pred), boundary(gt)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    st = np.ones((2 * tol + 1, 2 * tol + 1), bool)
    gt_d = ndimage.binary_dilation(bg, structure=st) if tol > 0 else bg
    pr_d = ndimage.binary_dilation(bp, structure=st) if tol > 0 else bp
    precision = (bp & gt_d).sum() / bp.sum()
    recall = (bg & pr_d).sum() / bg.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def jf_score(pred_mask, gt_mask, tol: int = 1):
    if np.shape(pred_mask) != np.shape(gt_mask):
        raise ValueError("masks must share a shape")
    j = jaccard(pred_mask, gt_mask)
    f = boundary_f(pred_mask, gt_mask, tol)
    return j, f, (j + f) / 2.0


# --------------------------------------------------------------------------
# uncertainty quality


def _patches(h, w, ps):
    for y in range(0, h, ps):
        for x in range(0, w, ps):
            yield slice(y, min(y + ps, h)), slice(x, min(x + ps, w))


def pavpu_counts(err, unc, patch_size: int = 4, tau: float = 0.05):
    """(n_ac, n_au, n_ic, n_iu) over patches; partial edge patches included."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    err = np.asarray(err, dtype=float)
    unc = np.asarray(unc, dtype=float)
    counts = np.zeros(4, dtype=int)
    for sy, sx in _patches(*err.shape, patch_size):
        accurate = 1.0 - err[sy, sx].mean() >= 0.5
        uncertain = unc[sy, sx].mean() > tau
        counts[(0 if accurate else 2) + (1 if uncertain else 0)] += 1
    return tuple(int(c) for c in counts)


def pavpu(records, patch_size: int = 4, taus=DEFAULT_TAUS):
    """Pooled PAvPU over all records' patches; returns ({τ: value}, mean)."""
    if isinstance(records, EvalRecord):
        records = [records]
    out = {}
    for tau in taus:
        tot = np.zeros(4, dtype=int)
        for r in records:
            tot += pavpu_counts(r.err, r.unc, patch_size, tau)
        n_ac, n_au, n_ic, n_iu = tot
        out[tau] = float((n_ac + n_iu) / tot.sum())
    return out, float(np.mean(list(out.values())))


def pavpu_arrays(err, unc, patch_size: int = 4, taus=DEFAULT_TAUS):
    vals = {}
    for tau in taus:
        n_ac, n_au, n_ic, n_iu = pavpu_counts(err, unc, patch_size, tau)
        vals[tau] = (n_ac + n_iu) / (n_ac + n_au + n_ic + n_iu)
    return vals, float(np.mean(list(vals.values())))


def aurc(err, unc, coverages=None):
    """Mean selective risk over every coverage k/N, keeping lowest-uncertainty pixels first."""
    e = np.asarray(err, dtype=float).ravel()
    u = np.asarray(unc, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("aurc needs at least one pixel")
    order = np.argsort(u, kind="stable")
    risks = np.cumsum(e[order]) / np.arange(1, e.size + 1)
    value = float(np.mean(risks))
    if coverages is None:
        coverages = np.linspace(0.05, 1.0, 20)
    cov = np.asarray(coverages, dtype=float)
    idx = np.clip(np.ceil(cov * e.size).astype(int), 1, e.size) - 1
    return value, np.stack([cov, risks[idx]], axis=1)


def ece(pred_prob, gt, bins: int = 15) -> float:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    p = np.asarray(pred_prob, dtype=float).ravel()
    g = np.asarray(gt).ravel() > 0.5
    conf = np.maximum(p, 1.0 - p)
    correct = (p >= 0.5) == g
    idx = np.clip(np.floor((conf - 0.5) / 0.5 * bins).astype(int), 0, bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        n = sel.sum()
        if n:
            total += n / p.size * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def auroc_pixel(unc, err) -> float:
    """Mann-Whitney AUROC of uncertainty separating erroneous from correct pixels."""
    u = np.asarray(unc, dtype=float).ravel()
    e = np.asarray(err).ravel() > 0.5
    n_pos, n_neg = int(e.sum()), int((~e).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both erroneous and correct pixels")
    ranks = rankdata(u)
    return float((ranks[e].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_mask(mask_unc, mask_iou) -> float:
    """Mask-level AUROC: a mask counts as an error when its IoU is below the median IoU."""
    iou = np.asarray(mask_iou, dtype=float)
    return auroc_pixel(mask_unc, iou < np.median(iou))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0:
        raise UndefinedMetricError("pearson is undefined for constant input")
    return float(np.clip((xc * yc).sum() / den, -1.0, 1.0))


def wilcoxon_signed_rank(a, b, side: str = "greater"):
    """Exact signed-rank test on a − b.

    Returns (W+, p).  ``side`` is "greater" (a tends to exceed b), "less" or
    "two-sided".  Midranks handle ties; the null distribution is counted
    over all 2^n sign assignments with a dynamic program on doubled ranks.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise UndefinedMetricError("all paired differences are zero")
    r2 = np.rint(2 * rankdata(np.abs(d))).astype(int)  # doubled midranks are integers
    w2 = int(r2[d > 0].sum())
    total = int(r2.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in r2:
        nxt = dist.copy()
        nxt[r:] += dist[:-r] if r else 0
        dist = nxt
    dist /= 2.0 ** n
    upper = float(dist[w2:].sum())
    lower = float(dist[:w2 + 1].sum())
    if side == "greater":
        p = upper
    elif side == "less":
        p = lower
    elif side == "two-sided":
        p = min(1.0, 2 * min(upper, lower))
    else:
        raise ValueError(f"unknown side {side!r}")
    return w2 / 2.0, p


# --------------------------------------------------------------------------
# feature-shift alignment


def pooled_features(feats, masks, dilate: int = 2) -> np.ndarray:
    """Per-channel mean of ``feats`` (C×H×W) inside the union of the dilated masks."""
    f = np.asarray(feats, dtype=float)
    m = np.zeros(f.shape[1:], bool)
    for mk in masks:
        m |= np.asarray(mk) > 0.5
    if dilate:
        m = ndimage.binary_dilation(m, iterations=dilate)
    if not m.any():
        raise ValueError("empty pooling region")
    return f[:, m].mean(axis=1)


def pooled_shift(feats_a, feats_b, masks, dilate: int = 2) -> np.ndarray:
    """Per-channel mean difference (b − a) pooled inside dilated masks."""
    return pooled_features(feats_b, masks, dilate) - pooled_features(feats_a, masks, dilate)


def channel_alignment(shift_aug, shift_ood):
    shift_aug = np.asarray(shift_aug, dtype=float)
    if shift_aug.size < 2:
        raise ValueError("need at least two channels")
    return pearson(shift_aug, shift_ood), float(np.linalg.norm(shift_aug))


# --------------------------------------------------------------------------
# reports


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except UndefinedMetricError:
        return float("nan")


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # dicts: method, domain, metric columns
    tests: list = field(default_factory=list)

    COLUMNS = ("method", "domain", "n", "J", "F", "JF", "pavpu_0.01", "pavpu_0.05", "pavpu_0.1",
               "pavpu", "aurc", "ece", "auroc", "pcc")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r.get(c)) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {"rows": self.rows, "tests": self.tests}


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def summarize(records, method: str = "model", domain: str | None = None, patch_size: int = 4,
              taus=DEFAULT_TAUS) -> dict:
    """All metrics for one (method, domain) group; pixel metrics are pooled."""
    records = list(records)
    jf = np.array([jf_score(r.pred_mask, r.gt_mask) for r in records])
    per_tau, pav = pavpu(records, patch_size, taus)
    err = np.concatenate([r.err.ravel() for r in records])
    unc = np.concatenate([np.asarray(r.unc).ravel() for r in records])
    prob = np.concatenate([np.asarray(r.pred_prob).ravel() for r in records])
    gt = np.concatenate([np.asarray(r.gt_mask).ravel() for r in records])
    row = {"method": method, "domain": domain or records[0].domain, "n": len(records),
           "J": float(jf[:, 0].mean()), "F": float(jf[:, 1].mean()), "JF": float(jf[:, 2].mean())}
    for tau in taus:
        row[f"pavpu_{tau}"] = per_tau[tau]
    row.update(pavpu=pav, aurc=aurc(err, unc)[0], ece=ece(prob, gt),
               auroc=_safe(auroc_pixel, unc, err), pcc=_safe(pearson, unc, err))
    return row
