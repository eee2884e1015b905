"""Uncertainty-guided connected-component correction of predicted masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

THRESHOLD_FLOOR = 0.3


@dataclass
class ComponentSet:
    labels: np.ndarray  # 0 background, 1..n
    counts: np.ndarray  # pixel count per label 1..n
    mean_unc: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.counts.size)


def connected_components(mask, connectivity: int = 8, unc=None) -> ComponentSet:
    """Label foreground components in raster-scan order of their first pixel."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    m = np.asarray(mask) > 0.5
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(m, structure=structure)
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    means = None
    if unc is not None:
        sums = np.bincount(labels.ravel(), weights=np.asarray(unc, dtype=float).ravel(),
                           minlength=n + 1)[1:]
        means = sums / np.maximum(counts, 1)
    return ComponentSet(labels, counts, means)


def nearest_rank_percentile(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("no values")
    rank = int(np.ceil(q / 100.0 * v.size))
    return float(v[max(rank, 1) - 1])


def _filter_once(m, unc, connectivity, floor):
    cs = connected_components(m, connectivity, unc)
    t = max(floor, nearest_rank_percentile(unc[m], 95))
    largest = int(np.argmax(cs.counts))  # argmax returns the lowest label on ties
    keep = (cs.mean_unc <= t)
    keep[largest] = True
    return keep[cs.labels - 1] & m, cs, keep, t


def unc_corr(mask, unc, connectivity: int = 8, floor: float = THRESHOLD_FLOOR,
             audit: bool = False):
    """Drop high-uncertainty fragments; the largest component is always kept.

    Dropping fragments lowers the foreground P95, which can expose further
    fragments, so the filter is repeated until nothing changes.  The result
    is therefore a fixed point and a second call is a no-op.
    """
    unc = np.asarray(unc, dtype=float)
    if np.any(unc < 0) or np.any(unc > 1):
        raise ValueError("uncertainty must lie in [0, 1]")
    m = np.asarray(mask) > 0.5
    if not m.any():
        out = m.copy()
        return (out, {"threshold": None, "components": []}) if audit else out
    cs0 = connected_components(m, connectivity, unc)
    out, rounds, thresholds = m, 0, []
    while True:
        nxt, _, _, t = _filter_once(out, unc, connectivity, floor)
        rounds += 1
        thresholds.append(t)
        if np.array_equal(nxt, out):
            break
        out = nxt
    if not audit:
        return out
    kept = [bool(out[cs0.labels == i + 1].any()) for i in range(cs0.n)]
    comps = [{"label": i + 1, "pixels": int(cs0.counts[i]), "mean_unc": float(cs0.mean_unc[i]),
              "kept": kept[i]} for i in range(cs0.n)]
    return out, {"threshold": thresholds[0], "final_threshold": thresholds[-1], "rounds": rounds,
                 "connectivity": connectivity, "components": comps}
