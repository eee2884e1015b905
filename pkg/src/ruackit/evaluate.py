"""Evaluation protocol: per-object predictions, metric tables and UncCorr comparison."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import backbone, bayes_head as bh, metrics as M
from .postproc import unc_corr

DEFAULT_SAMPLES = 20


@dataclass
class Prediction:
    record: M.EvalRecord
    corrected: np.ndarray
    scene_seed: int
    obj: int


def _bw(frozen):
    return {k[len("backbone."):]: v for k, v in frozen.items() if k.startswith("backbone.")}


def predict_scene(scene, params, frozen, mc_samples: int = DEFAULT_SAMPLES, seed: int = 0):
    """One prediction per prompted object; ``mc_samples=0`` selects analytic uncertainty."""
    bw = _bw(frozen)
    out = []
    for k, clicks in enumerate(scene.clicks):
        feats, prompts = backbone.features_and_prompts(scene.image, clicks, bw)
        mode = "analytic" if mc_samples == 0 else ("mc", mc_samples)
        ho = bh.head_forward(feats, prompts, params, mode=mode,
                             seed=seed * 1_000_003 + scene.seed * 31 + k)
        rec = M.EvalRecord(ho.prob, np.asarray(scene.masks[k]) > 0.5, ho.uncertainty, scene.domain)
        out.append(Prediction(rec, unc_corr(rec.pred_mask, rec.unc), scene.seed, k))
    return out


def _predict_many(args):
    scenes, params, frozen, s, seed = args
    return [p for sc in scenes for p in predict_scene(sc, params, frozen, s, seed)]


def predict_domain(scenes, params, frozen, mc_samples=DEFAULT_SAMPLES, seed=0, jobs: int = 1):
    if jobs <= 1:
        return _predict_many((scenes, params, frozen, mc_samples, seed))
    chunks = [scenes[i::jobs] for i in range(jobs)]
    with ProcessPoolExecutor(jobs) as ex:
        parts = list(ex.map(_predict_many, [(c, params, frozen, mc_samples, seed) for c in chunks]))
    # restore scene order so reports do not depend on the worker count
    by_key = {(p.scene_seed, p.obj): p for part in parts for p in part}
    return [by_key[(sc.seed, k)] for sc in scenes for k in range(len(sc.clicks))]


def domain_row(preds, method, domain, patch_size=4, taus=M.DEFAULT_TAUS):
    row = M.summarize([p.record for p in preds], method, domain, patch_size, taus)
    jf_corr = [M.jf_score(p.corrected, p.record.gt_mask)[2] for p in preds]
    row["JF_unccorr"] = float(np.mean(jf_corr))
    return row


def evaluate(domains: dict, params, frozen, method="model", mc_samples=DEFAULT_SAMPLES, seed=0,
             jobs=1, patch_size=4):
    """Metric rows for every named domain plus per-domain prediction lists."""
    rows, preds = [], {}
    for name, scenes in domains.items():
        p = predict_domain(scenes, params, frozen, mc_samples, seed, jobs)
        preds[name] = p
        rows.append(domain_row(p, method, name, patch_size))
    return rows, preds


def risk_coverage_csv(preds, coverages=None) -> str:
    err = np.concatenate([p.record.err.ravel() for p in preds])
    unc = np.concatenate([np.asarray(p.record.unc).ravel() for p in preds])
    _, curve = M.aurc(err, unc, coverages)
    lines = ["coverage,risk"] + [f"{c:.4f},{r:.10f}" for c, r in curve]
    return "\n".join(lines) + "\n"


REPORT_COLUMNS = M.MetricsReport.COLUMNS + ("JF_unccorr",)


def rows_to_csv(rows) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for r in rows:
        lines.append(",".join(M._fmt(r.get(c)) for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"
