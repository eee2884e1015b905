"""End-to-end experiments: UE-only vs RUAC across seeds, sample-count sweep, channel alignment."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone, bayes_head as bh, deform_attack as da, evaluate as E, metrics as M
from . import trainer as T
from .autodiff import Tape
from .synth_data import BenchmarkConfig, build_benchmark

# head learning rate used for end-to-end runs; see TrainConfig.lr_head for the table default
EXPERIMENT_LR_HEAD = 3e-3
SWEEP_SAMPLES = (1, 5, 20, 50, 100)


@dataclass
class SeedResult:
    seed: int
    rows: dict  # method -> {domain: metric row}
    states: dict  # method -> TrainState
    seconds: dict = field(default_factory=dict)


@dataclass
class DirectionalSummary:
    domains: list
    median: dict  # method -> domain -> metric -> median over seeds
    pavpu_wins: int
    aurc_wins: int
    joint_wins: int
    unccorr_ok: dict  # domain -> bool
    source_jf_gap: float  # RUAC − UE on source J&F (medians)
    source_jf_gap_unccorr: float
    seconds: float

    @property
    def passed(self) -> bool:
        return (self.joint_wins >= 4 and all(self.unccorr_ok.values())
                and self.source_jf_gap >= -0.02 and self.source_jf_gap_unccorr >= -0.02)


def method_configs(seed: int, lr_head: float = EXPERIMENT_LR_HEAD, **over):
    """UE-only (γ = 0 throughout) and full RUAC sharing every other setting."""
    base = T.TrainConfig(seed=seed, lr_head=lr_head, **over)
    return {"ue": replace(base, ue_only=True), "ruac": base}


def run_seed(bench, seed: int, mc_samples: int = E.DEFAULT_SAMPLES, lr_head=EXPERIMENT_LR_HEAD,
             log=print, **over) -> SeedResult:
    domains = {"source": bench.val, **bench.domains}
    res = SeedResult(seed, {}, {})
    for name, cfg in method_configs(seed, lr_head, **over).items():
        t0 = time.time()
        state = T.train(cfg, bench.train)
        t1 = time.time()
        rows, _ = E.evaluate(domains, state.head_params(), state.frozen, name, mc_samples, seed=seed)
        res.rows[name] = {r["domain"]: r for r in rows}
        res.states[name] = state
        res.seconds[name] = (t1 - t0, time.time() - t1)
        if log:
            log(f"seed {seed} {name}: train {t1 - t0:.0f}s, eval {time.time() - t1:.0f}s")
    return res


def summarize_directional(results, seconds: float = 0.0) -> DirectionalSummary:
    domains = list(results[0].rows["ue"])
    shifted = [d for d in domains if d != "source"]
    metrics = ("JF", "JF_unccorr", "pavpu", "aurc", "ece", "auroc")
    med = {m: {d: {k: float(np.median([r.rows[m][d][k] for r in results])) for k in metrics}
               for d in domains} for m in ("ue", "ruac")}
    pav = [med["ruac"][d]["pavpu"] >= med["ue"][d]["pavpu"] for d in shifted]
    aur = [med["ruac"][d]["aurc"] <= med["ue"][d]["aurc"] for d in shifted]
    ok = {d: med["ruac"][d]["JF_unccorr"] >= med["ruac"][d]["JF"] for d in domains}
    return DirectionalSummary(
        domains, med, int(sum(pav)), int(sum(aur)), int(sum(a and b for a, b in zip(pav, aur))), ok,
        med["ruac"]["source"]["JF"] - med["ue"]["source"]["JF"],
        med["ruac"]["source"]["JF_unccorr"] - med["ue"]["source"]["JF"], seconds)


def directional_experiment(seeds=range(5), bench_config: BenchmarkConfig = BenchmarkConfig(),
                           log=print, **over):
    """Train both methods per seed on one benchmark and compare medians over seeds."""
    t0 = time.time()
    bench = build_benchmark(bench_config)
    results = [run_seed(bench, s, log=log, **over) for s in seeds]
    return bench, results, summarize_directional(results, time.time() - t0)


def format_summary(summary: DirectionalSummary) -> str:
    lines = [f"{'domain':22s} {'JF ue/ruac/ruac+cc':>22s} {'PAvPU ue/ruac':>16s} {'AURC ue/ruac':>22s}"]
    for d in summary.domains:
        u, r = summary.median["ue"][d], summary.median["ruac"][d]
        lines.append(f"{d:22s} {u['JF']:.4f}/{r['JF']:.4f}/{r['JF_unccorr']:.4f} "
                     f"{u['pavpu']:.4f}/{r['pavpu']:.4f} {u['aurc']:.3e}/{r['aurc']:.3e}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# sample-count stability


def mc_sweep(state, scenes_by_domain: dict, samples=SWEEP_SAMPLES, seed: int = 0):
    """PAvPU per domain for each MC sample count."""
    out = {}
    for s in samples:
        rows, _ = E.evaluate(scenes_by_domain, state.head_params(), state.frozen, mc_samples=s, seed=seed)
        out[s] = {r["domain"]: r["pavpu"] for r in rows}
    return out


def sweep_spread(sweep: dict) -> dict:
    domains = next(iter(sweep.values()))
    return {d: max(v[d] for v in sweep.values()) - min(v[d] for v in sweep.values()) for d in domains}


# --------------------------------------------------------------------------
# channel alignment


def adversarial_view(scene, target: int, params: dict, frozen: dict, config: T.TrainConfig):
    """Image and masks after the trained style and deformation attacks, as seen in training."""
    tape = Tape()
    P = {k: tape.const(v) for k, v in {**frozen, **params}.items()
         if k.startswith(("style.", "gcn.", "deform.", "deform_frozen."))}
    sample = T.Sample(scene.image, scene.masks, target, scene.clicks[target])
    feats, _ = backbone.features_and_prompts(scene.image, sample.clicks, T.backbone_weights(frozen))
    image = T.build_style_var(tape, sample, feats, P, config, 1.0).value if config.style else scene.image
    masks = list(scene.masks)
    if config.deform:
        delta = T.build_deform_var(tape, sample, feats, P, config, 1.0).value
        image, masks = da.warp_pair(image, scene.masks, delta)
    return image, masks


def decoder_features(image, clicks, params: dict, frozen: dict) -> np.ndarray:
    """Hidden pixel features of the mask decoder (C′×H×W) for one prompt."""
    f, pr = backbone.features_and_prompts(image, clicks, T.backbone_weights(frozen))
    tape = Tape()
    P = {k: tape.const(v) for k, v in params.items() if k.startswith("head.")}
    return bh.pixel_posterior_var(tape, tape.const(np.concatenate([f, pr])), P)[2].value


def _object_features(image, masks, clicks, params, frozen):
    """Pooled decoder features for each prompted object, inside its own dilated mask."""
    return [M.pooled_features(decoder_features(image, c, params, frozen), [m])
            for m, c in zip(masks, clicks) if np.any(np.asarray(m) > 0.5)]


def augmentation_shift(scenes, state, config: T.TrainConfig) -> np.ndarray:
    """Mean pooled decoder features on attacked source scenes minus the clean mean."""
    clean, aug = [], []
    for sc in scenes:
        clean += _object_features(sc.image, sc.masks, sc.clicks, state.params, state.frozen)
        for k in range(len(sc.masks)):
            img, masks = adversarial_view(sc, k, state.params, state.frozen, config)
            aug += _object_features(img, [masks[k]], [sc.clicks[k]], state.params, state.frozen)
    return np.mean(aug, axis=0) - np.mean(clean, axis=0)


def ood_shift(bench, state, source=None, kinds=("elastic", "color_transfer")) -> np.ndarray:
    """OOD minus in-domain mean pooled decoder features, averaged over the named shift kinds."""
    source = bench.train if source is None else source
    ref = np.mean([f for sc in source
                   for f in _object_features(sc.image, sc.masks, sc.clicks, state.params, state.frozen)],
                  axis=0)
    shifts = []
    for dom in bench.manifest["domains"]:
        if dom["kind"] not in kinds:
            continue
        feats = [f for sc in bench.domains[dom["name"]]
                 for f in _object_features(sc.image, sc.masks, sc.clicks, state.params, state.frozen)]
        shifts.append(np.mean(feats, axis=0) - ref)
    return np.mean(shifts, axis=0)


def channel_alignment_experiment(bench, state, config: T.TrainConfig, n_source: int | None = None):
    """(r, ‖augmentation shift‖, augmentation shift, OOD shift) on the decoder channels."""
    scenes = bench.train if n_source is None else bench.train[:n_source]
    aug = augmentation_shift(scenes, state, config)
    ood = ood_shift(bench, state, scenes)
    r, norm = M.channel_alignment(aug, ood)
    return r, norm, aug, ood
