"""Losses, curriculum and the gradient-reversal min-max training loop.

One optimizer step builds a single tape for the whole batch: a clean pass
through the head, and (when the adversarial weight is live) an attacked pass
where the style and deformation networks perturb the input.  The attack
networks sit behind gradient-reversal nodes, so one backward pass gives the
head the gradient to minimize the loss and the attackers the gradient to
maximize it.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import backbone, bayes_head as bh, deform_attack as da, style_attack as sa
from .autodiff import NonFiniteError, Tape, Var, backward
from .grid import save_grid
from .weibull import GammaPrior

log = logging.getLogger(__name__)

STYLE_VARIANTS = ("single", "multi", "multi_bg", "gcn")


class TrainingError(RuntimeError):
    def __init__(self, message, components=None):
        super().__init__(message if components is None else f"{message}: {components}")
        self.components = components or {}


@dataclass
class TrainConfig:
    beta: float = 0.05
    gamma: float = 0.2
    lambda_cal: float = 0.1
    eps_style: float = 0.3
    eps_shift: float | None = None  # None: same as eps_style
    eps_deform: float = 0.15  # normalized grid units
    lr_head: float = 1e-4
    lr_attack_start: float = 1e-3
    lr_attack_end: float = 1e-4
    weight_decay: float = 1e-4
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    epochs: int = 20
    p1: float = 0.2
    p2: float = 0.3
    kl_element_scale: float = 1e-6
    batch_size: int = 4
    samples_per_scene: int = 1
    seed: int = 0
    ue_only: bool = False
    style: bool = True
    style_variant: str = "multi"
    deform: bool = True
    cal_to_head: bool = True
    grl_scale: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    prior_alpha: float = 1.0
    prior_beta: float = 3.0

    def __post_init__(self):
        for name in ("beta", "gamma", "lambda_cal", "kl_element_scale", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.p1 < self.p2 < 1:
            raise ValueError("curriculum needs 0 < p1 < p2 < 1")
        if self.style_variant not in STYLE_VARIANTS:
            raise ValueError(f"style_variant must be one of {STYLE_VARIANTS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def shift_eps(self):
        return self.eps_style if self.eps_shift is None else self.eps_shift

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


@dataclass
class TrainState:
    params: dict  # trainable: head.*, style.*, gcn.*, deform.*
    frozen: dict  # backbone and deform_frozen.* weights
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    log: list = field(default_factory=list)

    def head_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("head.")}


def init_state(config: TrainConfig) -> TrainState:
    s = config.seed
    params = bh.init_head_params(seed=s)
    params.update(sa.init_style_params(seed=s + 1))
    params.update(sa.init_gcn_params(seed=s + 2))
    deform = da.init_deform_params(seed=s + 3)
    params.update({k: v for k, v in deform.items() if k.startswith("deform.")})
    frozen = {"backbone." + k: v for k, v in backbone.init_backbone().items()}
    frozen.update({k: v for k, v in deform.items() if k.startswith("deform_frozen.")})
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(params, frozen, zeros, {k: np.zeros_like(v) for k, v in params.items()})


def backbone_weights(state_or_frozen) -> dict:
    frozen = state_or_frozen.frozen if isinstance(state_or_frozen, TrainState) else state_or_frozen
    return {k[len("backbone."):]: v for k, v in frozen.items() if k.startswith("backbone.")}


# --------------------------------------------------------------------------
# losses


def focal_loss_var(tape: Tape, logits: Var, target: np.ndarray | Var, alpha=0.25, gamma=2.0):
    t = target if isinstance(target, Var) else tape.const(target)
    p = tape.sigmoid(logits)
    log_p = -tape.softplus(-logits)
    log_q = -tape.softplus(logits)
    pos = t * ((1.0 - p) ** gamma) * log_p * (-alpha)
    neg = (1.0 - t) * (p ** gamma) * log_q * (-(1.0 - alpha))
    return (pos + neg).mean()


def dice_loss_var(tape: Tape, prob: Var, target, eps: float = 1e-6):
    t = target if isinstance(target, Var) else tape.const(target)
    inter = (prob * t).sum()
    return 1.0 - inter * 2.0 / (prob.sum() + t.sum() + eps)


def seg_loss_var(tape: Tape, logits: Var, iou_pred: Var, target, alpha=0.25, gamma=2.0):
    """Focal + soft dice + squared error of the IoU estimate; returns (total, parts)."""
    focal = focal_loss_var(tape, logits, target, alpha, gamma)
    dice = dice_loss_var(tape, tape.sigmoid(logits), target)
    tval = target.value if isinstance(target, Var) else np.asarray(target)
    pred = logits.value >= 0
    gt = tval >= 0.5
    union = np.logical_or(pred, gt).sum()
    iou_true = float(np.logical_and(pred, gt).sum() / union) if union else 1.0
    diff = iou_pred - iou_true
    iou_term = (diff * diff).sum()
    return focal + dice + iou_term, {"focal": focal, "dice": dice, "iou": iou_term}


def seg_loss(logits, iou_pred, gt_mask, alpha=0.25, gamma=2.0) -> float:
    tape = Tape()
    total, _ = seg_loss_var(tape, tape.const(logits), tape.const(np.atleast_1d(iou_pred)),
                            np.asarray(gt_mask, dtype=float), alpha, gamma)
    return float(total.value)


def calibration_loss_var(tape: Tape, e: Var, u: Var) -> Var:
    """Four-term exponential calibration loss with stop-gradient routing.

    ``e`` only receives gradient through the terms where ``u`` is frozen and
    vice versa.
    """
    if np.any(e.value < 0) or np.any(e.value > 1) or np.any(u.value < 0) or np.any(u.value > 1):
        raise ValueError("calibration loss needs e and u in [0, 1]")
    e_sg = tape.stop_gradient(e)
    u_sg = tape.stop_gradient(u)
    terms = (e * tape.exp(-u_sg) + e_sg * tape.exp(-u)
             + (1.0 - e) * tape.exp(u_sg) + (1.0 - e_sg) * tape.exp(u))
    return terms.mean()


def calibration_loss(e, u) -> float:
    tape = Tape()
    return float(calibration_loss_var(tape, tape.const(e), tape.const(u)).value)


def soft_error_var(p: Var, target) -> Var:
    """Differentiable |p − M| for M in [0, 1]: p + M − 2pM."""
    return p + target - p * target * 2.0


# --------------------------------------------------------------------------
# schedules


def curriculum(epoch: int, config: TrainConfig):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < config.p1 * config.epochs:
        return 0.0, 0.0
    if epoch < config.p2 * config.epochs:
        return config.beta, 0.0
    return config.beta, (0.0 if config.ue_only else config.gamma)


def phase_of(epoch: int, config: TrainConfig) -> int:
    if epoch < config.p1 * config.epochs:
        return 1
    return 2 if epoch < config.p2 * config.epochs else 3


def grl_scale_schedule(step: int, config: TrainConfig | None = None) -> float:
    return 1.0 if config is None else float(config.grl_scale)


def attacker_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    frac = 0.0 if total_steps <= 1 else min(step / (total_steps - 1), 1.0)
    return config.lr_attack_start + frac * (config.lr_attack_end - config.lr_attack_start)


# --------------------------------------------------------------------------
# graph assembly


@dataclass
class Sample:
    image: np.ndarray
    masks: list  # all object masks of the scene
    target: int  # index of the prompted object
    clicks: list


def samples_from_scenes(scenes, per_scene: int | None = None, offset: int = 0):
    out = []
    for sc in scenes:
        n = len(sc.masks)
        picks = range(n) if per_scene is None else [(offset + j) % n for j in range(min(per_scene, n))]
        for k in picks:
            out.append(Sample(sc.image, sc.masks, k, sc.clicks[k]))
    return out


def _style_regions(sample: Sample, variant: str):
    masks = [np.asarray(m, dtype=float) for m in sample.masks]
    if variant == "single":
        return [masks[sample.target]]
    if variant == "multi_bg":
        bg = 1.0 - np.clip(np.sum(masks, axis=0), 0, 1)
        if bg.sum() > 0:
            return masks + [bg]
    return masks


def build_style_var(tape, sample, feats_val, P, config, grl_scale):
    regions = _style_regions(sample, config.style_variant)
    feats_c = tape.const(feats_val)
    pooled = [tape.masked_mean(feats_c, tape.const(m[None]), axis=(1, 2)) for m in regions]
    raws = [sa.predict_style_residual_var(tape, f, P, None) for f in pooled]
    if config.style_variant == "gcn" and len(regions) > 1:
        pv = np.stack([p.value for p in pooled])
        graph = sa.build_object_graph(regions, pv)
        stacked = tape.concat([r.reshape(1, 9) for r in raws], axis=0)
        pooled_st = tape.concat([p.reshape(1, -1) for p in pooled], axis=0)
        refined = sa.gcn_refine_var(tape, graph, stacked, pooled_st, P)
        raws = [refined[i] for i in range(len(regions))]
    src = [sa.extract_object_style(sample.image, m) for m in regions]
    mus, sigmas = [], []
    for st, r in zip(src, raws):
        mu, sig = sa.bound_style_var(tape, st, tape.grl(r, grl_scale), config.eps_style,
                                     config.eps_style, config.shift_eps)
        mus.append(mu)
        sigmas.append(sig)
    return sa.adain_var(tape, sample.image, regions, src, mus, sigmas)


def build_deform_var(tape, sample, feats_val, P, config, grl_scale):
    eps_px = da.eps_pixels(config.eps_deform, sample.image.shape)
    feats_c = tape.const(feats_val)
    deltas = []
    for m in sample.masks:
        raw = da.predict_offsets_var(tape, feats_c, m, P, grl_scale)
        deltas.append(da.bound_offsets_var(tape, raw, eps_px))
    return da.composite_offsets_var(tape, deltas, sample.masks, eps_px)


@dataclass
class SampleGraph:
    loss: Var
    parts: dict


def sample_graph(tape: Tape, sample: Sample, P: dict, frozen: dict, config: TrainConfig,
                 beta: float, gamma: float, grl_scale: float, rng) -> SampleGraph:
    bw = backbone_weights(frozen)
    prior = GammaPrior(config.prior_alpha, config.prior_beta)
    target = np.asarray(sample.masks[sample.target], dtype=float)
    img = tape.const(sample.image)
    feats = backbone.encode_var(tape, img, bw)
    x = tape.concat([feats, backbone.prompt_maps_var(tape, img, sample.clicks, bw)], axis=0)
    parts = {}

    def head_losses(x_in, tgt, tag):
        hg = bh.build_head(tape, x_in, P)
        logits = bh.sampled_logits_var(tape, hg.lam, hg.kap, *hg.fg, *hg.bg, hg.bias, 0, rng)
        seg, sp = seg_loss_var(tape, logits, hg.iou, tgt, config.focal_alpha, config.focal_gamma)
        kl = bh.kl_total_var(tape, [(hg.lam, hg.kap), hg.fg, hg.bg], prior) * config.kl_element_scale
        parts[f"{tag}seg"] = seg
        parts[f"{tag}kl"] = kl
        for k, v in sp.items():
            parts[f"{tag}{k}"] = v
        return hg, seg + kl * beta

    _, clean = head_losses(x, target, "")
    loss = clean
    if gamma > 0:
        image_adv = img
        if config.style:
            image_adv = build_style_var(tape, sample, feats.value, P, config, grl_scale)
        tgt_adv = tape.const(target)
        if config.deform:
            delta = build_deform_var(tape, sample, feats.value, P, config, grl_scale)
            image_adv = tape.grid_sample(image_adv, delta)
            tgt_adv = tape.clip(tape.grid_sample(tgt_adv.reshape(1, *target.shape), delta)
                                .reshape(*target.shape), 0.0, 1.0)
        feats_adv = backbone.encode_var(tape, image_adv, bw)
        x_adv = tape.concat([feats_adv, backbone.prompt_maps_var(tape, image_adv, sample.clicks, bw)],
                            axis=0)
        hg_adv, adv = head_losses(x_adv, tgt_adv, "adv_")
        if config.lambda_cal > 0:
            # head with frozen parameters: the error channel must not train the head,
            # and with cal_to_head off neither may the uncertainty channel
            Pf = {k: tape.stop_gradient(v) for k, v in P.items() if k.startswith("head.")}
            hg_f = bh.build_head(tape, x_adv, Pf)
            e = soft_error_var(tape.sigmoid(hg_f.m), tgt_adv)
            u = hg_adv.u if config.cal_to_head else hg_f.u
            cal = calibration_loss_var(tape, e, u)
            parts["adv_cal"] = cal
            adv = adv + cal * config.lambda_cal
        parts["adv"] = adv
        loss = loss + adv * gamma
    parts["total"] = loss
    return SampleGraph(loss, parts)


def build_batch_tape(batch, state: TrainState, config: TrainConfig, beta, gamma, grl_scale, rng,
                     check_finite: bool = True):
    tape = Tape(check_finite=check_finite)
    P = {k: tape.param(k, v) for k, v in state.params.items()}
    P.update({k: tape.const(v) for k, v in state.frozen.items() if k.startswith("deform_frozen.")})
    graphs = [sample_graph(tape, s, P, state.frozen, config, beta, gamma, grl_scale, rng) for s in batch]
    total = graphs[0].loss
    for g in graphs[1:]:
        total = total + g.loss
    total = tape.output("loss", total * (1.0 / len(batch)))
    return tape, total, graphs


# --------------------------------------------------------------------------
# optimization


def compute_grads(batch, state, config, epoch, rng, grl_scale=None):
    beta, gamma = curriculum(epoch, config)
    scale = grl_scale_schedule(state.step, config) if grl_scale is None else grl_scale
    bad = sorted(k for k, v in state.params.items() if not np.all(np.isfinite(v)))
    if bad:
        raise TrainingError("non-finite parameters", {k: float("nan") for k in bad})
    rng_state = rng.bit_generator.state
    try:
        tape, total, graphs = build_batch_tape(batch, state, config, beta, gamma, scale, rng)
    except NonFiniteError as exc:
        # replay unchecked with the same draws to report every loss component
        rng.bit_generator.state = rng_state
        with np.errstate(all="ignore"):
            _, _, graphs = build_batch_tape(batch, state, config, beta, gamma, scale, rng,
                                            check_finite=False)
        raise TrainingError(f"non-finite value in forward pass ({exc})", _components(graphs)) from exc
    if not np.isfinite(total.value).all():
        raise TrainingError("non-finite loss", _components(graphs))
    grads = backward(tape, {"loss": np.ones_like(total.value)})
    for k in state.params:
        grads.setdefault(k, np.zeros_like(state.params[k]))
    return float(total.value), grads, _components(graphs)


def _components(graphs):
    comp = {}
    for g in graphs:
        for k, v in g.parts.items():
            comp[k] = comp.get(k, 0.0) + float(np.sum(v.value)) / len(graphs)
    return comp


def adamw_update(state: TrainState, grads: dict, lrs: dict, config: TrainConfig):
    b1, b2 = config.adam_b1, config.adam_b2
    t = state.step + 1
    for k, g in grads.items():
        lr = lrs(k)
        if lr == 0:
            continue
        p = state.params[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1 ** t)
        vhat = state.v[k] / (1 - b2 ** t)
        state.params[k] = p - lr * config.weight_decay * p - lr * mhat / (np.sqrt(vhat) + 1e-8)


def _is_attacker(name):
    return name.startswith(("style.", "gcn.", "deform."))


def train_step(batch, state: TrainState, config: TrainConfig, total_steps: int, rng):
    epoch = state.epoch
    beta, gamma = curriculum(epoch, config)
    loss, grads, comp = compute_grads(batch, state, config, epoch, rng)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}", comp)
    a_lr = attacker_lr(state.step, total_steps, config)
    active = gamma > 0

    def lr_of(name):
        if _is_attacker(name):
            return a_lr if active else 0.0
        return config.lr_head

    adamw_update(state, grads, lr_of, config)
    head_norm = float(np.sqrt(sum(np.sum(g * g) for k, g in grads.items() if not _is_attacker(k))))
    att_norm = float(np.sqrt(sum(np.sum(g * g) for k, g in grads.items() if _is_attacker(k))))
    record = {"epoch": epoch, "step": state.step, "phase": phase_of(epoch, config),
              "beta": beta, "gamma": gamma, "loss": loss,
              **{f"loss_{k}": v for k, v in comp.items()},
              "grad_norm_head": head_norm, "grad_norm_attack": att_norm, "lr_attack": a_lr}
    state.step += 1
    state.log.append(record)
    return state, record


def train(config: TrainConfig, scenes, out_dir=None, state: TrainState | None = None,
          progress=None) -> TrainState:
    """Run the full curriculum; optionally writes a JSONL log and per-epoch checkpoints."""
    if not scenes:
        raise ValueError("dataset is empty")
    state = state or init_state(config)
    rng = np.random.default_rng(config.seed + 7)
    n_samples = len(samples_from_scenes(scenes, config.samples_per_scene))
    steps_per_epoch = -(-n_samples // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    log_fh = None
    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    try:
        prev_phase = None
        for epoch in range(state.epoch, config.epochs):
            state.epoch = epoch
            phase = phase_of(epoch, config)
            if phase != prev_phase:
                log.info("epoch %d: entering phase %d", epoch, phase)
                prev_phase = phase
            samples = samples_from_scenes(scenes, config.samples_per_scene, offset=epoch)
            order = rng.permutation(len(samples))
            t0 = time.time()
            for i in range(0, len(order), config.batch_size):
                batch = [samples[j] for j in order[i:i + config.batch_size]]
                _, rec = train_step(batch, state, config, total_steps, rng)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
            if progress:
                progress(epoch, time.time() - t0, state)
            if out_dir is not None:
                save_checkpoint(state, config, Path(out_dir) / f"ckpt_epoch{epoch:03d}")
        state.epoch = config.epochs
    finally:
        if log_fh:
            log_fh.close()
    return state


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, config: TrainConfig, path):
    from pathlib import Path

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for group, d in (("params", state.params), ("frozen", state.frozen)):
        for k, v in d.items():
            fname = f"{group}__{k}.rgrd"
            save_grid(path / fname, v)
            entries[k] = {"group": group, "file": fname, "shape": list(np.shape(v))}
    manifest = {"epoch": state.epoch, "step": state.step, "config": asdict(config), "tensors": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Return (params, frozen, config dict) from a checkpoint directory."""
    from pathlib import Path

    from .grid import load_grid

    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"checkpoint manifest missing: {mf}")
    manifest = json.loads(mf.read_text())
    params, frozen = {}, {}
    for k, e in manifest["tensors"].items():
        (params if e["group"] == "params" else frozen)[k] = load_grid(path / e["file"])
    return params, frozen, manifest["config"]
