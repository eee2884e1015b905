"""Deterministic synthetic scenes, parametric domain shifts and click prompting."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .grid import grid_sample_forward

log = logging.getLogger(__name__)

SHIFT_KINDS = ("color_transfer", "blur", "texture_swap", "elastic")
TEXTURES = ("noise", "gradient", "stripe")
SHAPES = ("ellipse", "rect", "polygon")


@dataclass
class SceneSpec:
    H: int = 64
    W: int = 64
    n_objects: int | None = None  # None: 1-3 drawn from the seed
    textures: tuple = TEXTURES
    n_clicks: int = 3
    min_sep: float = 6.0


@dataclass
class Scene:
    image: np.ndarray
    masks: list
    clicks: list  # per object: list of (y, x, label)
    seed: int = 0
    domain: str = "source"

    def content_hash(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.image).tobytes())
        for m in self.masks:
            h.update(np.ascontiguousarray(m, dtype=np.uint8).tobytes())
        h.update(json.dumps(self.clicks).encode())
        return h.hexdigest()


@dataclass
class ShiftSpec:
    kind: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")


# --------------------------------------------------------------------------
# scene generation


def _texture(rng, kind, h, w):
    base = rng.uniform(0.1, 0.9, size=3)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    if kind == "noise":
        n = ndimage.gaussian_filter(rng.normal(0, 1, size=(h, w)), 1.5)
        pat = 0.12 * n / (np.abs(n).max() + 1e-12)
    elif kind == "gradient":
        a = rng.uniform(0, 2 * np.pi)
        pat = 0.15 * (np.cos(a) * yy + np.sin(a) * xx - 0.5)
    elif kind == "stripe":
        a = rng.uniform(0, np.pi)
        freq = rng.uniform(6, 14)
        pat = 0.1 * np.sin(2 * np.pi * freq * (np.cos(a) * yy + np.sin(a) * xx))
    else:
        raise ValueError(f"unknown texture {kind!r}")
    tint = rng.uniform(0.5, 1.0, size=3)
    return np.clip(base[:, None, None] + tint[:, None, None] * pat[None], 0, 1)


def _shape_mask(rng, kind, h, w):
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.08, 0.22) * h, rng.uniform(0.08, 0.22) * w
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    if kind == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "rect":
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    n = int(rng.integers(5, 8))
    ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    rad = rng.uniform(0.6, 1.0, size=n)
    vy = cy + ry * rad * np.sin(ang)
    vx = cx + rx * rad * np.cos(ang)
    return _point_in_polygon(yy, xx, vy, vx)


def _point_in_polygon(yy, xx, vy, vx):
    inside = np.zeros(yy.shape, bool)
    j = len(vy) - 1
    for i in range(len(vy)):
        cond = (vy[i] > yy) != (vy[j] > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = (vx[j] - vx[i]) * (yy - vy[i]) / (vy[j] - vy[i]) + vx[i]
        inside ^= cond & (xx < x_cross)
        j = i
    return inside


def gen_scene(seed: int, spec: SceneSpec = SceneSpec(), max_tries: int = 200) -> Scene:
    h, w = spec.H, spec.W
    if h < 16 or w < 16:
        raise ValueError("H and W must be at least 16")
    rng = np.random.default_rng(seed)
    n_obj = spec.n_objects if spec.n_objects is not None else int(rng.integers(1, 4))
    image = _texture(rng, spec.textures[int(rng.integers(len(spec.textures)))], h, w)
    masks = []
    occupied = np.zeros((h, w), bool)
    tries = 0
    while len(masks) < n_obj:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {n_obj} objects after {max_tries} tries")
        m = _shape_mask(rng, SHAPES[int(rng.integers(len(SHAPES)))], h, w)
        if m.sum() < 0.01 * h * w:
            continue
        # one-pixel gap keeps objects disjoint under 8-connectivity
        if (ndimage.binary_dilation(m) & occupied).any():
            continue
        tex = _texture(rng, spec.textures[int(rng.integers(len(spec.textures)))], h, w)
        image = np.where(m[None], tex, image)
        occupied |= m
        masks.append(m.astype(float))
    clicks = [sample_clicks(m, [o for o in masks if o is not m], spec.n_clicks, spec.min_sep,
                            seed=seed * 7919 + i)
              for i, m in enumerate(masks)]
    return Scene(image, masks, clicks, seed)


# --------------------------------------------------------------------------
# clicks


def sample_clicks(mask, others=(), n: int = 3, min_sep: float = 6.0, seed: int = 0):
    """Deterministic click protocol: positives by boundary-distance and spread, negatives outside.

    With the default n=3 the split is 2 positive + 1 negative; in general
    ``n // 3`` clicks are negative.  ``seed`` is recorded for API symmetry;
    the protocol itself has no random choices.
    """
    m = np.asarray(mask) > 0.5
    if not m.any():
        raise ValueError("mask is empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    n_neg = n // 3
    n_pos = min(n - n_neg, int(m.sum()))  # a tiny object cannot host more distinct clicks
    edt = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1]
    pos_cand = np.argwhere(m)
    first = pos_cand[int(np.argmax(edt[m]))]
    clicks = [(int(first[0]), int(first[1]), 1)]
    sep = float(min_sep)
    busy = np.zeros_like(m)
    for o in others:
        busy |= np.asarray(o) > 0.5
    bg = ~(m | busy)
    neg_cand = np.argwhere(bg)
    while True:
        picked = _pick(clicks, pos_cand, n_pos - 1, sep, 1)
        negs = None if picked is None else _pick_negatives(clicks + picked, neg_cand, m, n_neg, sep)
        if negs is not None:
            break
        if sep < 1e-3:
            raise RuntimeError("cannot place clicks even with separation relaxed")
        log.warning("click separation %.3g infeasible, relaxing to %.3g", sep, sep / 2)
        sep /= 2
    return clicks + picked + negs


def _dist_to(points, cand):
    if not points:
        return np.full(len(cand), np.inf)
    p = np.array([(y, x) for y, x, _ in points], dtype=float)
    return np.sqrt(((cand[:, None, :] - p[None]) ** 2).sum(-1)).min(axis=1)


def _pick(prior, cand, k, sep, label):
    out = []
    for _ in range(k):
        d = _dist_to(prior + out, cand)
        ok = d >= sep
        if not ok.any():
            return None
        best = cand[ok][int(np.argmax(d[ok]))]
        out.append((int(best[0]), int(best[1]), label))
    return out


def _pick_negatives(prior, cand, mask, k, sep):
    """Background pixels whose distance to the object is closest to ``sep``."""
    if k == 0:
        return []
    if len(cand) == 0:
        return None
    to_obj = ndimage.distance_transform_edt(~mask)[cand[:, 0], cand[:, 1]]
    out = []
    for _ in range(k):
        ok = _dist_to(prior + out, cand) >= sep
        if not ok.any():
            return None
        c = cand[ok]
        best = c[int(np.argmin(np.abs(to_obj[ok] - sep)))]
        out.append((int(best[0]), int(best[1]), -1))
    return out


# --------------------------------------------------------------------------
# shifts


def _elastic_field(rng, shape, magnitude):
    h, w = shape
    f = np.stack([ndimage.gaussian_filter(rng.normal(size=(h, w)), 6.0) for _ in range(2)])
    peak = np.abs(f).max()
    return f * (magnitude / peak) if peak > 0 else f


def apply_shift(scene: Scene, shift: ShiftSpec) -> Scene:
    """Return a shifted copy; clicks are re-derived when masks move."""
    if shift.magnitude == 0:
        return Scene(scene.image.copy(), [m.copy() for m in scene.masks],
                     [list(c) for c in scene.clicks], scene.seed, scene.domain)
    rng = np.random.default_rng(shift.seed)
    img, masks = scene.image, scene.masks
    a = float(shift.magnitude)
    if shift.kind == "color_transfer":
        # per-channel affine recolouring of the whole image
        gain = 1.0 + a * rng.uniform(-1, 1, size=3)
        offset = a * rng.uniform(-0.5, 0.5, size=3)
        mean = img.mean(axis=(1, 2), keepdims=True)
        img = np.clip((img - mean) * gain[:, None, None] + mean + offset[:, None, None], 0, 1)
    elif shift.kind == "blur":
        img = np.stack([ndimage.gaussian_filter(c, a) for c in img])
    elif shift.kind == "texture_swap":
        h, w = img.shape[1:]
        img = img.copy()
        regions = list(masks) + [1.0 - np.clip(np.sum(masks, axis=0), 0, 1)]
        for r in regions:
            sel = np.asarray(r) > 0.5
            tex = _texture(rng, TEXTURES[int(rng.integers(len(TEXTURES)))], h, w)
            keep = img[:, sel].mean(axis=1, keepdims=True)
            new = tex[:, sel] - tex[:, sel].mean(axis=1, keepdims=True) + keep
            mix = min(a, 1.0)
            jitter = a * rng.uniform(-0.2, 0.2, size=(3, 1))
            img[:, sel] = np.clip((1 - mix) * img[:, sel] + mix * new + jitter, 0, 1)
    elif shift.kind == "elastic":
        d = _elastic_field(rng, img.shape[1:], a)
        img, _ = grid_sample_forward(img, d, "clamp")
        masks = [(grid_sample_forward(np.asarray(m, float)[None], d, "clamp")[0][0] >= 0.5).astype(float)
                 for m in masks]
        kept = [i for i, m in enumerate(masks) if m.any()]
        masks = [masks[i] for i in kept]
        if not masks:
            raise RuntimeError("elastic shift removed every object")
        clicks = [_reclick(masks, i, scene) for i in range(len(masks))]
        return Scene(img, masks, clicks, scene.seed, scene.domain)
    return Scene(img, [m.copy() for m in masks], [list(c) for c in scene.clicks],
                 scene.seed, scene.domain)


def _reclick(masks, i, scene):
    n = len(scene.clicks[0]) if scene.clicks else 3
    others = [m for j, m in enumerate(masks) if j != i]
    return sample_clicks(masks[i], others, n, 6.0, seed=scene.seed * 7919 + i)


# --------------------------------------------------------------------------
# benchmark


@dataclass
class BenchmarkConfig:
    n_train: int = 64
    n_val: int = 16
    n_ood: int = 32
    H: int = 64
    W: int = 64
    seed: int = 0
    shifts: list = field(default_factory=lambda: [
        ("color_transfer", 0.3), ("color_transfer", 0.6),
        ("texture_swap", 0.5), ("texture_swap", 1.0),
        ("elastic", 1.5), ("elastic", 3.0),
    ])


@dataclass
class Benchmark:
    train: list
    val: list
    domains: dict  # name -> list of Scene
    manifest: dict


def domain_name(kind, magnitude):
    return f"{kind}@{magnitude:g}"


def build_benchmark(config: BenchmarkConfig = BenchmarkConfig()) -> Benchmark:
    spec = SceneSpec(H=config.H, W=config.W)
    base = config.seed * 1_000_003
    train_seeds = [base + i for i in range(config.n_train)]
    val_seeds = [base + 100_000 + i for i in range(config.n_val)]
    train = [gen_scene(s, spec) for s in train_seeds]
    val = [gen_scene(s, spec) for s in val_seeds]
    domains = {}
    dom_manifest = []
    for di, (kind, mag) in enumerate(config.shifts):
        name = domain_name(kind, mag)
        scene_seeds = [base + 200_000 + 1000 * di + i for i in range(config.n_ood)]
        shift_seeds = [base + 500_000 + 1000 * di + i for i in range(config.n_ood)]
        scenes = []
        for ss, hs in zip(scene_seeds, shift_seeds):
            sc = apply_shift(gen_scene(ss, spec), ShiftSpec(kind, mag, hs))
            sc.domain = name
            scenes.append(sc)
        domains[name] = scenes
        dom_manifest.append({"name": name, "kind": kind, "magnitude": mag,
                             "scene_seeds": scene_seeds, "shift_seeds": shift_seeds,
                             "hashes": [s.content_hash() for s in scenes]})
    manifest = {
        "config": {k: v for k, v in asdict(config).items()},
        "train": {"seeds": train_seeds, "hashes": [s.content_hash() for s in train]},
        "val": {"seeds": val_seeds, "hashes": [s.content_hash() for s in val]},
        "domains": dom_manifest,
    }
    return Benchmark(train, val, domains, manifest)


def benchmark_from_manifest(manifest: dict, verify: bool = True) -> Benchmark:
    cfg = dict(manifest["config"])
    cfg["shifts"] = [tuple(s) for s in cfg["shifts"]]
    bench = build_benchmark(BenchmarkConfig(**cfg))
    if verify:
        for key in ("train", "val"):
            if bench.manifest[key]["hashes"] != manifest[key]["hashes"]:
                raise RuntimeError(f"regenerated {key} split does not match manifest hashes")
        for got, want in zip(bench.manifest["domains"], manifest["domains"]):
            if got["hashes"] != want["hashes"]:
                raise RuntimeError(f"regenerated domain {want['name']} does not match manifest")
    return bench
