"""Style and deformation attacks on one synthetic scene, written out as PNGs.

Run: python demos/02_attack_preview.py [out_dir]
The attackers here are untrained, with extra noise on the offsets so the
warp is visible.  After training, `ruackit attack-preview --run RUN` shows
the learned attacks instead.
"""
import sys
from pathlib import Path

import numpy as np

from ruackit import backbone, deform_attack as da, style_attack as sa
from ruackit.grid import save_png
from ruackit.synth_data import gen_scene

out = Path(sys.argv[1] if len(sys.argv) > 1 else "attack_preview")
out.mkdir(parents=True, exist_ok=True)
sc = gen_scene(3)
feats, _ = backbone.features_and_prompts(sc.image, sc.clicks[0], backbone.init_backbone())

# %% Style: each object's color statistics move by a bounded residual, background untouched
style_p = sa.init_style_params(seed=0)
src, adv = [], []
for m in sc.masks:
    s = sa.extract_object_style(sc.image, m)
    r = sa.predict_style_residual(feats[:, np.asarray(m) > 0.5].mean(axis=1), style_p)
    src.append(s)
    adv.append(sa.bound_style(s, r, 0.3, 0.3, 0.3))
    print("mu", np.round(s.mu, 3), "->", np.round(adv[-1].mu, 3))
styled = sa.adain_apply(sc.image, sc.masks, adv, src)

# %% Deformation: per-object offsets, composited, zero mean and inside eps
eps_px = da.eps_pixels(0.15, sc.image.shape)
rng = np.random.default_rng(0)
deform_p = da.init_deform_params(seed=0)
deltas = [da.bound_offsets(da.predict_offsets(feats, m, deform_p) + 2.0 * rng.normal(size=(2,) + m.shape),
                           eps_px).delta for m in sc.masks]
delta = da.composite_offsets(deltas, sc.masks, eps_px)
print(f"max |offset| {np.abs(delta).max():.2f} px (eps {eps_px:.2f}), mean {delta.mean(axis=(1, 2))}")

# %% Image and masks are warped by the same field, so labels stay aligned
warped, masks = da.warp_pair(styled, sc.masks, delta)
save_png(out / "before.png", sc.image)
save_png(out / "styled.png", styled)
save_png(out / "after.png", warped)
save_png(out / "mask_after.png", np.sum(masks, axis=0)[None])
save_png(out / "divergence.png", da.divergence_rgb(delta))
print("wrote", sorted(p.name for p in out.iterdir()))
