"""Weibull evidence, its KL to the Gamma prior, and what the head's uncertainty measures.

Run: python demos/01_weibull_uncertainty.py
"""
import numpy as np

from ruackit import backbone, bayes_head as bh
from ruackit.synth_data import gen_scene
from ruackit.weibull import GammaPrior, WeibullParams, kl_monte_carlo, kl_weibull_gamma, weibull_mean, \
    weibull_sample, weibull_variance

# %% Reparameterized samples reproduce the closed-form moments
rng = np.random.default_rng(0)
print("lam  kappa   mean(closed/sampled)     var(closed/sampled)")
for lam, kap in [(0.5, 0.7), (1.0, 2.0), (2.0, 5.0)]:
    p = WeibullParams(lam, kap)
    w = weibull_sample(p, rng.uniform(1e-300, 1.0, size=200_000))
    print(f"{lam:3.1f}  {kap:4.1f}   {weibull_mean(p):.4f} / {w.mean():.4f}      "
          f"{weibull_variance(p):.4f} / {w.var():.4f}")

# %% The KL term vanishes where the Weibull is the prior's exponential
prior = GammaPrior(1.0, 3.0)
for lam, kap in [(1 / 3, 1.0), (1.0, 2.0), (0.2, 0.8)]:
    p = WeibullParams(lam, kap)
    print(f"KL(W({lam:.3f}, {kap}) || Gamma(1, 3)) = {float(kl_weibull_gamma(p, prior)):.5f}  "
          f"(MC {kl_monte_carlo(p, prior, n=200_000):.5f})")

# %% Uncertainty grows with logit variance and is maximal at a zero mean logit
v = np.logspace(-3, 2, 6)
for m in (0.0, 1.0, 3.0):
    u = bh.uncertainty_analytic(bh.LogitStats(np.full(v.shape, m), v))
    print(f"m = {m:3.1f}: u(v) = " + " ".join(f"{x:.3f}" for x in u))

# %% On a scene: the simplified variance tracks the full one, analytic vs sampled uncertainty
sc = gen_scene(7)
f, pr = backbone.features_and_prompts(sc.image, sc.clicks[0], backbone.init_backbone())
params = bh.init_head_params(seed=1)
px, mk = bh.predict_pixel_posterior(np.concatenate([f, pr]), params), bh.mask_posterior(params)
ls = bh.logits_analytic(px, mk)
print("full vs simplified logit variance, Pearson:",
      round(float(np.corrcoef(bh.full_variance(px, mk).ravel(), ls.v.ravel())[0, 1]), 4))
# an untrained head has logits near 0, where sampling noise dominates; trained heads agree closely
_, u_mc = bh.forward_mc(px, mk, S=100, rng_seed=0)
print("analytic vs MC(100) uncertainty, Pearson:",
      round(float(np.corrcoef(bh.uncertainty_analytic(ls).ravel(), u_mc.ravel())[0, 1]), 4))
