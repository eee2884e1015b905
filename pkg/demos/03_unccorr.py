"""Uncertainty-guided removal of spurious mask fragments.

Run: python demos/03_unccorr.py
"""
import numpy as np

from ruackit.postproc import unc_corr

# %% A confident object plus two detached fragments of different certainty
m = np.zeros((24, 24), bool)
u = np.zeros((24, 24))
m[3:15, 3:15] = True
u[3:15, 3:15] = 0.1
m[18:20, 18:21] = True  # uncertain fragment, under 5% of the foreground
u[18:20, 18:21] = 0.8
m[2:4, 19:21] = True  # confident fragment
u[2:4, 19:21] = 0.2

out, audit = unc_corr(m, u, audit=True)
print(f"threshold {audit['threshold']:.2f} (floor 0.3, or the foreground P95 if higher)")
for c in audit["components"]:
    print(f"component {c['label']}: {c['pixels']:3d} px, mean u {c['mean_unc']:.2f}, kept {c['kept']}")
print("pixels", int(m.sum()), "->", int(out.sum()))

# %% A fragment covering more than 5% of the foreground raises the P95 and protects itself
big = m.copy()
big[18:22, 18:22] = True
u2 = u.copy()
u2[18:22, 18:22] = 0.8
print("threshold with a 16 px fragment:", unc_corr(big, u2, audit=True)[1]["threshold"])

# %% The largest component always survives, however uncertain
print("largest kept at u = 1:", bool(unc_corr(m, np.ones_like(u))[3:15, 3:15].all()))
