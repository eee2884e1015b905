"""UE-only vs RUAC on shifted synthetic domains, then MC stability and channel alignment.

Run: python demos/04_directional_experiment.py [--full]
The default is a quick pass (1 seed, 32 training scenes, 12 epochs, a few
minutes on one core).  One short run is noisy; --full runs the 5-seed,
64-scene, 20-epoch setting used by the acceptance suite (about 15 minutes).
"""
import sys

from ruackit import experiment as X
from ruackit.synth_data import BenchmarkConfig

full = "--full" in sys.argv
if full:
    bench, results, summary = X.directional_experiment(seeds=range(5))
else:
    bench, results, summary = X.directional_experiment(
        seeds=range(1), bench_config=BenchmarkConfig(n_train=32, n_val=8, n_ood=8), epochs=12)

# %% Medians over seeds per domain
print(X.format_summary(summary))
print(f"joint PAvPU/AURC wins {summary.joint_wins}/{len(summary.domains) - 1}, "
      f"source J&F gap {summary.source_jf_gap:+.4f}, passed {summary.passed}")

# %% PAvPU against the number of Monte Carlo samples
state = results[0].states["ruac"]
sweep = X.mc_sweep(state, {"source": bench.val, **bench.domains})
for s, vals in sweep.items():
    print(f"S={s:3d} " + " ".join(f"{v:.3f}" for v in vals.values()))
print("spread per domain", {d: round(v, 4) for d, v in X.sweep_spread(sweep).items()})

# %% Do the attacks move decoder features the way real shifts do?
cfg = X.method_configs(0, **({} if full else {"epochs": 12}))["ruac"]
r, norm, aug, ood = X.channel_alignment_experiment(bench, state, cfg, n_source=None if full else 8)
print(f"channel alignment r = {r:.3f} (|augmentation shift| {norm:.4f})")
