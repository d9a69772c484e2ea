"""Aligning the strictness knob with a severity target.

Calibration batches carry severities; each one yields the smallest
strictness at which its kept set beats the dropped set on tail severity.
The calibrated strictness is then applied to a new batch using scores only.
"""

# %%
import numpy as np

from confgate.alignment import Predicate, align, deploy
from confgate.harness import gen_batches, preset

cfg = preset("severity", J=41, seed=2)
ds = gen_batches(cfg)
records = [b.record() for b in ds]
gate, profiles = align(records[:-1], alpha=0.1, predicate=Predicate("cvar_gap", tail_q=0.9))
S = np.array([p.S for p in profiles])
print(f"tau_hat={gate.tau_hat:.4f}  (K={gate.K_index} of J={gate.J}); S quartiles {np.quantile(S, [.25, .5, .75])}")

# %%
dep = deploy(gate, records[-1].without_severities())
print("kept", dep.kept.size, "of", records[-1].q_scores.size)
scored = deploy(gate, records[-1])
print(f"passed={scored.passed}  dCVaR={scored.delta_cvar:.3f}  dFS={scored.delta_fs:.3f}")

# %%
from confgate.harness import simulate

for r in simulate(cfg, 3, alphas=(0.05, 0.1, 0.2), n_trials=100):
    print(f"{r.method} alpha={r.alpha:.2f} pass={r.pass_rate:.3f} tau={r.mean_threshold:.3f} "
          f"dFS={r.delta_fs:.3f} dCVaR={r.delta_cvar:.3f}")
