"""Where the alignment guarantee stops holding.

The guarantee needs predicates that stay true once they turn true. The
median-gap predicate with margin delta becomes false again once the kept set
is empty, and for larger margins it often only holds in a thin band near the
largest score. The calibrated strictness then lands where a new batch keeps
nothing, and the pass rate falls well below target.
"""

# %%
from confgate.alignment import Predicate
from confgate.harness import preset, simulate

cfg = preset("severity", seed=5)
for delta in (0.0, 0.005, 0.01, 0.02, 0.05):
    for r in simulate(cfg, 3, alphas=(0.1,), n_trials=100, predicates=[Predicate("median_gap", delta=delta)]):
        m = r.metrics
        print(f"delta={delta:<6} pass={r.pass_rate:.2f} (target 0.90)  tau={r.mean_threshold:.3f}  "
              f"kept={m['kept_frac'].value:.2f}  interior flips/batch={m['interior_violations'].value:.2f}")

# %%
# delta = 0 is trivially true at tau = 0, so its pass rate says nothing.
