"""Cross-query calibration with B-UCP and BB-UCP.

Fifty synthetic queries of twenty responses each. Forty-nine calibrate a
global residual threshold and the fiftieth is held out; the held-out
response is covered when its leave-one-out residual is below the threshold.
"""

# %%
from confgate.harness import GeneratorConfig, simulate

cfg = GeneratorConfig(J=49, I=20, d=32, seed=1)
reports = simulate(cfg, 2, n_trials=150, K=200)

# %%
print(f"{'method':7s} {'alpha':>5} {'coverage':>9} {'target':>7} {'q':>7} {'dFS':>7}")
for r in reports:
    print(f"{r.method:7s} {r.alpha:5.2f} {r.coverage:9.3f} {1 - r.alpha:7.2f} "
          f"{r.mean_threshold:7.4f} {r.delta_fs:7.4f}")

# %%
# the same gate fitted from a file, as a batch job would
from confgate.conformal import calibrate
from confgate.harness import gen_batches

ds = gen_batches(cfg)
gate = calibrate("bbucp", ds.residual_bags(), 0.1, K=200, seed=7)
print(gate)
