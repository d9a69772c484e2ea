"""Interaction energies on a toy batch.

Five responses: four near one direction, one pointing elsewhere. The odd one
out has the smallest energy, i.e. the largest atypical score.
"""

# %%
import numpy as np

from confgate import batch_scores, loo_residuals, rescale_energy, unit_normalize

rng = np.random.default_rng(0)
center = unit_normalize(rng.standard_normal(16))[0]
crowd = unit_normalize(center + 0.15 * rng.standard_normal((4, 16)))
stray = unit_normalize(rng.standard_normal((1, 16)))
V = np.vstack([crowd, stray])

# %%
e, phi = batch_scores(V)
q = rescale_energy(e, len(V))
r = loo_residuals(V)
print(f"{'row':>3} {'energy':>8} {'atypical':>9} {'Q':>7} {'loo':>7}")
for i in range(len(V)):
    print(f"{i:>3} {e[i]:8.4f} {phi[i]:9.4f} {q[i]:7.4f} {r[i]:7.4f}")

# %%
# energies always sit in [1, sqrt(n)]
assert np.all((e >= 1 - 1e-9) & (e <= np.sqrt(len(V)) + 1e-9))
assert phi.argmax() == 4 and r.argmax() == 4
