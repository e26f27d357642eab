"""A drag-dominated crawler: the metric is a drag matrix, not a mass matrix.

The three-link crawler moves slowly through a viscous medium, so force maps
to velocity (not acceleration).  The same objective applies with the drag
matrix as the metric.  Physical consistency here means every drag matrix
evaluated at the training configurations is positive semidefinite.
"""

# %%
import numpy as np

from dualid.experiments import consistency_margin, profile_config, run

res = run(profile_config("drag-low", seed=0))
mech = res.generated.mechanism
print(f"{mech.name}: n = {mech.n}, {res.regression.N} samples, "
      f"{len(res.regression.constraints[0].blocks)} drag-matrix constraints")
print("true drag coefficients:", mech.ground_truth.values)

# %%
for kind, rep in res.reports.items():
    margin = consistency_margin(res.regression, rep.pi_hat.values)
    print(f"{kind:>12}: {np.round(rep.pi_hat.values, 3)}  min eigenvalue {margin:.1e}")

# %% [markdown]
# Prediction quality on the shape coordinates (the two joint angles):

# %%
for kind, v in sorted(res.shape_ncc().items(), key=lambda kv: -kv[1]):
    print(f"{kind:>12}: {v:.5f}")
print("\n".join(c.line() for c in res.checks))
