"""Exponentially decaying forcing: adjoint, feedforward and value."""

import numpy as np

from mflq import (SimConfig, analytic_value, decompose, estimate_cost, simulate_paths,
                  solve_adjoint, solve_limit_are)
from mflq.instances import random_model
from mflq.model import CH2

rng = np.random.default_rng(3)
dm = decompose(random_model(rng, n=1, m=1, m0=2, forcing=True))
sol = solve_limit_are(dm)
adj = solve_adjoint(dm, sol)

print("decay rate:       ", adj.kappa)
print("adjoint residual: ", adj.residual)
print("offset (regimes): ", adj.offsets[CH2].values[0].ravel())

V = analytic_value(dm, sol, adj, 0, [1.0])
est = estimate_cost(simulate_paths(dm, adj.law(sol), SimConfig(dt=2e-3, n_paths=3000, seed=1)))
print(f"value {V:.5f}, Monte Carlo {est.mean:.5f} +- {est.stderr:.5f}")
