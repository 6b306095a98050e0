"""Solve a random regime-switching instance three ways and simulate it.

The algebraic solution from policy iteration is compared with a long
finite-horizon integration and with a Monte Carlo estimate of the optimal
cost from a deterministic start.
"""

import numpy as np

from mflq import (SimConfig, decompose, estimate_cost, finite_horizon_oracle, simulate_paths,
                  solve_limit_are)
from mflq.instances import random_model
from mflq.model import CH2

rng = np.random.default_rng(3)
dm = decompose(random_model(rng, n=2, m=1, m0=2, margin=1.0))

sol = solve_limit_are(dm)
print("closed-loop abscissa:", sol.certificate.abscissa)
print("ARE residual:        ", sol.residual_norm)

T = 50 / abs(sol.certificate.abscissa)
P_fh = finite_horizon_oracle(dm, 0.0, T)
print(f"oracle gap at T={T:.1f}:", np.max(np.abs(P_fh - sol.P)))

x = np.array([1.0, -0.5])
V = float(x @ sol.P[CH2, 0] @ x)
ens = simulate_paths(dm, sol.law, SimConfig(dt=2e-3, n_paths=4000, x2=tuple(x), eps_tail=1e-6))
est = estimate_cost(ens)
print(f"value {V:.5f}, Monte Carlo {est.mean:.5f} +- {est.stderr:.5f} (T={ens.T:.2f})")
