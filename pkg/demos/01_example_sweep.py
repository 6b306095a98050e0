"""Regularization sweep on the built-in scalar example.

The regularized problems are all solvable and their solutions have a closed
form; the gains blow up as delta goes to zero while the limit candidate
fails the range condition.
"""

import math

from mflq import classify_solvability, decompose, example_model
from mflq.model import CH2

dm = decompose(example_model())
rep = classify_solvability(dm)

print(f"{'delta':>12} {'P2':>12} {'closed form':>12} {'Theta2':>12}")
for row in rep.sweep.rows:
    d = row.delta
    P2 = row.solution.P[CH2, 0, 0, 0]
    print(f"{d:12.3e} {P2:12.8f} {math.sqrt(d * d + d) - d:12.8f} {row.solution.Theta[CH2, 0, 0, 0]:12.4f}")

print()
print("verdict:       ", rep.verdict)
print("gain blow-up:  ", rep.blowup)
print("range residual:", float(rep.range_residual.max()))
