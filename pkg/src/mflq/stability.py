"""Mean-square stabilizer tests.

Two independent criteria are implemented: the spectral abscissa of the
closed-loop second-moment generator, and existence of a positive definite
solution of the coupled Lyapunov equations with right-hand side ``-I``.
The two must agree away from the marginal band.
"""

from dataclasses import dataclass

import numpy as np

from ._linalg import min_eig, solve_sym, sym_operator, symmetrize
from .chain import lambda_map
from .errors import MarginalStabilityError, NotDissipativeError
from .model import CH1, CH2, check_law, closed_loop

TOL_ABSCISSA = 1e-9
TOL_PD = 1e-10


@dataclass(frozen=True, eq=False)
class StabilityCertificate:
    """Outcome of :func:`is_stabilizer`.

    ``status`` is ``"stable"``, ``"unstable"`` or ``"marginal"``.  For a
    stable law ``lyapunov`` holds the pair ``(P1, P2)`` (shape
    ``(2, m0, n, n)``) and ``dissipation`` the largest eigenvalue of the
    left-hand side of the strict Lyapunov inequality (about ``-1``).
    """

    is_stable: bool
    status: str
    abscissa: float
    lyapunov: np.ndarray = None
    dissipation: float = None

    @property
    def margin(self):
        return -self.abscissa

    def as_dict(self):
        return {"is_stable": self.is_stable, "status": self.status,
                "abscissa": self.abscissa, "margin": self.margin}


def moment_operators(dm, law):
    """Forward generators of ``Y_k(t, i) = E[X_k X_k' 1{alpha(t) = i}]``.

    Returns ``(op1, op2)`` acting on stacked half-vectorised matrices.  The
    ``X2`` block has no diffusion; the ``X1`` block is forced by ``Y2``
    through the channel-2 diffusion, which only adds an off-diagonal block,
    so the full spectrum is the union of the two.
    """
    check_law(dm, law)
    Ahat, Chat = closed_loop(dm, law.Theta)
    op1 = sym_operator(Ahat[CH1], dm.rates, Chat[CH1])
    op2 = sym_operator(Ahat[CH2], dm.rates)
    return op1, op2


def block_abscissae(dm, law):
    op1, op2 = moment_operators(dm, law)
    return (float(np.max(np.linalg.eigvals(op1).real)),
            float(np.max(np.linalg.eigvals(op2).real)))


def moment_abscissa(dm, law):
    """Largest real part of the closed-loop second-moment spectrum (1/time)."""
    return max(block_abscissae(dm, law))


def dissipativity_residual(dm, law, P):
    """Left-hand sides of the strict coupled Lyapunov inequality for ``P = (P1, P2)``."""
    Ahat, Chat = closed_loop(dm, law.Theta)
    AT = np.swapaxes(Ahat, -1, -2)
    CT = np.swapaxes(Chat, -1, -2)
    out = np.empty_like(P)
    for k in (CH1, CH2):
        out[k] = lambda_map(P[k], dm.rates) + AT[k] @ P[k] + P[k] @ Ahat[k] + CT[k] @ P[CH1] @ Chat[k]
    return symmetrize(out)


def dissipativity_certificate(dm, law):
    """Solve the coupled Lyapunov equations with right-hand side ``-I``.

    Channel 1 only involves ``P1`` and is solved first; channel 2 then sees
    ``C2hat' P1 C2hat`` as a known term.  Returns ``(P1, P2)`` stacked as
    ``(2, m0, n, n)``.

    Raises
    ------
    MarginalStabilityError
        The linear system is singular.
    NotDissipativeError
        A solution is not positive definite, so the law is not a stabilizer.
    """
    check_law(dm, law)
    Ahat, Chat = closed_loop(dm, law.Theta)
    m0, n = dm.m0, dm.n
    minus_i = -np.broadcast_to(np.eye(n), (m0, n, n))
    try:
        P1 = solve_sym(sym_operator(Ahat[CH1], dm.rates, Chat[CH1], adjoint=True), minus_i)
        CT2 = np.swapaxes(Chat[CH2], -1, -2)
        P2 = solve_sym(sym_operator(Ahat[CH2], dm.rates, adjoint=True),
                       minus_i - CT2 @ P1 @ Chat[CH2])
    except np.linalg.LinAlgError as exc:
        raise MarginalStabilityError(str(exc)) from None
    for k, P in enumerate((P1, P2), start=1):
        lo = min_eig(P)
        if lo <= TOL_PD:
            raise NotDissipativeError(f"P{k} is not positive definite (min eigenvalue {lo:.3g})")
    return np.stack([P1, P2])


def is_stabilizer(dm, law, tol_abscissa=TOL_ABSCISSA):
    """Decide whether ``law`` is an L2-stabilizer, with a certificate when it is."""
    a = moment_abscissa(dm, law)
    if abs(a) <= tol_abscissa:
        return StabilityCertificate(False, "marginal", a)
    if a > 0:
        return StabilityCertificate(False, "unstable", a)
    try:
        P = dissipativity_certificate(dm, law)
    except (MarginalStabilityError, NotDissipativeError):
        # the abscissa is the primary criterion; a missing certificate is left visible
        return StabilityCertificate(True, "stable", a)
    lhs = dissipativity_residual(dm, law, P)
    return StabilityCertificate(True, "stable", a, P, float(np.max(np.linalg.eigvalsh(lhs))))
