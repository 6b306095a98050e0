"""Coupled algebraic Riccati systems of the two-channel problem.

For ``delta > 0`` the regularized system (control weight ``R + delta I``)
is solved by policy iteration started from a stabilizer.  A decreasing
sequence of ``delta`` gives the asymptotically optimal gains; the
``delta = 0`` system with Moore-Penrose inverses and a range condition
decides whether an optimal feedback exists.

Throughout, ``G_i = R_i + D_i' P1 D_i`` and
``H_i = B_i' P_i + D_i' P1 C_i + S_i`` per channel and regime.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from ._linalg import RANK_RTOL, min_eig, pinv_psd, solve_sym, sup_norm, sym_operator, symmetrize
from .chain import lambda_map
from .errors import (LimitFailure, MarginalStabilityError, NotFiniteError, NotStabilizingError,
                     SingularImprovementError, SolverError)
from .model import CH1, CH2, FeedbackLaw, check_law, closed_loop, feedback_shift
from .stability import TOL_ABSCISSA, TOL_PD, StabilityCertificate, is_stabilizer, moment_abscissa

DEFAULT_DELTAS = tuple(4.0 ** -k for k in range(11))
THETA_BLOWUP_FACTOR = 1e3
P_BOUND_FACTOR = 1e3
TOL_RANGE = 1e-8
TOL_RESIDUAL = 1e-8
CAUCHY_TOL = 1e-4

_T = lambda X: np.swapaxes(X, -1, -2)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Solution of the regularized (``delta > 0``) or limit (``delta == 0``) system.

    ``P`` has shape ``(2, m0, n, n)`` and ``Theta`` shape ``(2, m0, m, n)``;
    ``semidef_margin`` is the smallest eigenvalue of ``R_i + D_i' P1 D_i``
    over channels and regimes.
    """

    delta: float
    P: np.ndarray
    Theta: np.ndarray
    residual_norm: float
    certificate: StabilityCertificate
    semidef_margin: float
    iterations: int = 0

    @property
    def law(self):
        return FeedbackLaw(self.Theta)

    def value(self, regime, x2):
        """``<P2(regime) x2, x2>``, the optimal cost from a deterministic state."""
        x2 = np.asarray(x2, dtype=float)
        return float(x2 @ self.P[CH2, regime] @ x2)

    def as_dict(self):
        return {
            "delta": self.delta,
            "P1": self.P[CH1].tolist(), "P2": self.P[CH2].tolist(),
            "Theta1": self.Theta[CH1].tolist(), "Theta2": self.Theta[CH2].tolist(),
            "residual_norm": self.residual_norm,
            "semidef_margin": self.semidef_margin,
            "iterations": self.iterations,
            "certificate": self.certificate.as_dict(),
        }


def gain_terms(dm, P):
    """``(G, H)`` for a candidate ``P``; ``G`` excludes the regularization."""
    P1 = P[CH1]
    G = symmetrize(dm.R + _T(dm.D) @ P1 @ dm.D)
    H = _T(dm.B) @ P + _T(dm.D) @ P1 @ dm.C + dm.S
    return G, H


def _gain_weight(G, delta, pinv):
    eye = np.eye(G.shape[-1])
    Gd = G + delta * eye
    return pinv_psd(Gd) if pinv else np.linalg.inv(Gd)


def are_residual(dm, P, delta=0.0, pinv=None):
    """Left-hand side of the coupled Riccati system at ``P``.

    The inverse of ``G + delta I`` is used for ``delta > 0``; at
    ``delta == 0`` the Moore-Penrose inverse is used unless ``pinv=False``.
    """
    if pinv is None:
        pinv = delta == 0
    G, H = gain_terms(dm, P)
    K = _gain_weight(G, delta, pinv)
    P1 = P[CH1]
    out = (lambda_map(P.swapaxes(0, 1), dm.rates).swapaxes(0, 1)
           + P @ dm.A + _T(dm.A) @ P + _T(dm.C) @ P1 @ dm.C + dm.Q - _T(H) @ K @ H)
    return symmetrize(out)


def shifted_are_residual(dm, P, delta, hat):
    """Riccati residual, written in the original coefficients, of the problem
    regularized in ``v = u - Theta_hat X`` rather than in ``u``.

    This is the plain residual plus the three ``delta``-weighted correction
    terms that the feedback shift produces.
    """
    G, H = gain_terms(dm, P)
    K = _gain_weight(G, delta, pinv=False)
    Th = hat.Theta
    corr = delta * (_T(Th) @ K @ H + _T(H) @ K @ Th + _T(Th) @ G @ K @ Th)
    return symmetrize(are_residual(dm, P, delta, pinv=False) + corr)


def policy_evaluate(dm, law, delta=0.0, check=True):
    """Cost matrices ``(P1, P2)`` of a stabilizing linear feedback.

    Solves the linear coupled Lyapunov equations of the closed loop with
    running weight ``Q + Theta'S + S'Theta + Theta'(R + delta I)Theta``,
    channel 1 first since channel 2 sees ``C2hat' P1 C2hat``.

    Raises
    ------
    NotStabilizingError
        ``law`` is not a stabilizer (checked unless ``check=False``).
    MarginalStabilityError
        The closed-loop operator is singular.
    """
    check_law(dm, law)
    if check:
        a = moment_abscissa(dm, law)
        if a >= -TOL_ABSCISSA:
            raise NotStabilizingError(f"feedback is not a stabilizer (abscissa {a:.3g})")
    Th = law.Theta
    Ahat, Chat = closed_loop(dm, Th)
    Rd = dm.R + delta * np.eye(dm.m)
    W = dm.Q + _T(Th) @ dm.S + _T(dm.S) @ Th + _T(Th) @ Rd @ Th
    try:
        P1 = solve_sym(sym_operator(Ahat[CH1], dm.rates, Chat[CH1], adjoint=True), -W[CH1])
        W2 = W[CH2] + _T(Chat[CH2]) @ P1 @ Chat[CH2]
        P2 = solve_sym(sym_operator(Ahat[CH2], dm.rates, adjoint=True), -W2)
    except np.linalg.LinAlgError as exc:
        raise MarginalStabilityError(str(exc)) from None
    return np.stack([P1, P2])


def _improve(dm, P, delta, pinv):
    G, H = gain_terms(dm, P)
    if pinv:
        return -pinv_psd(G + delta * np.eye(dm.m)) @ H
    Gd = G + delta * np.eye(dm.m)
    lo = min_eig(Gd)
    scale = max(1.0, float(np.max(np.abs(Gd))))
    if abs(lo) <= TOL_PD * scale:
        raise SingularImprovementError(
            f"improvement step singular: R + D'P1D + delta I has eigenvalue {lo:.3g}")
    if lo < 0:
        raise NotFiniteError(
            f"not finite at delta={delta:g}: R + D'P1D + delta I is indefinite (eigenvalue {lo:.3g})")
    return -np.linalg.solve(Gd, H)


def _iterate(dm, delta, law, tol, max_iter, pinv, k_mono=3, p_max=1e10):
    try:
        P = policy_evaluate(dm, law, delta)
    except (NotStabilizingError, MarginalStabilityError) as exc:
        raise NotStabilizingError(f"initial feedback: {exc}") from None
    bad = 0
    for it in range(1, max_iter + 1):
        Theta = _improve(dm, P, delta, pinv)
        try:
            P_new = policy_evaluate(dm, FeedbackLaw(Theta), delta)
        except (NotStabilizingError, MarginalStabilityError) as exc:
            raise NotFiniteError(f"not finite at delta={delta:g}: improved gain lost stability ({exc})") from None
        scale = max(1.0, sup_norm(P_new))
        if scale > p_max:
            raise NotFiniteError(f"not finite at delta={delta:g}: |P| = {scale:.3g} diverges")
        if not pinv:
            bad = bad + 1 if min_eig(P - P_new) < -1e-9 * scale else 0
            if bad > k_mono:
                raise NotFiniteError(f"not finite at delta={delta:g}: policy iteration is not monotone")
        step = sup_norm(P_new - P)
        P = P_new
        if step <= tol * scale:
            return P, it
    raise NotFiniteError(f"not finite at delta={delta:g}: no convergence in {max_iter} iterations")


def _finish(dm, P, delta, iterations, pinv):
    G, H = gain_terms(dm, P)
    Theta = -_gain_weight(G, delta, pinv) @ H
    res = sup_norm(are_residual(dm, P, delta, pinv=pinv))
    cert = is_stabilizer(dm, FeedbackLaw(Theta))
    return RiccatiSolution(float(delta), P, Theta, res, cert, min_eig(G), iterations)


def solve_regularized_are(dm, delta, init=None, tol=1e-12, max_iter=200):
    """Policy iteration for the system with control weight ``R + delta I``.

    ``init`` must be a stabilizer (default: the zero law).  Iteration stops
    when ``max|P_new - P| <= tol * max(1, max|P|)``.  ``delta == 0`` is
    accepted when ``R + D'P1D`` stays invertible.

    Raises
    ------
    NotStabilizingError
        ``init`` is not a stabilizer.
    SingularImprovementError
        ``R + D'P1D + delta I`` is singular.
    NotFiniteError
        The iteration diverges, loses monotonicity, or meets an indefinite
        control weight: evidence the regularized problem is not finite.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    law = init if init is not None else FeedbackLaw.zero(dm.m0, dm.m, dm.n)
    check_law(dm, law)
    P, it = _iterate(dm, delta, FeedbackLaw(law.Theta), tol, max_iter, pinv=False)
    return _finish(dm, P, delta, it, pinv=False)


def solve_shifted(dm, hat, delta, tol=1e-12, max_iter=200):
    """Solve in the coordinates ``v = u - Theta_hat X`` and map back.

    The regularization penalizes ``|v|^2``.  The returned gains are the
    total gains ``Theta_hat + Theta_shifted`` for the original system; at
    ``delta == 0`` they coincide with a direct solve.
    """
    sdm = feedback_shift(dm, hat)
    sol = solve_regularized_are(sdm, delta, tol=tol, max_iter=max_iter)
    Theta = hat.Theta + sol.Theta
    res = sup_norm(shifted_are_residual(dm, sol.P, delta, hat))
    cert = is_stabilizer(dm, FeedbackLaw(Theta))
    return RiccatiSolution(float(delta), sol.P, Theta, res, cert, sol.semidef_margin, sol.iterations)


# ---------------------------------------------------------------------------
# delta sweep

@dataclass(frozen=True, eq=False)
class SweepRow:
    delta: float
    solution: RiccatiSolution = None
    error: str = None
    norm_P: float = float("nan")
    norm_Theta: float = float("nan")
    margin: float = float("nan")
    V_probe: float = float("nan")

    @property
    def ok(self):
        return self.solution is not None


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Table of a ``delta`` sweep plus the derived flags.

    ``blowup`` is set when the gains grow past ``THETA_BLOWUP_FACTOR`` times
    their size at the largest ``delta``, are still growing at the end of
    the sweep, and ``P`` stays bounded.
    """

    rows: list
    probe: tuple
    blowup: bool
    p_bounded: bool
    monotone_violation: float
    value_increase: float
    cauchy_gap: float
    cauchy: bool

    @property
    def solutions(self):
        return [r.solution for r in self.rows if r.ok]

    @property
    def all_ok(self):
        return all(r.ok for r in self.rows)

    @property
    def failures(self):
        return [(r.delta, r.error) for r in self.rows if not r.ok]

    def table(self):
        return [{"delta": r.delta, "normP": r.norm_P, "normTheta": r.norm_Theta,
                 "margin": r.margin, "V_probe": r.V_probe} for r in self.rows]

    def write_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delta", "normP", "normTheta", "margin", "V_probe"])
        for row in self.table():
            w.writerow([repr(float(v)) for v in row.values()])


def _probe(dm, probe):
    if probe is None:
        return 0, np.ones(dm.n)
    regime, x2 = probe
    return int(regime), np.asarray(x2, dtype=float)


def delta_sweep(dm, deltas=DEFAULT_DELTAS, init=None, tol=1e-12, probe=None,
                theta_blowup_factor=THETA_BLOWUP_FACTOR):
    """Solve the regularized system along a strictly decreasing ``deltas``.

    Each solve is warm-started from the previous gain.  Failures are
    recorded per row and the sweep continues from the last good gain.
    ``probe = (regime, x2)`` selects the state at which the value column is
    reported (default: regime 0, the all-ones vector).
    """
    deltas = [float(d) for d in deltas]
    if any(d <= 0 for d in deltas) or any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be positive and strictly decreasing")
    regime, x2 = _probe(dm, probe)
    law = init if init is not None else FeedbackLaw.zero(dm.m0, dm.m, dm.n)
    rows = []
    for d in deltas:
        try:
            sol = solve_regularized_are(dm, d, law, tol)
        except SolverError as exc:
            rows.append(SweepRow(d, error=str(exc)))
            continue
        law = sol.law
        rows.append(SweepRow(d, sol, None, sup_norm(sol.P), sup_norm(sol.Theta),
                             sol.semidef_margin, sol.value(regime, x2)))

    good = [r for r in rows if r.ok]
    mono, vinc = 0.0, 0.0
    for a, b in zip(good, good[1:]):
        mono = max(mono, -min_eig(a.solution.P - b.solution.P))
        vinc = max(vinc, b.V_probe - a.V_probe)
    blowup = p_bounded = cauchy = False
    gap = float("nan")
    if good:
        norms_P = [r.norm_P for r in good]
        p_bounded = max(norms_P) <= P_BOUND_FACTOR * max(1.0, norms_P[0])
        th = [r.norm_Theta for r in good]
        growing = len(th) >= 2 and th[-1] > 1.1 * th[-2]
        blowup = bool(p_bounded and growing and max(th) > theta_blowup_factor * th[0])
    if len(good) >= 2:
        gap = sup_norm(good[-1].solution.P - good[-2].solution.P)
        cauchy = gap <= CAUCHY_TOL * max(1.0, good[-1].norm_P)
    return SweepResult(rows, (regime, x2), blowup, p_bounded, mono, vinc, gap, cauchy)


# ---------------------------------------------------------------------------
# limit system

def range_residual(G, H, rtol=RANK_RTOL):
    """``max |(I - G G^+) H|`` per channel and regime."""
    proj = np.eye(G.shape[-1]) - G @ pinv_psd(G, rtol)
    return np.max(np.abs(proj @ H), axis=(-2, -1))


def solve_limit_are(dm, init=None, tol=1e-12, sweep=None, tol_range=TOL_RANGE,
                    tol_residual=TOL_RESIDUAL, max_iter=200):
    """Solve the ``delta = 0`` system with Moore-Penrose inverses.

    The ``delta`` sweep (run here unless given) supplies the limit of the
    regularized solutions.  Starting from it, policy iteration with
    ``Theta = -G^+ H`` (the minimum-norm gain) is run at ``delta = 0`` to an
    algebraic candidate, which must then satisfy, in order:

    * ``G_i >= 0``;
    * the range condition ``|(I - G G^+) H| <= tol_range``;
    * Riccati residual ``<= tol_residual``;
    * the gain ``-G^+ H`` is a stabilizer.

    Raises
    ------
    LimitFailure
        With ``cause`` one of ``no_regularized_solution``,
        ``gain_not_stabilizing``, ``no_convergence``,
        ``semidefinite_violated``, ``range_condition_violated``,
        ``residual_too_large``.
    """
    if sweep is None:
        sweep = delta_sweep(dm, init=init, tol=tol)
    good = [r for r in sweep.rows if r.ok]
    if not good:
        raise LimitFailure("no_regularized_solution", "every regularized solve failed")
    last = good[-1].solution
    checks = {"sweep_delta": last.delta, "cauchy": sweep.cauchy, "cauchy_gap": sweep.cauchy_gap}

    G, H = gain_terms(dm, last.P)
    start = FeedbackLaw(-pinv_psd(G) @ H)
    if not is_stabilizer(dm, start).is_stable:
        start = last.law
    P = None
    try:
        P, it = _iterate(dm, 0.0, start, tol, max_iter, pinv=True)
    except NotStabilizingError as exc:
        raise LimitFailure("gain_not_stabilizing", str(exc), checks) from None
    except NotFiniteError as exc:
        cause = "gain_not_stabilizing" if "stability" in str(exc) else "no_convergence"
        raise LimitFailure(cause, str(exc), checks) from None

    G, H = gain_terms(dm, P)
    Theta = -pinv_psd(G) @ H
    rr = range_residual(G, H)
    res = sup_norm(are_residual(dm, P, 0.0, pinv=True))
    checks.update(semidef_margin=min_eig(G), range_residual=rr, residual=res,
                  limit_gap=sup_norm(P - last.P))
    cert = is_stabilizer(dm, FeedbackLaw(Theta))
    candidate = RiccatiSolution(0.0, P, Theta, res, cert, min_eig(G), it)
    g_scale = max(1.0, float(np.max(np.abs(G))))
    if checks["semidef_margin"] < -TOL_PD * g_scale:
        raise LimitFailure("semidefinite_violated",
                           f"R + D'P1D has eigenvalue {checks['semidef_margin']:.3g}", checks, candidate)
    h_scale = max(1.0, float(np.max(np.abs(H))))
    if np.max(rr) > tol_range * h_scale:
        raise LimitFailure("range_condition_violated",
                           f"|(I - GG+)H| = {np.max(rr):.6g}", checks, candidate)
    if res > tol_residual * max(1.0, sup_norm(P)):
        raise LimitFailure("residual_too_large", f"residual {res:.3g}", checks, candidate)
    if not cert.is_stable:
        raise LimitFailure("gain_not_stabilizing",
                           f"limit gain has abscissa {cert.abscissa:.3g}", checks, candidate)
    return candidate


# ---------------------------------------------------------------------------
# classification

CLOSED_LOOP_SOLVABLE = "closed_loop_solvable"
FINITE_NOT_SOLVABLE = "finite_not_solvable"
UNDETERMINED = "undetermined"


@dataclass(frozen=True, eq=False)
class SolvabilityReport:
    """Verdict with the evidence behind it."""

    verdict: str
    cause: str
    sweep: SweepResult
    solution: RiccatiSolution = None
    candidate: RiccatiSolution = None
    range_ok: np.ndarray = None
    range_residual: np.ndarray = None
    checks: dict = field(default_factory=dict)

    @property
    def blowup(self):
        return self.sweep.blowup if self.sweep is not None else False

    def as_dict(self):
        out = {"verdict": self.verdict, "cause": self.cause, "blowup": self.blowup}
        if self.range_residual is not None:
            out["range_residual"] = np.asarray(self.range_residual).tolist()
            out["range_ok"] = np.asarray(self.range_ok).tolist()
        if self.sweep is not None:
            out["sweep"] = self.sweep.table()
            out["sweep_failures"] = [{"delta": d, "error": e} for d, e in self.sweep.failures]
        for name in ("solution", "candidate"):
            sol = getattr(self, name)
            if sol is not None:
                out[name] = sol.as_dict()
        out["checks"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                         for k, v in self.checks.items()}
        return out


def classify_solvability(dm, init=None, deltas=DEFAULT_DELTAS, tol=1e-12, probe=None,
                         tol_range=TOL_RANGE):
    """Classify the homogeneous problem as closed-loop solvable, finite but
    not solvable, or undetermined.

    Closed-loop solvability (equivalently open-loop solvability) is
    certified by a successful :func:`solve_limit_are`.  A sweep whose
    solves all succeed with bounded ``P`` but whose gains blow up, or whose
    limit candidate violates the range condition, is finite but not
    solvable.  Failed regularized solves and anything else are reported as
    undetermined.
    """
    law = init if init is not None else FeedbackLaw.zero(dm.m0, dm.m, dm.n)
    cert = is_stabilizer(dm, law)
    if not cert.is_stable:
        return SolvabilityReport(UNDETERMINED, f"initial feedback is {cert.status}", None)
    sweep = delta_sweep(dm, deltas, law, tol, probe)
    if not sweep.all_ok:
        d, err = sweep.failures[0]
        return SolvabilityReport(UNDETERMINED, f"regularized solve failed at delta={d:g}: {err}", sweep)
    try:
        sol = solve_limit_are(dm, law, tol, sweep, tol_range=tol_range)
    except LimitFailure as f:
        rr = f.checks.get("range_residual")
        rok = None if rr is None else rr <= tol_range * max(1.0, 1.0)
        if f.candidate is not None and rr is not None:
            _, H = gain_terms(dm, f.candidate.P)
            rok = rr <= tol_range * max(1.0, float(np.max(np.abs(H))))
        if sweep.p_bounded and (sweep.blowup or f.cause == "range_condition_violated"):
            verdict = FINITE_NOT_SOLVABLE
        else:
            verdict = UNDETERMINED
        return SolvabilityReport(verdict, str(f), sweep, None, f.candidate, rok, rr, f.checks)
    G, H = gain_terms(dm, sol.P)
    rr = range_residual(G, H)
    return SolvabilityReport(CLOSED_LOOP_SOLVABLE, "limit system solved", sweep, sol, sol,
                             np.ones_like(rr, dtype=bool), rr,
                             {"residual": sol.residual_norm, "semidef_margin": sol.semidef_margin})
