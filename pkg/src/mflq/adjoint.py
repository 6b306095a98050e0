"""Adjoint equations, feedforward offsets and values for forcing signals of
exponential-decay form.

With the ansatz ``pi(t) = exp(-kappa (t - s)) pibar(alpha(t))`` the
infinite-horizon backward equation reduces, for each decay rate, to one
linear system stacked over regimes.  The channel-1 drivers vanish for
chain-adapted signals, so ``pibar1 = 0`` and the martingale integrand
against the Brownian motion is zero.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from ._linalg import pinv_psd
from .errors import RangeConditionError, ResonantDecayError
from .model import CH1, CH2, ExpDecaySignal, FeedbackLaw, closed_loop
from .riccati import TOL_RANGE, gain_terms

RESONANCE_TOL = 1e-8

_T = lambda X: np.swapaxes(X, -1, -2)


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    """Adjoint processes ``pi_i(t) = sum_k exp(-kappa_k tau) pibar_i[k](alpha(t))``.

    ``pibar`` is the pair of channel signals; ``offsets`` the feedforward
    terms ``-(G + delta I)^{-1 or +} w_i``.  ``offsets`` is ``None`` when
    the range condition fails at ``delta = 0``.
    """

    delta: float
    pibar: tuple
    w: tuple
    offsets: tuple
    residual: float
    eta_zero: bool = True

    @property
    def kappa(self):
        return self.pibar[CH2].kappa

    def pi(self, tau, regime, channel=CH2):
        return self.pibar[channel](tau, regime)

    def nu(self, tau, to, current, channel=CH2):
        """Jump of ``pi`` when the chain moves from ``current`` to ``to``."""
        sig = self.pibar[channel]
        return sig(tau, to) - sig(tau, current)

    def second_moment(self, tau, start, rates, channel=CH2):
        """``E|pi(s + tau)|^2`` for a chain started in ``start``."""
        sig = self.pibar[channel]
        if sig.is_zero:
            return 0.0
        p = expm(np.asarray(rates) * tau)[start]
        vals = np.einsum("k,kid->id", sig.factors(tau), sig.values)
        return float(p @ np.sum(np.square(vals), axis=-1))

    def law(self, sol):
        if self.offsets is None:
            raise RangeConditionError("no feedforward offset: range condition fails")
        return FeedbackLaw(sol.Theta, self.offsets)

    def as_dict(self):
        def sig(s):
            return {"kappa": s.kappa.tolist(), "values": s.values.tolist()}
        out = {"delta": self.delta, "kappa": self.kappa.tolist(),
               "pibar1": sig(self.pibar[CH1]), "pibar2": sig(self.pibar[CH2]),
               "eta_zero": self.eta_zero, "residual": self.residual}
        if self.offsets is not None:
            out["offset1"] = sig(self.offsets[CH1])
            out["offset2"] = sig(self.offsets[CH2])
        return out


def _drivers(dm, sol):
    """Forcing of each channel's adjoint equation, as signals."""
    P1 = sol.P[CH1]
    _, Chat = closed_loop(dm, sol.Theta)
    out = []
    for i in (CH1, CH2):
        d = (dm.sigma[i].mapped(_T(Chat[i]) @ P1) + dm.b[i].mapped(sol.P[i])
             + dm.q[i] + dm.r[i].mapped(_T(sol.Theta[i])))
        out.append(d)
    return out


def _stacked(dm, Ahat):
    n, m0 = dm.n, dm.m0
    M = np.kron(dm.rates, np.eye(n))
    for k in range(m0):
        M[k * n:(k + 1) * n, k * n:(k + 1) * n] += Ahat[k].T
    return M


def _solve_channel(dm, Ahat, driver):
    if driver.is_zero:
        return ExpDecaySignal.zero(dm.m0, dm.n)
    M = _stacked(dm, Ahat)
    ev = np.linalg.eigvals(M)
    vals = []
    for kap, d in zip(driver.kappa, driver.values):
        if np.min(np.abs(ev - kap)) <= RESONANCE_TOL * max(1.0, kap):
            raise ResonantDecayError(f"resonant decay rate kappa={kap:g}")
        x = np.linalg.solve(M - kap * np.eye(len(M)), -d.reshape(-1))
        vals.append(x.reshape(dm.m0, dm.n))
    return ExpDecaySignal(np.array(driver.kappa), np.array(vals))._normalized()


def drift_residual(dm, sol, adj, tau, regime):
    """Drift identity of the adjoint equation at ``(s + tau, regime)``.

    The drift of the ansatz (time derivative plus jump compensator) is added
    to the driver evaluated directly from the model signals; the result is
    zero for an exact solution.  Returns the residual vectors of both
    channels, shape ``(2, n)``.
    """
    Ahat, Chat = closed_loop(dm, sol.Theta)
    P1 = sol.P[CH1]
    out = []
    for i in (CH1, CH2):
        sig = adj.pibar[i]
        if sig.is_zero:
            own = np.zeros(dm.n)
        else:
            f = sig.factors(tau)
            lam = np.einsum("j,kjd->kd", dm.rates[regime], sig.values)
            own = f @ (lam - sig.kappa[:, None] * sig.values[:, regime])
        pi = sig(tau, regime) if not sig.is_zero else np.zeros(dm.n)
        drive = Ahat[i, regime].T @ pi
        for s, M in ((dm.sigma[i], Chat[i, regime].T @ P1[regime]), (dm.b[i], sol.P[i, regime]),
                     (dm.q[i], np.eye(dm.n)), (dm.r[i], sol.Theta[i, regime].T)):
            if not s.is_zero:
                drive = drive + M @ s(tau, regime)
        out.append(own + drive)
    return np.array(out)


def _weights(dm, sol):
    G, _ = gain_terms(dm, sol.P)
    Gd = G + sol.delta * np.eye(dm.m)
    return G, (pinv_psd(Gd) if sol.delta == 0 else np.linalg.inv(Gd))


def check_range_condition(dm, sol, adj, tol_range=TOL_RANGE):
    """Per channel and regime, whether every decay component of ``w_i`` lies
    in the range of ``R_i + D_i' P1 D_i``.

    Returns ``(ok, residual)``, both of shape ``(2, m0)``.  The time factor
    is scalar, so one check per channel and regime suffices.
    """
    G, _ = _weights(dm, sol)
    proj = np.eye(dm.m) - G @ pinv_psd(G)
    res = np.zeros((2, dm.m0))
    for i in (CH1, CH2):
        w = adj.w[i]
        if w.is_zero:
            continue
        r = np.einsum("iab,kib->kia", proj[i], w.values)
        res[i] = np.max(np.abs(r), axis=(0, 2))
    scale = np.array([[max(1.0, float(np.max(np.abs(w.values)))) if not w.is_zero else 1.0] for w in adj.w])
    return res <= tol_range * scale, res


def solve_adjoint(dm, sol, tol_range=TOL_RANGE):
    """Solve the adjoint equations for the Riccati solution ``sol``.

    Raises
    ------
    ResonantDecayError
        A decay rate is (numerically) an eigenvalue of the stacked
        closed-loop operator.
    """
    Ahat, _ = closed_loop(dm, sol.Theta)
    drivers = _drivers(dm, sol)
    if not drivers[CH1].is_zero:
        raise ValueError("channel-1 forcing is outside the supported signal class")
    pibar = tuple(_solve_channel(dm, Ahat[i], drivers[i]) for i in (CH1, CH2))
    P1 = sol.P[CH1]
    w = tuple(pibar[i].mapped(_T(dm.B[i])) + dm.sigma[i].mapped(_T(dm.D[i]) @ P1) + dm.r[i]
              for i in (CH1, CH2))
    G, K = _weights(dm, sol)
    adj = AdjointSolution(float(sol.delta), pibar, w, None, 0.0, eta_zero=pibar[CH1].is_zero)
    ok, _ = check_range_condition(dm, sol, adj, tol_range)
    offsets = tuple(w[i].mapped(-K[i]) for i in (CH1, CH2)) if (sol.delta > 0 or ok.all()) else None
    rng = np.random.default_rng(0)
    taus = rng.exponential(1.0 / max(1.0, float(np.max(pibar[CH2].kappa, initial=1.0))), 8)
    res = max((float(np.max(np.abs(drift_residual(dm, sol, adj, t, k))))
               for t in taus for k in range(dm.m0)), default=0.0)
    return AdjointSolution(adj.delta, pibar, w, offsets, res, adj.eta_zero)


def optimal_offset(dm, sol, adj):
    """Feedforward offsets ``-(G + delta I)^{-1 or +} w_i`` as signals.

    Raises
    ------
    RangeConditionError
        ``delta = 0`` and some ``w_i`` leaves the range of ``G_i``.
    """
    if adj.offsets is None:
        _, res = check_range_condition(dm, sol, adj)
        raise RangeConditionError(f"offset not in range: |(I - GG+)w| = {np.max(res):.6g}")
    return adj.offsets


def _pair_sum(dm, a, b, f):
    """``sum over decay pairs of f(values_a[k], values_b[l]) / (kappa_k + kappa_l)``
    with regime occupation handled by the resolvent of the generator."""
    tot = np.zeros(dm.m0)
    if a.is_zero or b.is_zero:
        return tot
    for ka, va in zip(a.kappa, a.values):
        for kb, vb in zip(b.kappa, b.values):
            g = f(va, vb)
            tot += np.linalg.solve((ka + kb) * np.eye(dm.m0) - dm.rates, g)
    return tot


def analytic_value(dm, sol, adj, iota, x2):
    """Optimal (or regularized-optimal) cost from a deterministic state.

    For a deterministic start the channel-1 state is zero and

    ``V = <P2 x, x> + 2 <pibar2(iota), x> + E int (<P1 sigma, sigma>
    + 2 <pi2, b2> - <G^{-1 or +} w, w>) dt``

    where the time integrals of products of decaying exponentials are
    evaluated exactly through ``((kappa_a + kappa_b) I - Lambda)^{-1}``.
    ``sigma`` is the total diffusion forcing, which only drives ``X1``.
    """
    x2 = np.asarray(x2, dtype=float)
    if adj.offsets is None and sol.delta == 0:
        raise RangeConditionError("value not attained: range condition fails")
    val = float(x2 @ sol.P[CH2, iota] @ x2)
    if not adj.pibar[CH2].is_zero:
        val += 2.0 * float(adj.pibar[CH2](0.0, iota) @ x2)
    P1 = sol.P[CH1]
    _, K = _weights(dm, sol)
    sigma = dm.sigma[CH1] + dm.sigma[CH2]
    const = _pair_sum(dm, sigma, sigma, lambda a, b: np.einsum("id,ide,ie->i", a, P1, b))
    for i in (CH1, CH2):
        const += 2.0 * _pair_sum(dm, adj.pibar[i], dm.b[i], lambda a, b: np.sum(a * b, axis=-1))
        const -= _pair_sum(dm, adj.w[i], adj.w[i], lambda a, b: np.einsum("id,ide,ie->i", a, K[i], b))
    return val + float(const[iota])
