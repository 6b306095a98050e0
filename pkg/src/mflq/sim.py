"""Monte Carlo simulation of the two-channel closed loop.

Each path draws an exact chain path, refines the uniform time grid at the
jump times and advances

* ``X2`` (no diffusion) by the exact exponential of its regime-frozen
  linear ODE, with the exponentially decaying forcing carried as extra
  states;
* ``X1`` by Euler-Maruyama, Brownian increments of split steps being
  filled in by Brownian bridges.

All random numbers of path ``k`` come from counter-based streams keyed by
``(seed, k, purpose)``, so ensembles do not depend on threading or on the
number of paths simulated alongside.
"""

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ._linalg import min_eig, sup_norm
from .chain import simulate_chain, stream
from .errors import NotFiniteError, SingularImprovementError
from .model import CH1, CH2, ExpDecaySignal, FeedbackLaw, check_law, closed_loop
from .riccati import are_residual, gain_terms, policy_evaluate
from .stability import moment_abscissa

STEP_RULE = 0.1
_BLOCK = 1024
_CHAIN, _BROWNIAN, _BRIDGE = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``T=None`` sizes the horizon from the closed-loop decay so that the
    neglected second moment is about ``eps_tail``.  The start is the
    deterministic state ``(X1, X2) = (0, x2)`` in regime ``iota`` at time
    ``s``.  ``record_every > 0`` keeps trajectories on every
    ``record_every``-th grid point.
    """

    dt: float = 1e-3
    T: float = None
    n_paths: int = 1000
    seed: int = 0
    s: float = 0.0
    iota: int = 0
    x2: tuple = None
    eps_tail: float = 1e-8
    record_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T is not None and not self.T > 0:
            raise ValueError("T must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Per-path integrals of a simulated ensemble.

    ``cost`` has shape ``(n_paths, 2)`` (one column per channel, without
    regularization); ``u_sq`` holds ``int |u1|^2 + |u2|^2 dt``.
    """

    cost: np.ndarray
    u_sq: np.ndarray
    T: float
    dt: float
    seed: int
    chains: list
    final: tuple
    truncation_bound: float
    record: dict = field(default=None)

    @property
    def n_paths(self):
        return len(self.cost)


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n_paths: int
    truncation_bound: float

    def as_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "n_paths": self.n_paths,
                "truncation_bound": self.truncation_bound}


def _mean_stderr(x):
    x = np.asarray(x, dtype=float)
    n = len(x)
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(x)), se


def auto_horizon(dm, law, x2, eps_tail=1e-8):
    """Horizon after which the second moment has decayed to ``eps_tail``."""
    a = moment_abscissa(dm, law)
    if a >= 0:
        raise ValueError(f"cannot size the horizon of an unstable closed loop (abscissa {a:.3g})")
    rate = -a
    kap = [k for sig in (*dm.b, *dm.sigma, *law.offset) for k in sig.kappa]
    if kap:
        rate = min(rate, 2.0 * min(kap))
    size = max(float(np.dot(x2, x2)), 1.0 if kap else 0.0)
    if size <= eps_tail:
        return 1.0
    return math.log(size / eps_tail) / rate


def _n_steps(T, dt):
    return max(1, int(math.ceil(T / dt - 1e-9)))


def _eval(sig, tau, reg, d):
    """Signal values for per-path times ``tau`` and regimes ``reg``: ``(P, d)``."""
    if sig.is_zero:
        return np.zeros((len(reg), d))
    w = np.exp(-np.multiply.outer(tau, sig.kappa))
    out = w[:, :1] * sig.values[0, reg]
    for k in range(1, len(sig.kappa)):
        out = out + w[:, k:k + 1] * sig.values[k, reg]
    return out


# Small products are accumulated elementwise rather than through BLAS, whose
# kernels may round a row differently depending on its position in the
# batch; this keeps every path bit-identical under any chunking.

def _mv(M, x):
    """``M[p] @ x[p]`` for per-path matrices ``M`` of shape ``(P, a, b)``."""
    out = M[:, :, 0] * x[:, :1]
    for k in range(1, M.shape[2]):
        out = out + M[:, :, k] * x[:, k:k + 1]
    return out


def _apply(M, x):
    out = x[:, :1] * M[:, 0]
    for k in range(1, M.shape[1]):
        out = out + x[:, k:k + 1] * M[:, k]
    return out


def _rmv(M, reg, x):
    """``M[reg[p]] @ x[p]`` for a regime-stacked ``M`` of shape ``(m0, a, b)``."""
    if len(M) == 1:
        return _apply(M[0], x)
    return _mv(M[reg], x)


def _quad(x, M, reg, y):
    return np.sum(x * _rmv(M, reg, y), axis=1)


class _Plant:
    """Regime-indexed closed-loop data shared by all paths."""

    def __init__(self, dm, law, dt):
        self.dm = dm
        self.n, self.m = dm.n, dm.m
        self.Theta = law.Theta
        self.Ahat, self.Chat = closed_loop(dm, law.Theta)
        self.off = law.offset
        # X1 drift forcing, X1 diffusion forcing, X2 forcing
        self.f1 = self.off[CH1].mapped(dm.B[CH1]) + dm.b[CH1]
        self.g = (self.off[CH1].mapped(dm.D[CH1]) + self.off[CH2].mapped(dm.D[CH2])
                  + dm.sigma[CH1] + dm.sigma[CH2])
        f2 = self.off[CH2].mapped(dm.B[CH2]) + dm.b[CH2]
        self.kappa2 = np.asarray(f2.kappa, dtype=float)
        n, K = self.n, len(self.kappa2)
        M = np.zeros((dm.m0, n + K, n + K))
        M[:, :n, :n] = self.Ahat[CH2]
        if K:
            M[:, :n, n:] = np.transpose(f2.values, (1, 2, 0))
            M[:, n:, n:] = -np.diag(self.kappa2)
        self.M = M
        self.E_full = expm(M * dt)

    def controls(self, tau, reg, X1, X2):
        u1 = _rmv(self.Theta[CH1], reg, X1) + _eval(self.off[CH1], tau, reg, self.m)
        u2 = _rmv(self.Theta[CH2], reg, X2) + _eval(self.off[CH2], tau, reg, self.m)
        return u1, u2

    def running(self, tau, reg, X1, X2):
        """Running cost per channel ``(P, 2)`` and ``|u|^2`` ``(P,)``."""
        dm = self.dm
        u1, u2 = self.controls(tau, reg, X1, X2)
        out = np.empty((len(reg), 2))
        for i, X, u in ((CH1, X1, u1), (CH2, X2, u2)):
            out[:, i] = (_quad(X, dm.Q[i], reg, X) + 2.0 * _quad(u, dm.S[i], reg, X)
                         + _quad(u, dm.R[i], reg, u)
                         + 2.0 * np.sum(_eval(dm.q[i], tau, reg, self.n) * X, axis=1)
                         + 2.0 * np.sum(_eval(dm.r[i], tau, reg, self.m) * u, axis=1))
        return out, np.sum(u1 * u1, axis=1) + np.sum(u2 * u2, axis=1)

    def advance(self, tau, h, reg, X1, X2, dW, E=None):
        """One step of per-path length ``h`` from per-path times ``tau``.

        ``E`` holds per-path exponentials for partial steps; by default the
        full-step exponential of each path's regime is used.
        """
        n = self.n
        if E is None:
            X2n = _rmv(self.E_full[:, :n, :n], reg, X2)
            if len(self.kappa2):
                X2n += _rmv(self.E_full[:, :n, n:], reg, np.exp(-np.multiply.outer(tau, self.kappa2)))
        else:
            X2n = _mv(E[:, :n, :n], X2)
            if len(self.kappa2):
                X2n += _mv(E[:, :n, n:], np.exp(-np.multiply.outer(tau, self.kappa2)))
        drift = _rmv(self.Ahat[CH1], reg, X1) + _eval(self.f1, tau, reg, n)
        diff = _rmv(self.Chat[CH1], reg, X1) + _rmv(self.Chat[CH2], reg, X2) + _eval(self.g, tau, reg, n)
        return X1 + drift * h[:, None] + diff * dW[:, None], X2n


def _simulate_chunk(plant, gen, cfg, T, ids, x2):
    dm = plant.dm
    n = dm.n
    dt = cfg.dt
    N = _n_steps(T, dt)
    P = len(ids)
    chains = [simulate_chain(gen, cfg.iota, N * dt, cfg.seed, pid, cfg.s) for pid in ids]
    bm = [stream(cfg.seed, pid, _BROWNIAN) for pid in ids]

    # jumps grouped by the grid step they fall in
    by_step = {}
    for p, ch in enumerate(chains):
        for t, j in zip(ch.jump_times[1:], ch.states[1:]):
            k = min(int((t - cfg.s) / dt), N - 1)
            by_step.setdefault(k, {}).setdefault(p, []).append((t - cfg.s, int(j)))

    X1 = np.zeros((P, n))
    X2 = np.broadcast_to(np.asarray(x2, dtype=float), (P, n)).copy()
    reg = np.full(P, cfg.iota, dtype=int)
    st = _State(X1, X2, reg, *plant.running(np.zeros(P), reg, X1, X2))
    stride = cfg.record_every
    rec = {"t": [], "regime": [], "X1": [], "X2": [], "u1": [], "u2": []} if stride else None

    def keep(tau):
        u1, u2 = plant.controls(np.full(P, tau), st.reg, st.X1, st.X2)
        rec["t"].append(cfg.s + tau)
        for key, val in (("regime", st.reg.copy()), ("X1", st.X1.copy()), ("X2", st.X2.copy()),
                         ("u1", u1), ("u2", u2)):
            rec[key].append(val)

    if rec is not None:
        keep(0.0)
    sqdt = math.sqrt(dt)
    bridges = {}
    for k in range(N):
        if k % _BLOCK == 0:
            width = min(_BLOCK, N - k)
            Z = np.stack([g.standard_normal(width) for g in bm])
        tau_a = k * dt
        dW = sqdt * Z[:, k % _BLOCK]
        jumps = by_step.get(k)
        if jumps:
            jp = np.fromiter(jumps, dtype=int)
            saved = st.snapshot(jp)
        # every path takes one full step; jumping paths are then redone in segments
        st.step_all(plant, tau_a, dt, dW)
        if jumps:
            st.restore(jp, saved)
            _split_step(plant, cfg, ids, tau_a, jumps, dW, st, bridges)
        if rec is not None and (k + 1) % stride == 0:
            keep(tau_a + dt)

    if rec is not None:
        rec = {key: np.array(v) for key, v in rec.items()}
        for key in ("regime", "X1", "X2", "u1", "u2"):
            rec[key] = np.swapaxes(rec[key], 0, 1)
    return st.cost, st.usq, chains, (st.X1, st.X2, st.reg), rec


class _State:
    """Mutable per-path state and running trapezoid sums."""

    def __init__(self, X1, X2, reg, f, u):
        self.X1, self.X2, self.reg = X1, X2, reg
        self.f, self.u = f, u
        self.cost = np.zeros_like(f)
        self.usq = np.zeros_like(u)

    def step(self, plant, idx, tau, h, r, dW, E):
        X1n, X2n = plant.advance(tau, h, r, self.X1[idx], self.X2[idx], dW, E)
        f, u = plant.running(tau + h, r, X1n, X2n)
        self.cost[idx] += 0.5 * h[:, None] * (self.f[idx] + f)
        self.usq[idx] += 0.5 * h * (self.u[idx] + u)
        self.X1[idx], self.X2[idx] = X1n, X2n
        self.f[idx], self.u[idx] = f, u

    def step_all(self, plant, tau, h, dW):
        P = len(self.reg)
        X1n, X2n = plant.advance(np.full(P, tau), np.full(P, h), self.reg, self.X1, self.X2, dW)
        f, u = plant.running(np.full(P, tau + h), self.reg, X1n, X2n)
        self.cost += 0.5 * h * (self.f + f)
        self.usq += 0.5 * h * (self.u + u)
        self.X1, self.X2, self.f, self.u = X1n, X2n, f, u

    def snapshot(self, idx):
        return (self.X1[idx], self.X2[idx], self.f[idx], self.u[idx], self.cost[idx], self.usq[idx])

    def restore(self, idx, saved):
        self.X1[idx], self.X2[idx], self.f[idx], self.u[idx], self.cost[idx], self.usq[idx] = saved

    def switch(self, plant, idx, tau, r):
        """Regime change at ``tau``: the trapezoid restarts in the new regime."""
        self.reg[idx] = r
        self.f[idx], self.u[idx] = plant.running(tau, r, self.X1[idx], self.X2[idx])


def _split_step(plant, cfg, ids, tau_a, jumps, dW, st, bridges):
    """Advance the paths that jump inside a grid step, segment by segment.

    Segments with the same index are advanced together.  The Brownian
    increment of the step is split sequentially by Brownian bridges drawn
    from each path's own bridge stream.
    """
    tau_b = tau_a + cfg.dt
    paths = sorted(jumps)
    cuts = {p: [tau_a] + [t for t, _ in jumps[p]] + [tau_b] for p in paths}
    regs = {p: [int(st.reg[p])] + [s for _, s in jumps[p]] for p in paths}
    w_rem = {p: float(dW[p]) for p in paths}
    for j in range(max(len(v) for v in regs.values())):
        act = np.array([p for p in paths if len(regs[p]) > j])
        t0 = np.array([cuts[p][j] for p in act])
        h = np.array([cuts[p][j + 1] - cuts[p][j] for p in act])
        r = np.array([regs[p][j] for p in act])
        if j > 0:
            st.switch(plant, act, t0, r)
        dWs = np.empty(len(act))
        for a, p in enumerate(act):
            if len(regs[p]) == j + 1:
                dWs[a] = w_rem[p]
                continue
            rem = tau_b - t0[a]
            g = bridges.get(p)
            if g is None:
                g = bridges[p] = stream(cfg.seed, ids[p], _BRIDGE)
            sd = math.sqrt(max(h[a] * (rem - h[a]) / rem, 0.0))
            dWs[a] = h[a] / rem * w_rem[p] + sd * g.standard_normal()
            w_rem[p] -= dWs[a]
        st.step(plant, act, t0, h, r, dWs, expm(plant.M[r] * h[:, None, None]))


def step_size_ok(dm, law, dt):
    """Euler-Maruyama step rule ``max |A1hat| dt <= 0.1`` for the ``X1`` channel."""
    Ahat, _ = closed_loop(dm, law.Theta)
    return max(np.linalg.norm(a, 2) for a in Ahat[CH1]) * dt <= STEP_RULE


def _tail_bound(dm, law, final):
    """Cost neglected beyond the horizon, estimated by the closed-loop cost
    matrices at the final states (homogeneous part)."""
    try:
        P = policy_evaluate(dm, FeedbackLaw(law.Theta))
    except Exception:
        return float("inf")
    X1, X2, reg = final
    v = (np.einsum("pa,pab,pb->p", X1, P[CH1][reg], X1)
         + np.einsum("pa,pab,pb->p", X2, P[CH2][reg], X2))
    return float(abs(np.mean(v)))


def simulate_paths(dm, law, cfg):
    """Simulate ``cfg.n_paths`` closed-loop paths of ``u_i = Theta_i X_i + offset_i``.

    Returns an :class:`Ensemble`.  Results are bit-identical for a fixed
    ``cfg`` regardless of ``cfg.threads``.

    Raises
    ------
    ValueError
        The step size violates the Euler-Maruyama step rule.
    """
    check_law(dm, law)
    x2 = np.ones(dm.n) if cfg.x2 is None else np.asarray(cfg.x2, dtype=float)
    if x2.shape != (dm.n,):
        raise ValueError(f"x2 must have length {dm.n}")
    if not 0 <= cfg.iota < dm.m0:
        raise ValueError(f"regime {cfg.iota} outside 0..{dm.m0 - 1}")
    if not step_size_ok(dm, law, cfg.dt):
        raise ValueError(f"step size rejected: |A1hat| dt exceeds {STEP_RULE}")
    if moment_abscissa(dm, law) >= 0:
        warnings.warn("feedback is not a stabilizer; costs may not converge", RuntimeWarning)
    T = cfg.T if cfg.T is not None else auto_horizon(dm, law, x2, cfg.eps_tail)
    T = _n_steps(T, cfg.dt) * cfg.dt
    plant = _Plant(dm, law, cfg.dt)
    ids = np.arange(cfg.n_paths)
    nchunk = max(1, min(cfg.threads, cfg.n_paths))
    chunks = np.array_split(ids, nchunk)
    run = lambda c: _simulate_chunk(plant, dm.generator, cfg, T, c, x2)
    if nchunk == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(nchunk) as pool:
            parts = list(pool.map(run, chunks))
    cost = np.concatenate([p[0] for p in parts])
    usq = np.concatenate([p[1] for p in parts])
    chains = [c for p in parts for c in p[2]]
    final = tuple(np.concatenate([p[3][k] for p in parts]) for k in range(3))
    rec = None
    if cfg.record_every:
        rec = {"t": parts[0][4]["t"]}
        for key in ("regime", "X1", "X2", "u1", "u2"):
            rec[key] = np.concatenate([p[4][key] for p in parts])
    return Ensemble(cost, usq, T, cfg.dt, cfg.seed, chains, final, _tail_bound(dm, law, final), rec)


def estimate_cost(ens, delta=0.0):
    """Sample mean and standard error of the path costs; ``delta`` adds the
    regularization ``delta int |u|^2``."""
    mean, se = _mean_stderr(ens.cost.sum(axis=1) + delta * ens.u_sq)
    return CostEstimate(mean, se, ens.n_paths, ens.truncation_bound)


@dataclass(frozen=True)
class ProbeResult:
    """Second difference of the cost along one direction.

    ``coefficient`` estimates ``<K2 v, v> + delta |v|^2``; ``v_norm2`` is
    the sample mean of ``int |v|^2``; ``curvature`` is ``coefficient -
    delta * v_norm2``.  Standard errors are over paired paths.
    """

    coefficient: float
    stderr: float
    v_norm2: float
    curvature: float
    eps: float


def convexity_probe(dm, base, directions, eps, cfg, delta=0.0):
    """``[J(u + eps v) - 2 J(u) + J(u - eps v)] / (2 eps^2)`` per direction.

    ``base`` is a feedback law; each direction is a pair of offset signals
    ``(v1, v2)`` added to its offsets.  All three evaluations use the same
    seed, so the second difference is formed path by path.
    """
    def run(sign, v):
        off = tuple(base.offset[i] + v[i].scaled(sign * eps) for i in (CH1, CH2))
        ens = simulate_paths(dm, base.with_offsets(*off), cfg)
        return ens.cost.sum(axis=1) + delta * ens.u_sq, ens.u_sq

    J0, U0 = run(0.0, (ExpDecaySignal.zero(dm.m0, dm.m),) * 2)
    out = []
    for v in directions:
        Jp, Up = run(1.0, v)
        Jm, Um = run(-1.0, v)
        coef, se = _mean_stderr((Jp - 2.0 * J0 + Jm) / (2.0 * eps * eps))
        vn = float(np.mean((Up - 2.0 * U0 + Um) / (2.0 * eps * eps)))
        out.append(ProbeResult(coef, se, vn, coef - delta * vn, eps))
    return out


def _riccati_rhs(dm, P, delta):
    G, _ = gain_terms(dm, P)
    lo = min_eig(G + delta * np.eye(dm.m))
    if lo <= 0:
        raise SingularImprovementError(
            f"R + D'P1D + delta I lost positive definiteness (eigenvalue {lo:.3g})")
    return are_residual(dm, P, delta, pinv=False)


def finite_horizon_oracle(dm, delta, T, dt=None, tol=1e-10, escape=1e10):
    """``(P1(0), P2(0))`` of the finite-horizon Riccati equations with ``P(T) = 0``.

    Classic fourth-order Runge-Kutta backward in time, with step doubling
    for error control (``dt`` is the initial step).

    Raises
    ------
    SingularImprovementError
        ``R + D'P1D + delta I`` stops being positive definite.
    NotFiniteError
        Finite-time escape; the message carries the time of blow-up.
    """
    f = lambda P: _riccati_rhs(dm, P, delta)

    def rk4(P, h):
        k1 = f(P)
        k2 = f(P + 0.5 * h * k1)
        k3 = f(P + 0.5 * h * k2)
        k4 = f(P + h * k3)
        return P + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    P = np.zeros((2, dm.m0, dm.n, dm.n))
    h = min(T, dt if dt is not None else 0.01)
    s = 0.0
    while s < T:
        h = min(h, T - s)
        full = rk4(P, h)
        half = rk4(rk4(P, 0.5 * h), 0.5 * h)
        err = sup_norm(half - full) / 15.0
        scale = tol * max(1.0, sup_norm(half))
        if err <= scale or h < 1e-12:
            P = half + (half - full) / 15.0
            s += h
            if sup_norm(P) > escape:
                raise NotFiniteError(f"finite-time escape at t = {T - s:.6g}")
        h *= min(4.0, max(0.1, 0.9 * (scale / err) ** 0.2)) if err > 0 else 4.0
    return P


def write_trajectories_csv(ens, fh):
    """``path_id,t,regime,X1...,X2...,u1...,u2...`` rows of recorded trajectories."""
    rec = ens.record
    if rec is None:
        raise ValueError("ensemble has no recorded trajectories")
    n, m = rec["X1"].shape[-1], rec["u1"].shape[-1]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "t", "regime"] + [f"X1_{k}" for k in range(n)] + [f"X2_{k}" for k in range(n)]
               + [f"u1_{k}" for k in range(m)] + [f"u2_{k}" for k in range(m)])
    for p in range(rec["X1"].shape[0]):
        for j, t in enumerate(rec["t"]):
            vals = np.concatenate([rec["X1"][p, j], rec["X2"][p, j], rec["u1"][p, j], rec["u2"][p, j]])
            w.writerow([p, repr(float(t)), int(rec["regime"][p, j])] + [repr(float(v)) for v in vals])


def summary(ens, est, cfg):
    return {"mean": est.mean, "stderr": est.stderr, "T": ens.T, "dt": ens.dt,
            "n_paths": ens.n_paths, "seed": cfg.seed, "truncation_bound": est.truncation_bound}
