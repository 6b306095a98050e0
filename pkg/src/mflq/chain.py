"""Regime chain utilities: the generator action, exact path sampling and
the compensated jump-count diagnostic.

Regimes are 0-based indices ``0 .. m0-1`` throughout the package.
"""

import csv
from dataclasses import dataclass

import numpy as np

_BLOCK = 32


def lambda_map(Sigma, rates):
    """``i -> sum_j rates[i, j] Sigma[j]`` for a switched array ``Sigma``."""
    rates = getattr(rates, "rates", rates)
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.shape[0] != rates.shape[0]:
        raise ValueError(f"switched array has {Sigma.shape[0]} regimes, generator has {rates.shape[0]}")
    return np.einsum("ij,j...->i...", rates, Sigma)


def stream(seed, path_id, purpose):
    """Counter-based generator for one path and one purpose.

    The stream depends only on ``(seed, path_id, purpose)``, so paths can be
    generated in any order or in parallel.
    """
    ss = np.random.SeedSequence(seed, spawn_key=(int(path_id), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class ChainPath:
    """A piecewise-constant regime path on ``[jump_times[0], horizon]``."""

    jump_times: np.ndarray  # (J+1,), first entry is the start time
    states: np.ndarray      # (J+1,), regime held from jump_times[k]
    horizon: float

    @property
    def start(self):
        return float(self.jump_times[0])

    def regime_at(self, t):
        """Regime in force at ``t`` (right-continuous)."""
        k = np.searchsorted(self.jump_times, t, side="right") - 1
        return self.states[np.clip(k, 0, None)]

    def occupation(self, m0, T=None):
        """Time spent in each regime up to ``T`` (default: the horizon)."""
        T = self.horizon if T is None else T
        ends = np.minimum(np.append(self.jump_times[1:], self.horizon), T)
        dur = np.clip(ends - self.jump_times, 0.0, None)
        return np.bincount(self.states, weights=dur, minlength=m0)

    def jump_counts(self, m0, T=None):
        T = self.horizon if T is None else T
        counts = np.zeros((m0, m0))
        mask = self.jump_times[1:] <= T
        np.add.at(counts, (self.states[:-1][mask], self.states[1:][mask]), 1.0)
        return counts


def simulate_chain(gen, start, T, seed, path_id=0, s=0.0):
    """Exact event-driven sample of the chain on ``[s, s + T]``.

    Holding times in regime ``i`` are exponential with rate ``-rates[i, i]``;
    the next regime is drawn proportionally to the off-diagonal rates.  An
    absorbing regime is held until the horizon.
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    rates = np.asarray(getattr(gen, "rates", gen), dtype=float)
    m0 = rates.shape[0]
    if not 0 <= start < m0:
        raise ValueError(f"start regime {start} outside 0..{m0 - 1}")
    exit_rate = -np.diag(rates)
    with np.errstate(invalid="ignore", divide="ignore"):
        jump_p = np.where(exit_rate[:, None] > 0, rates / exit_rate[:, None], 0.0)
    np.fill_diagonal(jump_p, 0.0)
    cum = np.cumsum(jump_p, axis=1)

    rng = stream(seed, path_id, 0)
    end = s + T
    times, states = [s], [int(start)]
    t, state = s, int(start)
    hold = draw = np.empty(0)
    k = _BLOCK
    while exit_rate[state] > 0:
        if k == _BLOCK:
            hold = rng.standard_exponential(_BLOCK)
            draw = rng.random(_BLOCK)
            k = 0
        t += hold[k] / exit_rate[state]
        if t >= end:
            break
        row = cum[state]
        # draw * row[-1] < row[-1], so the index lands on a positive-probability regime
        state = min(int(np.searchsorted(row, draw[k] * row[-1], side="right")), m0 - 1)
        k += 1
        times.append(t)
        states.append(state)
    return ChainPath(np.array(times), np.array(states, dtype=int), float(end))


def simulate_chains(gen, start, T, seed, n_paths, s=0.0):
    return [simulate_chain(gen, start, T, seed, k, s) for k in range(n_paths)]


def martingale_residual(paths, gen, T=None):
    """Sample mean and standard error of the compensated jump counts.

    For each ordered pair ``(i, j)``, ``M_ij(T)`` is the number of jumps
    ``i -> j`` minus ``rates[i, j]`` times the occupation time of ``i``.
    Diagonal entries are identically zero.
    """
    rates = np.asarray(getattr(gen, "rates", gen), dtype=float)
    m0 = rates.shape[0]
    off = rates - np.diag(np.diag(rates))
    samples = np.array([p.jump_counts(m0, T) - off * p.occupation(m0, T)[:, None] for p in paths])
    n = len(samples)
    mean = samples.mean(axis=0)
    stderr = samples.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, stderr


def write_paths_csv(paths, fh):
    """Write ``path_id,t,regime`` rows, one per jump (and the start)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "t", "regime"])
    for k, p in enumerate(paths):
        for t, st in zip(p.jump_times, p.states):
            w.writerow([k, repr(float(t)), int(st)])
