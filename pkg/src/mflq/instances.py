"""Random test instances."""

import numpy as np

from .model import ExpDecaySignal, MarkovGenerator, MeanFieldModel, decompose, validate_model
from .model import FeedbackLaw
from .stability import moment_abscissa


def random_generator(rng, m0, low=0.2, high=1.5):
    rates = rng.uniform(low, high, (m0, m0))
    np.fill_diagonal(rates, 0.0)
    np.fill_diagonal(rates, -rates.sum(axis=1))
    return MarkovGenerator(rates)


def _psd(rng, m0, k, scale=1.0):
    L = rng.normal(size=(m0, k, k)) * scale
    return L @ np.swapaxes(L, -1, -2) / k


def random_model(rng, n=2, m=1, m0=2, r_min=0.1, coupling=0.3, forcing=False, margin=0.3):
    """A random model whose zero feedback is a stabilizer.

    Weights are chosen so that both channels have ``R >= r_min I`` and a
    nonnegative Schur complement of the cost, which makes the regularized
    problems finite and the zero-regularization problem solvable.  With
    ``forcing=True`` all signals are drawn with a common random decay rate.
    """
    gen = random_generator(rng, m0)
    A = rng.normal(size=(m0, n, n)) * 0.6
    Abar = rng.normal(size=(m0, n, n)) * 0.3
    B = rng.normal(size=(m0, n, m))
    Bbar = rng.normal(size=(m0, n, m)) * 0.5
    C = rng.normal(size=(m0, n, n)) * coupling
    Cbar = rng.normal(size=(m0, n, n)) * coupling * 0.5
    D = rng.normal(size=(m0, n, m)) * coupling
    Dbar = rng.normal(size=(m0, n, m)) * coupling * 0.5
    R = r_min * np.eye(m) + _psd(rng, m0, m)
    Rbar = _psd(rng, m0, m, 0.5)
    S = rng.normal(size=(m0, m, n)) * 0.2
    Sbar = np.zeros((m0, m, n))
    Q = _psd(rng, m0, n) + np.swapaxes(S, -1, -2) @ np.linalg.solve(R, S) + 0.1 * np.eye(n)
    Qbar = _psd(rng, m0, n, 0.5)
    sig = {}
    if forcing:
        kappa = rng.uniform(0.5, 2.0)
        for name, d in (("b", n), ("sigma", n), ("q", n), ("qbar", n), ("r", m), ("rbar", m)):
            sig[name] = ExpDecaySignal.single(kappa, rng.normal(size=(m0, d)) * 0.5)

    def build(shift):
        eye = np.eye(n)
        return validate_model(MeanFieldModel(
            n=n, m=m, generator=gen, A=A - shift * eye, Abar=Abar, B=B, Bbar=Bbar, C=C, Cbar=Cbar,
            D=D, Dbar=Dbar, Q=Q, Qbar=Qbar, S=S, Sbar=Sbar, R=R, Rbar=Rbar, **sig))

    shift = 0.0
    model = build(shift)
    zero = FeedbackLaw.zero(m0, m, n)
    for _ in range(50):
        a = moment_abscissa(decompose(model), zero)
        if a < -margin:
            return model
        shift += a + margin + 0.1
        model = build(shift)
    raise RuntimeError("could not stabilize the random instance")


def random_law(rng, m0, m, n, scale=1.0):
    return FeedbackLaw(rng.normal(size=(2, m0, m, n)) * scale)
