"""Linear algebra on regime-stacked symmetric matrices.

Every coupled Lyapunov-type equation in this package acts on maps
``M -> S^n`` stored as arrays of shape ``(m0, n, n)``.  They are solved as
one dense linear system over the stacked half-vectorisations.
"""

from functools import lru_cache

import numpy as np

RANK_RTOL = 1e-9


@lru_cache(maxsize=None)
def _sym_maps(n):
    idx = [(i, j) for i in range(n) for j in range(i, n)]
    dup = np.zeros((n * n, len(idx)))
    elim = np.zeros((len(idx), n * n))
    for k, (i, j) in enumerate(idx):
        dup[i * n + j, k] = 1.0
        dup[j * n + i, k] = 1.0
        elim[k, i * n + j] = 1.0
    dup.setflags(write=False)
    elim.setflags(write=False)
    return dup, elim


def vech(Y):
    """Half-vectorise a stack ``(m0, n, n)`` into shape ``(m0 * N,)``."""
    n = Y.shape[-1]
    _, elim = _sym_maps(n)
    return np.einsum("kl,ml->mk", elim, Y.reshape(Y.shape[0], n * n)).ravel()


def unvech(v, m0, n):
    dup, _ = _sym_maps(n)
    full = v.reshape(m0, -1) @ dup.T
    Y = full.reshape(m0, n, n)
    return 0.5 * (Y + np.swapaxes(Y, -1, -2))


def sym_operator(Ahat, rates, Chat=None, adjoint=False):
    """Matrix of a coupled Lyapunov operator on stacked symmetric matrices.

    Forward (second-moment) form::

        Y(i) -> A Y + Y A' + C Y C' + sum_j rates[j, i] Y(j)

    Adjoint (value) form::

        P(i) -> A' P + P A + C' P C + sum_j rates[i, j] P(j)

    Both are expressed in the coordinates of :func:`vech`; the two are
    adjoint in the trace inner product and share a spectrum.
    """
    m0, n, _ = Ahat.shape
    dup, elim = _sym_maps(n)
    N = dup.shape[1]
    eye = np.eye(n)
    op = np.zeros((m0 * N, m0 * N))
    for i in range(m0):
        M = Ahat[i].T if adjoint else Ahat[i]
        full = np.kron(M, eye) + np.kron(eye, M)
        if Chat is not None:
            K = Chat[i].T if adjoint else Chat[i]
            full = full + np.kron(K, K)
        op[i * N:(i + 1) * N, i * N:(i + 1) * N] = elim @ full @ dup
    coupling = rates if adjoint else rates.T
    op += np.kron(coupling, np.eye(N))
    return op


def solve_sym(op, rhs):
    """Solve ``op(X) = rhs`` for a stacked symmetric ``X``.

    Raises ``np.linalg.LinAlgError`` when the operator is numerically
    singular.
    """
    m0, n, _ = rhs.shape
    cond = np.linalg.cond(op)
    if not np.isfinite(cond) or cond > 1e13:
        raise np.linalg.LinAlgError(f"singular coupled Lyapunov operator (cond={cond:.3g})")
    return unvech(np.linalg.solve(op, vech(rhs)), m0, n)


def symmetrize(X):
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def pinv_psd(G, rtol=RANK_RTOL):
    """Moore-Penrose inverse of a batch of symmetric matrices.

    Singular values below ``rtol`` times the largest one are treated as
    zero; an exactly zero matrix maps to zero.
    """
    return np.linalg.pinv(G, rcond=rtol, hermitian=True)


def min_eig(X):
    """Smallest eigenvalue over a batch of symmetric matrices."""
    return float(np.min(np.linalg.eigvalsh(symmetrize(X))))


def sup_norm(X):
    return float(np.max(np.abs(X))) if X.size else 0.0
