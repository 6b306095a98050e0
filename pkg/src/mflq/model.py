"""Problem data: the mean-field model, its two-channel decomposition and
feedback reparametrisations.

Switched coefficients are plain arrays whose leading axis is the regime,
e.g. ``A.shape == (m0, n, n)``.  In a :class:`DecomposedModel` the
coefficients carry an extra leading channel axis of length two: index
``CH1`` is the orthogonal-complement channel (state ``X1``, driven by the
Brownian motion) and ``CH2`` the chain-adapted channel (state ``X2``,
the conditional mean).
"""

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

CH1, CH2 = 0, 1

SYM_TOL = 1e-10
ROWSUM_TOL = 1e-12

_STATE_MATS = ("A", "Abar", "C", "Cbar")
_INPUT_MATS = ("B", "Bbar", "D", "Dbar")
_SIGNALS = ("b", "sigma", "q", "qbar", "r", "rbar")


class ModelValidationError(ValueError):
    """Raised by :func:`validate_model`; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MarkovGenerator:
    """Rate matrix of the regime chain (rates in 1/time)."""

    rates: np.ndarray

    @property
    def m0(self):
        return self.rates.shape[0]

    def errors(self):
        lam = np.asarray(self.rates, dtype=float)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1] or lam.shape[0] < 1:
            return [f"generator must be a non-empty square matrix, got shape {lam.shape}"]
        out = []
        if not np.all(np.isfinite(lam)):
            out.append("generator has non-finite entries")
        off = lam - np.diag(np.diag(lam))
        for i, j in zip(*np.nonzero(off < 0)):
            out.append(f"generator entry ({i}, {j}) is negative off the diagonal: {lam[i, j]}")
        for i, row in enumerate(lam):
            s = float(row.sum())
            if abs(s) > ROWSUM_TOL * max(1.0, float(np.abs(row).max())):
                out.append(f"generator row {i}: row sum {s:g} != 0")
        return out


@dataclass(frozen=True, eq=False)
class ExpDecaySignal:
    """A regime-modulated, exponentially decaying vector signal.

    The value at time ``s + tau`` in regime ``i`` is
    ``sum_k exp(-kappa[k] * tau) * values[k, i]``.  A single decay rate is
    the usual case; several rates appear only through superposition.
    """

    kappa: np.ndarray   # (K,)
    values: np.ndarray  # (K, m0, d)

    @classmethod
    def zero(cls, m0, d):
        return cls(_frozen(np.zeros(0)), _frozen(np.zeros((0, m0, d))))

    @classmethod
    def single(cls, kappa, values):
        values = np.asarray(values, dtype=float)
        return cls(_frozen([float(kappa)]), _frozen(values[None]))._normalized()

    @property
    def m0(self):
        return self.values.shape[1]

    @property
    def dim(self):
        return self.values.shape[2]

    @property
    def is_zero(self):
        return self.values.shape[0] == 0

    def _normalized(self):
        keep = [k for k in range(len(self.kappa)) if np.any(self.values[k] != 0)]
        if len(keep) == len(self.kappa):
            return self
        return ExpDecaySignal(_frozen(self.kappa[keep]), _frozen(self.values[keep]))

    def factors(self, tau):
        return np.exp(-self.kappa * tau)

    def __call__(self, tau, regime):
        """Value at elapsed time ``tau``; ``regime`` may be an int or an int array."""
        w = self.factors(tau)
        return np.einsum("k,k...d->...d", w, self.values[:, regime])

    def __add__(self, other):
        if other.m0 != self.m0 or other.dim != self.dim:
            raise ValueError("signal shapes differ")
        kap = list(self.kappa)
        vals = [v.copy() for v in self.values]
        for k, v in zip(other.kappa, other.values):
            if k in kap:
                vals[kap.index(k)] = vals[kap.index(k)] + v
            else:
                kap.append(k)
                vals.append(v.copy())
        vals = np.array(vals) if vals else np.zeros((0, self.m0, self.dim))
        return ExpDecaySignal(_frozen(kap), _frozen(vals))._normalized()

    def scaled(self, c):
        return ExpDecaySignal(self.kappa, _frozen(c * self.values))._normalized()

    def __neg__(self):
        return self.scaled(-1.0)

    def mapped(self, M):
        """Apply a switched linear map ``M`` of shape ``(m0, p, d)`` regime-wise."""
        M = np.asarray(M, dtype=float)
        if M.shape[0] != self.m0 or M.shape[2] != self.dim:
            raise ValueError(f"cannot map a {self.dim}-vector signal by shape {M.shape}")
        vals = np.einsum("ipd,kid->kip", M, self.values)
        return ExpDecaySignal(self.kappa, _frozen(vals))._normalized()


@dataclass(frozen=True, eq=False)
class MeanFieldModel:
    """Full problem data, one array per coefficient, leading axis = regime.

    Instances built directly are unchecked candidates; pass them through
    :func:`validate_model` before use.
    """

    n: int
    m: int
    generator: MarkovGenerator
    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray
    Q: np.ndarray
    Qbar: np.ndarray
    S: np.ndarray
    Sbar: np.ndarray
    R: np.ndarray
    Rbar: np.ndarray
    b: ExpDecaySignal = None
    sigma: ExpDecaySignal = None
    q: ExpDecaySignal = None
    qbar: ExpDecaySignal = None
    r: ExpDecaySignal = None
    rbar: ExpDecaySignal = None

    @property
    def m0(self):
        return self.generator.m0

    @property
    def homogeneous(self):
        return all(getattr(self, s) is None or getattr(self, s).is_zero for s in _SIGNALS)


@dataclass(frozen=True, eq=False)
class DecomposedModel:
    """The two-channel system; coefficient arrays have shape ``(2, m0, ...)``.

    Signals are pairs ``(channel-1 signal, channel-2 signal)``.  ``sigma``
    holds the projections of the diffusion forcing; the full forcing that
    enters the ``X1`` diffusion is their sum.
    """

    n: int
    m: int
    generator: MarkovGenerator
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    b: tuple
    sigma: tuple
    q: tuple
    r: tuple

    @property
    def m0(self):
        return self.generator.m0

    @property
    def rates(self):
        return self.generator.rates

    @property
    def homogeneous(self):
        return all(s.is_zero for name in ("b", "sigma", "q", "r") for s in getattr(self, name))

    def homogeneous_part(self):
        zn = ExpDecaySignal.zero(self.m0, self.n)
        zm = ExpDecaySignal.zero(self.m0, self.m)
        return replace(self, b=(zn, zn), sigma=(zn, zn), q=(zn, zn), r=(zm, zm))


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """Closed-loop strategy ``u_i = Theta[i](alpha) X_i + offset[i](t, alpha)``."""

    Theta: np.ndarray   # (2, m0, m, n)
    offset: tuple = field(default=None)

    def __post_init__(self):
        Th = _frozen(self.Theta)
        if Th.ndim != 4 or Th.shape[0] != 2:
            raise ValueError(f"Theta must have shape (2, m0, m, n), got {Th.shape}")
        object.__setattr__(self, "Theta", Th)
        if self.offset is None:
            _, m0, m, _ = Th.shape
            z = ExpDecaySignal.zero(m0, m)
            object.__setattr__(self, "offset", (z, z))

    @classmethod
    def zero(cls, m0, m, n):
        return cls(np.zeros((2, m0, m, n)))

    @classmethod
    def gains(cls, Theta1, Theta2):
        return cls(np.stack([np.asarray(Theta1, float), np.asarray(Theta2, float)]))

    @property
    def homogeneous(self):
        return all(s.is_zero for s in self.offset)

    def with_offsets(self, off1, off2):
        return FeedbackLaw(self.Theta, (off1, off2))


# ---------------------------------------------------------------------------
# validation

def _check_shape(errors, name, arr, shape):
    if arr is None:
        errors.append(f"{name} is missing")
        return None
    a = np.asarray(arr, dtype=float)
    if a.shape != shape:
        errors.append(f"{name} has shape {a.shape}, expected {shape}")
        return None
    if not np.all(np.isfinite(a)):
        errors.append(f"{name} has non-finite entries")
        return None
    return a


def _check_signal(errors, name, sig, m0, d):
    if sig is None:
        return ExpDecaySignal.zero(m0, d)
    if sig.values.ndim != 3 or sig.values.shape[1:] != (m0, d):
        errors.append(f"signal {name} has shape {sig.values.shape[1:]}, expected {(m0, d)}")
        return None
    if np.any(sig.kappa <= 0) or not np.all(np.isfinite(sig.kappa)):
        errors.append(f"signal {name} needs decay rates > 0, got {list(sig.kappa)}")
        return None
    return ExpDecaySignal(_frozen(sig.kappa), _frozen(sig.values))._normalized()


def validate_model(raw):
    """Check a candidate model and return a validated, read-only copy.

    ``raw`` is a :class:`MeanFieldModel` or a mapping in the JSON layout of
    :func:`model_from_dict`.  Weight matrices that are asymmetric by at most
    ``SYM_TOL`` are symmetrised; larger asymmetry is an error.  All problems
    found are reported together in a :class:`ModelValidationError`.
    """
    if not isinstance(raw, MeanFieldModel):
        raw = model_from_dict(raw, validate=False)
    errors = list(raw.generator.errors())
    n, m = int(raw.n), int(raw.m)
    if n < 1 or m < 1:
        errors.append(f"dimensions must be positive, got n={n}, m={m}")
    if errors:
        raise ModelValidationError(errors)
    m0 = raw.generator.m0
    out = {}
    for name in _STATE_MATS + ("Q", "Qbar"):
        out[name] = _check_shape(errors, name, getattr(raw, name), (m0, n, n))
    for name in _INPUT_MATS:
        out[name] = _check_shape(errors, name, getattr(raw, name), (m0, n, m))
    for name in ("S", "Sbar"):
        out[name] = _check_shape(errors, name, getattr(raw, name), (m0, m, n))
    for name in ("R", "Rbar"):
        out[name] = _check_shape(errors, name, getattr(raw, name), (m0, m, m))
    for name in ("Q", "Qbar", "R", "Rbar"):
        W = out[name]
        if W is None:
            continue
        asym = float(np.max(np.abs(W - np.swapaxes(W, 1, 2))))
        if asym > SYM_TOL:
            errors.append(f"{name} is not symmetric (max asymmetry {asym:.3g})")
        else:
            out[name] = 0.5 * (W + np.swapaxes(W, 1, 2))
    for name in _SIGNALS:
        d = m if name in ("r", "rbar") else n
        out[name] = _check_signal(errors, name, getattr(raw, name), m0, d)
    if errors:
        raise ModelValidationError(errors)
    gen = MarkovGenerator(_frozen(raw.generator.rates))
    mats = {k: _frozen(v) if isinstance(v, np.ndarray) else v for k, v in out.items()}
    return MeanFieldModel(n=n, m=m, generator=gen, **mats)


# ---------------------------------------------------------------------------
# decomposition and feedback shift

def decompose(model):
    """Split a validated model into the orthogonal-complement and
    conditional-mean channels.

    The supported signals are adapted to the chain, so the projection onto
    chain-adapted processes leaves them unchanged: all forcing lands in
    channel 2 and the channel-1 signals are zero.
    """
    stack = lambda a, abar: _frozen(np.stack([a, a + abar]))
    zn = ExpDecaySignal.zero(model.m0, model.n)
    zm = ExpDecaySignal.zero(model.m0, model.m)
    return DecomposedModel(
        n=model.n, m=model.m, generator=model.generator,
        A=stack(model.A, model.Abar), B=stack(model.B, model.Bbar),
        C=stack(model.C, model.Cbar), D=stack(model.D, model.Dbar),
        Q=stack(model.Q, model.Qbar), S=stack(model.S, model.Sbar),
        R=stack(model.R, model.Rbar),
        b=(zn, model.b), sigma=(zn, model.sigma),
        q=(zn, model.q + model.qbar), r=(zm, model.r + model.rbar),
    )


def check_law(dm, law):
    expect = (2, dm.m0, dm.m, dm.n)
    if law.Theta.shape != expect:
        raise ValueError(f"feedback gains have shape {law.Theta.shape}, expected {expect}")
    for sig in law.offset:
        if not sig.is_zero and (sig.m0, sig.dim) != (dm.m0, dm.m):
            raise ValueError("feedback offset shape does not match the model")


def closed_loop(dm, Theta):
    """``(A + B Theta, C + D Theta)`` per channel and regime."""
    return dm.A + dm.B @ Theta, dm.C + dm.D @ Theta


def feedback_shift(dm, hat):
    """Re-express the problem in the control ``v = u - Theta_hat X``.

    Only the gains of ``hat`` are used.  ``B``, ``D``, ``R`` and ``r`` are
    unchanged.
    """
    check_law(dm, hat)
    Th = hat.Theta
    ThT = np.swapaxes(Th, -1, -2)
    A, C = closed_loop(dm, Th)
    Q = dm.Q + ThT @ dm.S + np.swapaxes(dm.S, -1, -2) @ Th + ThT @ dm.R @ Th
    S = dm.S + dm.R @ Th
    q = tuple(dm.q[i] + dm.r[i].mapped(ThT[i]) for i in (CH1, CH2))
    return replace(dm, A=_frozen(A), C=_frozen(C), Q=_frozen(0.5 * (Q + np.swapaxes(Q, -1, -2))),
                   S=_frozen(S), q=q)


# ---------------------------------------------------------------------------
# built-in instance and JSON I/O

def example_model():
    """The scalar single-regime instance with a control acting only on the mean.

    State ``dX = (-X + E[u]) dt + dW`` with cost ``E int |E[X | chain]|^2``.
    The unit diffusion forcing of the original is not square integrable and
    is left out; it only affects channel 1, which carries no cost.
    """
    one = np.ones((1, 1, 1))
    zero = np.zeros((1, 1, 1))
    return validate_model(MeanFieldModel(
        n=1, m=1, generator=MarkovGenerator(np.zeros((1, 1))),
        A=-one, Abar=zero, B=zero, Bbar=one, C=zero, Cbar=zero, D=zero, Dbar=zero,
        Q=zero, Qbar=one, S=zero, Sbar=zero, R=zero, Rbar=zero,
    ))


def _signal_from_json(kappa, vecs, m0, d):
    if vecs is None:
        return ExpDecaySignal.zero(m0, d)
    return ExpDecaySignal.single(kappa, np.asarray(vecs, dtype=float).reshape(m0, d))


def model_from_dict(doc, validate=True):
    """Build a model from the JSON layout (``n, m, m0, lambda, A, Abar, ...``)."""
    doc = dict(doc)
    missing = [k for k in ("n", "m", "lambda") if k not in doc]
    if missing:
        raise ModelValidationError([f"missing field {k}" for k in missing])
    lam = np.asarray(doc["lambda"], dtype=float)
    m0 = int(doc.get("m0", lam.shape[0] if lam.ndim else 1))
    if lam.ndim != 2 or lam.shape != (m0, m0):
        raise ModelValidationError([f"lambda has shape {lam.shape}, expected {(m0, m0)}"])
    mats = {}
    for name in _STATE_MATS + _INPUT_MATS + ("Q", "Qbar", "S", "Sbar", "R", "Rbar"):
        mats[name] = np.asarray(doc[name], dtype=float) if name in doc else None
    sig = doc.get("signals") or {}
    n, m = int(doc["n"]), int(doc["m"])
    if sig:
        kappa = sig.get("kappa")
        if kappa is None:
            raise ModelValidationError(["signals need a decay rate 'kappa'"])
        for name in _SIGNALS:
            d = m if name in ("r", "rbar") else n
            try:
                mats[name] = _signal_from_json(kappa, sig.get(name), m0, d)
            except ValueError as exc:
                raise ModelValidationError([f"signal {name}: {exc}"]) from None
    raw = MeanFieldModel(n=n, m=m, generator=MarkovGenerator(lam), **mats)
    return validate_model(raw) if validate else raw


def model_to_dict(model):
    doc = {"n": model.n, "m": model.m, "m0": model.m0,
           "lambda": model.generator.rates.tolist()}
    for f in fields(MeanFieldModel):
        v = getattr(model, f.name)
        if isinstance(v, np.ndarray):
            doc[f.name] = v.tolist()
    sigs = {name: getattr(model, name) for name in _SIGNALS}
    live = [s for s in sigs.values() if s is not None and not s.is_zero]
    if live:
        kappas = {float(k) for s in live for k in s.kappa}
        if len(kappas) != 1 or any(len(s.kappa) != 1 for s in live):
            raise ValueError("the JSON layout holds a single common decay rate")
        doc["signals"] = {"kappa": kappas.pop()}
        for name, s in sigs.items():
            if s is not None and not s.is_zero:
                doc["signals"][name] = s.values[0].tolist()
    return doc


def stabilizer_from_dict(doc, model):
    """Optional ``stabilizer: {Theta1, Theta2}`` entry of a model document."""
    st = doc.get("stabilizer")
    if not st:
        return None
    shape = (model.m0, model.m, model.n)
    th = [np.asarray(st.get(k, np.zeros(shape)), dtype=float).reshape(shape)
          for k in ("Theta1", "Theta2")]
    return FeedbackLaw.gains(*th)


def read_model(path):
    """Load and validate a model JSON file; returns ``(model, stabilizer_or_None, raw_bytes)``."""
    data = Path(path).read_bytes()
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ModelValidationError([f"invalid JSON: {exc}"]) from None
    model = model_from_dict(doc)
    try:
        hat = stabilizer_from_dict(doc, model)
    except ValueError as exc:
        raise ModelValidationError([f"stabilizer: {exc}"]) from None
    return model, hat, data
