import numpy as np
import pytest
from hypothesis import given, strategies as st

from mflq import (ExpDecaySignal, FeedbackLaw, SimConfig, analytic_value, check_range_condition,
                  decompose, estimate_cost, example_model, model_from_dict, model_to_dict,
                  optimal_offset, policy_evaluate, simulate_paths, solve_adjoint, solve_limit_are,
                  solve_regularized_are)
from mflq.adjoint import drift_residual
from mflq.chain import simulate_chains
from mflq.errors import RangeConditionError, ResonantDecayError
from mflq.instances import random_model
from mflq.model import CH1, CH2
from mflq.riccati import RiccatiSolution
from mflq.stability import is_stabilizer


def example_with(signals):
    doc = model_to_dict(example_model())
    doc["signals"] = {"kappa": 1.0, **signals}
    return decompose(model_from_dict(doc))


def fixed_law_solution(dm, law, delta):
    P = policy_evaluate(dm, law, delta)
    return RiccatiSolution(delta, P, law.Theta, 0.0, is_stabilizer(dm, law), 0.0)


def test_homogeneous_gives_zero(example_dm):
    sol = solve_regularized_are(example_dm, 1.0)
    adj = solve_adjoint(example_dm, sol)
    assert adj.pibar[CH1].is_zero and adj.pibar[CH2].is_zero and adj.eta_zero
    assert all(o.is_zero for o in optimal_offset(example_dm, sol, adj))


def test_scalar_adjoint_by_hand():
    dm = example_with({"q": [[1.0]]})
    sol = fixed_law_solution(dm, FeedbackLaw.zero(1, 1, 1), 1.0)
    adj = solve_adjoint(dm, sol)
    # (-kappa + A2hat) pibar + 1 = 0 with A2hat = -1, kappa = 1
    assert np.isclose(adj.pibar[CH2].values[0, 0, 0], 0.5)


def test_scalar_offset_by_hand():
    dm = example_with({"rbar": [[1.0]]})
    sol = fixed_law_solution(dm, FeedbackLaw.zero(1, 1, 1), 1.0)
    adj = solve_adjoint(dm, sol)
    # pibar2 = 0 (no state forcing), w2 = r2 = 1, G + delta = 1
    assert np.isclose(adj.w[CH2].values[0, 0, 0], 1.0)
    assert np.isclose(adj.offsets[CH2].values[0, 0, 0], -1.0)


def test_range_condition_fails_on_example_with_control_forcing():
    dm = example_with({"rbar": [[1.0]]})
    sol = fixed_law_solution(dm, FeedbackLaw.zero(1, 1, 1), 0.0)
    adj = solve_adjoint(dm, sol)
    ok, res = check_range_condition(dm, sol, adj)
    assert not ok[CH2, 0] and ok[CH1, 0]
    with pytest.raises(RangeConditionError):
        optimal_offset(dm, sol, adj)
    with pytest.raises(RangeConditionError):
        analytic_value(dm, sol, adj, 0, [1.0])


def test_range_condition_holds_with_invertible_weight(rng):
    dm = decompose(random_model(rng, 2, 2, 2, forcing=True))
    sol = solve_limit_are(dm)
    adj = solve_adjoint(dm, sol)
    ok, _ = check_range_condition(dm, sol, adj)
    assert ok.all() and adj.offsets is not None


def _forced(seed, m0=2):
    rng = np.random.default_rng(seed)
    dm = decompose(random_model(rng, int(rng.integers(1, 4)), int(rng.integers(1, 3)), m0, forcing=True))
    return rng, dm


@given(st.integers(0, 2**31))
def test_drift_identity(seed):
    rng, dm = _forced(seed)
    sol = solve_limit_are(dm)
    adj = solve_adjoint(dm, sol)
    for _ in range(10):
        tau = rng.uniform(0.0, 5.0)
        k = int(rng.integers(dm.m0))
        assert np.max(np.abs(drift_residual(dm, sol, adj, tau, k))) <= 1e-10
    assert adj.eta_zero and adj.pibar[CH1].is_zero


@given(st.integers(0, 2**31))
def test_superposition(seed):
    rng, dm = _forced(seed)
    sol = solve_limit_are(dm)
    half = dm.__class__(**{**dm.__dict__, "b": tuple(s.scaled(0.5) for s in dm.b),
                            "sigma": tuple(s.scaled(0.5) for s in dm.sigma),
                            "q": tuple(s.scaled(0.5) for s in dm.q), "r": tuple(s.scaled(0.5) for s in dm.r)})
    full, part = solve_adjoint(dm, sol), solve_adjoint(half, sol)
    assert np.allclose(full.pibar[CH2].values, 2 * part.pibar[CH2].values, atol=1e-12)


def test_mixed_decay_rates_superpose(rng):
    dm = decompose(random_model(rng, 2, 1, 2))
    sol = solve_limit_are(dm)
    q1 = ExpDecaySignal.single(1.0, rng.normal(size=(2, 2)))
    q2 = ExpDecaySignal.single(2.5, rng.normal(size=(2, 2)))
    with_q = lambda q: dm.__class__(**{**dm.__dict__, "q": (dm.q[CH1], q)})
    both = solve_adjoint(with_q(q1 + q2), sol)
    a, b = solve_adjoint(with_q(q1), sol), solve_adjoint(with_q(q2), sol)
    for tau in (0.0, 0.4, 3.0):
        assert np.allclose(both.pi(tau, 1), a.pi(tau, 1) + b.pi(tau, 1))
    assert np.max(np.abs(drift_residual(with_q(q1 + q2), sol, both, 0.7, 0))) <= 1e-10


def test_jump_consistency_on_paths(rng):
    rng2, dm = _forced(11, m0=3)
    sol = solve_limit_are(dm)
    adj = solve_adjoint(dm, sol)
    for p in simulate_chains(dm.generator, 0, 5.0, seed=3, n_paths=100):
        for t, prev, new in zip(p.jump_times[1:], p.states[:-1], p.states[1:]):
            jump = adj.pi(t, p.regime_at(t)) - adj.pi(t, p.regime_at(t - 1e-12))
            assert np.allclose(jump, adj.nu(t, new, prev), atol=1e-14)


def test_second_moment_decays(rng):
    rng2, dm = _forced(5)
    sol = solve_limit_are(dm)
    adj = solve_adjoint(dm, sol)
    tau = 0.8
    paths = simulate_chains(dm.generator, 0, tau + 1e-9, seed=8, n_paths=4000)
    samples = np.array([np.sum(adj.pi(tau, p.regime_at(tau)) ** 2) for p in paths])
    exact = adj.second_moment(tau, 0, dm.rates)
    assert abs(samples.mean() - exact) <= 3 * samples.std(ddof=1) / np.sqrt(len(samples)) + 1e-12
    late = [adj.second_moment(t, 0, dm.rates) for t in (5.0, 10.0, 20.0)]
    assert late[0] > late[1] > late[2] and late[2] < 1e-6 * max(exact, 1e-300) + 1e-12


def test_resonant_decay_rate():
    dm = example_with({"q": [[1.0]]})
    law = FeedbackLaw.gains(np.zeros((1, 1, 1)), np.full((1, 1, 1), 2.0))  # A2hat = +1 = kappa
    sol = RiccatiSolution(1.0, np.zeros((2, 1, 1, 1)), law.Theta, 0.0, None, 0.0)
    with pytest.raises(ResonantDecayError):
        solve_adjoint(dm, sol)


@pytest.mark.parametrize("delta,x", [(1.0, 1.0), (0.25, 2.0), (1.0, 0.0)])
def test_homogeneous_example_value(example_dm, delta, x):
    sol = solve_regularized_are(example_dm, delta)
    adj = solve_adjoint(example_dm, sol)
    expect = (np.sqrt(delta * delta + delta) - delta) * x * x
    assert np.isclose(analytic_value(example_dm, sol, adj, 0, [x]), expect, atol=1e-12)


def test_offsets_converge_along_sweep(rng):
    dm = decompose(random_model(rng, 2, 2, 2, forcing=True))
    ref = solve_adjoint(dm, solve_limit_are(dm)).offsets[CH2]
    gaps = []
    for d in (1e-2, 1e-4, 1e-6):
        off = solve_adjoint(dm, solve_regularized_are(dm, d)).offsets[CH2]
        gaps.append(np.max(np.abs(off.values - ref.values)))
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-4


def test_value_against_monte_carlo():
    rng = np.random.default_rng(3)
    dm = decompose(random_model(rng, 1, 1, 2, forcing=True))
    sol = solve_limit_are(dm)
    adj = solve_adjoint(dm, sol)
    V = analytic_value(dm, sol, adj, 0, [1.0])
    est = estimate_cost(simulate_paths(dm, adj.law(sol), SimConfig(dt=2e-3, n_paths=3000, seed=1)))
    assert abs(est.mean - V) <= 3 * est.stderr + 2e-3


def test_json_emission(rng):
    rng2, dm = _forced(2)
    adj = solve_adjoint(dm, solve_limit_are(dm))
    d = adj.as_dict()
    assert {"kappa", "pibar1", "pibar2", "offset1", "offset2", "residual"} <= set(d)
