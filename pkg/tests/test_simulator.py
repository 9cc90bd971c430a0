import numpy as np
import pytest

from aptdift import _fallback, kernels
from aptdift.game import GameError, Strategy
from aptdift.simulator import (cumulative, derive_key, estimate, rollout, run_rollouts,
                               step_cap, tables, value_samples, value_samples_batch)
from aptdift.solvers import evaluate_policy, solve_acyclic
from aptdift.synth import chain_game, random_game


def pure(spec, player, **named):
    """Point-mass strategy from ``state name -> action name`` pairs."""
    choice = {}
    for sname, act in named.items():
        s = spec.state(sname)
        names = (spec.attacker_action_names if player == "apt" else spec.defender_action_names)(s)
        choice[s] = names.index(act)
    return Strategy.pure(spec, player, choice)


def random_pair(spec, rng):
    apt, dift = Strategy.uniform(spec, "apt"), Strategy.uniform(spec, "dift")
    for s in spec.decision_states:
        apt.at(spec, s)[:] = rng.dirichlet(np.ones(len(apt.at(spec, s))))
        dift.at(spec, s)[:] = rng.dirichlet(np.ones(len(dift.at(spec, s))))
    return apt, dift


def test_unopposed_walk(chain):
    r = rollout(chain, pure(chain, "apt", v2="v1"), pure(chain, "dift", v2="0"), seed=1)
    assert [chain.names[s] for s in r.states] == ["v0", "v2", "v1"]
    assert (r.T, r.payoff_a, r.payoff_d) == (2, 100.0, 0.0)


def test_drop_walk(chain):
    r = rollout(chain, pure(chain, "apt", v2="phi"), pure(chain, "dift", v2="0"))
    assert chain.names[r.terminal] == "phi"
    assert (r.payoff_a, r.payoff_d) == (0.0, 100.0)


def test_seeded_rollout_is_reproducible(chain):
    apt, dift = Strategy.uniform(chain, "apt"), Strategy.uniform(chain, "dift")
    runs = [rollout(chain, apt, dift, seed=9, index=k) for k in range(20)]
    again = [rollout(chain, apt, dift, seed=9, index=k) for k in range(20)]
    assert [r.states for r in runs] == [r.states for r in again]
    assert len({tuple(r.states) for r in runs}) > 1


def test_scalar_rollout_matches_batch_stream():
    spec = random_game(12, seed=4)
    apt, dift = random_pair(spec, np.random.default_rng(0))
    term, steps = run_rollouts(spec, apt, dift, 0, 50, seed=3)
    for k in range(50):
        r = rollout(spec, apt, dift, seed=3, index=k)
        assert (r.terminal, r.T) == (term[k], steps[k])


def test_invalid_strategy_and_start(chain):
    bad = Strategy.uniform(chain, "apt")
    bad.probs[:] = 0.7
    with pytest.raises(GameError, match="sums to"):
        estimate(chain, bad, Strategy.uniform(chain, "dift"), n=10)
    with pytest.raises(GameError, match="absorbing"):
        estimate(chain, Strategy.uniform(chain, "apt"), Strategy.uniform(chain, "dift"),
                 start=chain.tau_a, n=10)


def test_hidden_parameters_still_simulate():
    spec = chain_game(hidden=True)
    stats = estimate(spec, pure(spec, "apt", v2="v1"), pure(spec, "dift", v2="v1"), n=1000)
    assert stats.n == 1000


def test_chain_equilibrium_estimate(chain):
    stats = estimate(chain, pure(chain, "apt", v2="v1"), pure(chain, "dift", v2="v1"),
                     n=100_000, seed=7)
    assert abs(stats.u_d - 80.0) <= 3 * stats.stderr
    assert stats.u_a + stats.u_d == pytest.approx(100.0, abs=1e-9)
    f = stats.frequencies
    assert f["phi"] + f["tau_A"] + f["tau_B"] + f["D"] == pytest.approx(1.0, abs=1e-15)
    assert stats.u_a == pytest.approx((f["D"] + f["tau_B"]) * 100)


def test_single_rollout_point_mass(chain):
    stats = estimate(chain, Strategy.uniform(chain, "apt"), Strategy.uniform(chain, "dift"), n=1)
    assert sorted(stats.frequencies.values()) == [0.0, 0.0, 0.0, 1.0]


def test_always_drop_no_trap(chain):
    stats = estimate(chain, pure(chain, "apt", v2="phi"), pure(chain, "dift", v2="0"), n=500)
    assert stats.frequencies["phi"] == 1.0 and stats.u_d == 100.0


def test_value_samples_chain(chain):
    V = value_samples(chain, pure(chain, "apt", v2="v1"), pure(chain, "dift", v2="v1"),
                      n=100_000, seed=2)
    se = 100 * np.sqrt(0.8 * 0.2 / 100_000)
    assert abs(V[chain.state("v2")] - 80) <= 3 * se
    assert V[chain.tau_b] == 0 and V[chain.tau_a] == 100 and V[chain.phi] == 100 and V[1] == 0


def test_value_samples_deterministic_game():
    from aptdift.game import DetectionParams, build_game
    g = chain_game().graph
    spec = build_game(g, DetectionParams({"v1": 0.2, "v2": 0.2}, {"v1": 0.1, "v2": 0.1}))
    V = value_samples(spec, pure(spec, "apt", v2="v1"), pure(spec, "dift", v2="0"), n=1)
    assert V[0] == 0.0 and V[2] == 0.0


def test_value_samples_unbiased_on_random_game():
    spec = random_game(10, seed=11)
    apt, dift = random_pair(spec, np.random.default_rng(5))
    exact = evaluate_policy(spec, apt, dift)
    est = value_samples(spec, apt, dift, n=20_000, seed=1)
    se = spec.beta * 0.5 / np.sqrt(20_000)
    assert np.abs(est - exact).max() <= 4.5 * se


def test_constant_sum_and_termination_bound():
    rng = np.random.default_rng(0)
    for k in range(10):
        spec = random_game(int(rng.integers(5, 25)), seed=k)
        apt, dift = random_pair(spec, rng)
        term, steps = run_rollouts(spec, apt, dift, 0, 2000, seed=k)
        assert (term >= 0).all()
        assert steps.max() <= spec.n + 4
        pa = np.where(spec.defender_wins[term], 0.0, spec.beta)
        pd = np.where(spec.defender_wins[term], spec.beta, 0.0)
        assert ((pa + pd) == spec.beta).all()


def test_cyclic_cap_is_counted():
    spec = next(s for s in (random_game(8, seed=k, back_edges=3) for k in range(50))
                if not s.is_acyclic())
    assert step_cap(spec) == 1000 * spec.n_states
    # an attacker that never drops, with no traps, may circle until the cap
    apt = Strategy.uniform(spec, "apt")
    for s in spec.decision_states:
        p = apt.at(spec, s)
        if len(p) > 1:
            p[:] = 0.0
            p[:-1] = 1.0 / (len(p) - 1)
    dift = Strategy.pure(spec, "dift", {})
    stats = estimate(spec, apt, dift, n=2000, seed=0)
    assert stats.capped + round(sum(stats.frequencies.values()) * (stats.n - stats.capped)) == stats.n


def test_threads_do_not_change_results():
    spec = random_game(15, seed=2)
    apt, dift = random_pair(spec, np.random.default_rng(1))
    a = estimate(spec, apt, dift, n=40_000, seed=5, threads=1)
    b = estimate(spec, apt, dift, n=40_000, seed=5, threads=4)
    np.testing.assert_array_equal(a.terminals, b.terminals)
    keys = np.array([derive_key(9, k) for k in range(8)], dtype=np.uint64)
    A = np.tile(cumulative(spec, apt), (8, 1))
    D = np.tile(cumulative(spec, dift), (8, 1))
    np.testing.assert_array_equal(value_samples_batch(spec, A, D, 50, keys, 1),
                                  value_samples_batch(spec, A, D, 50, keys, 4))


def test_backends_agree_exactly():
    try:
        cy = kernels.backend("cython")
    except ImportError:
        pytest.skip("compiled kernels not built")
    py = _fallback
    spec = random_game(14, seed=6, back_edges=2)
    apt, dift = random_pair(spec, np.random.default_rng(2))
    tab = tables(spec)
    a, d = cumulative(spec, apt), cumulative(spec, dift)
    for first in (0, 123):
        r1 = py.rollout_batch(tab, a, d, 0, 77, first, 500, step_cap(spec))
        r2 = cy.rollout_batch(tab, a, d, 0, 77, first, 500, step_cap(spec))
        np.testing.assert_array_equal(r1[0], r2[0])
        np.testing.assert_array_equal(r1[1], r2[1])
    keys = np.array([derive_key(1, k) for k in range(3)], dtype=np.uint64)
    states = np.array(spec.decision_states)
    args = (tab, np.tile(a, (3, 1)), np.tile(d, (3, 1)), states, 20, keys,
            spec.defender_wins.astype(np.uint8), step_cap(spec))
    for x, y in zip(py.value_batch(*args), cy.value_batch(*args)):
        np.testing.assert_array_equal(x, y)


def test_uniforms_in_unit_interval():
    keys = _fallback.stream_keys(derive_key(0), 0, 10_000)
    u = _fallback.uniforms(keys, 3)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01
