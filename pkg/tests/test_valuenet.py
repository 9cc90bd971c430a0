import logging

import numpy as np
import pytest

from aptdift import _fallback, kernels
from aptdift.game import Strategy
from aptdift.solvers import evaluate_policy
from aptdift.synth import chain_game, random_game
from aptdift.valuenet import (Dataset, Encoding, TrainingError, ValueNet, extract_q,
                              generate_dataset, gradient_check, predict, random_strategies, train)


def random_pair(spec, rng):
    A, D, _ = random_strategies(spec, 1, 1.0, rng)
    return Strategy("apt", A[0]), Strategy("dift", D[0])


def test_encoding_dimension_and_round_trip():
    spec = random_game(12, seed=1)
    enc = Encoding(spec)
    expected = sum(len(spec.attacker_actions(s)) for s in spec.decision_states) + \
        sum(len(spec.defender_actions(s)) for s in spec.dift_states)
    assert enc.dim == expected
    rng = np.random.default_rng(0)
    for _ in range(20):
        apt, dift = random_pair(spec, rng)
        a2, d2 = enc.decode(enc.encode(apt, dift))
        np.testing.assert_array_equal(a2.probs, apt.probs)
        np.testing.assert_array_equal(d2.probs, dift.probs)


def test_encoding_is_canonical():
    a, b = random_game(10, seed=3), random_game(10, seed=3)
    assert Encoding(a).describe(a) == Encoding(b).describe(b)
    assert Encoding(a).apt_states[0] == 0  # v0 first in topological order


def test_mix_zero_gives_vertices():
    spec = random_game(9, seed=2)
    _, D, stochastic = random_strategies(spec, 200, 0.0, np.random.default_rng(1))
    assert not stochastic.any()
    assert set(np.unique(D)) <= {0.0, 1.0}


def test_mix_fraction_and_pure_attackers():
    spec = random_game(9, seed=2)
    A, _, stochastic = random_strategies(spec, 5000, 0.4, np.random.default_rng(1))
    assert abs(stochastic.mean() - 0.4) < 0.03
    assert set(np.unique(A)) <= {0.0, 1.0}


def test_dataset_labels_and_round_trip(tmp_path):
    spec = random_game(8, seed=4, hidden=True, beta=30.0)
    data = generate_dataset(spec, 50, rollouts=20, seed=3)
    assert data.X.shape == (50, Encoding(spec).dim) and data.Y.shape == (50, spec.n_states)
    assert data.Y.min() >= 0 and data.Y.max() <= 30.0
    path = tmp_path / "data.bin"
    data.save(path)
    back = Dataset.load(path)
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.Y, data.Y)
    assert back.meta == data.meta
    again = generate_dataset(spec, 50, rollouts=20, seed=3)
    np.testing.assert_array_equal(again.Y, data.Y)


def test_single_sample_label_matches_exact_value():
    hidden = chain_game(hidden=True)
    data = generate_dataset(hidden, 1, rollouts=100_000, mix=0.0, seed=5)
    apt, dift = Encoding(hidden).decode(data.X[0])
    exact = evaluate_policy(chain_game(), apt, dift)
    p = exact[2] / 100
    se = 100 * np.sqrt(max(p * (1 - p), 1e-12) / 100_000)
    assert abs(data.Y[0, 2] - exact[2]) <= 3 * se + 1e-12


def _net(layout, seed=0, beta=1.0):
    return ValueNet.init(layout, beta, seed=seed)


def test_gradient_check_small_nets():
    rng = np.random.default_rng(0)
    for k in range(20):
        layout = [int(rng.integers(2, 7)), *rng.integers(2, 9, size=int(rng.integers(1, 3))),
                  int(rng.integers(1, 5))]
        net = _net(layout, seed=k)
        for b in net.biases:  # zero biases put exact ReLU kinks under the stencil
            b[:] = rng.normal(scale=0.3, size=b.shape)
        X = rng.normal(size=(6, layout[0]))
        Y = rng.normal(size=(6, layout[-1]))
        assert gradient_check(net, X, Y, eps=1e-5) <= 1e-4


def test_training_is_deterministic():
    data = generate_dataset(random_game(7, seed=1), 300, rollouts=10, seed=0)
    n1, r1 = train(data, hidden=(8, 8), epochs=5, seed=4)
    n2, r2 = train(data, hidden=(8, 8), epochs=5, seed=4)
    np.testing.assert_array_equal(n1.params, n2.params)
    assert r1.history == r2.history
    assert r1.n_train == 270 and r1.n_val == 30


def test_zero_learning_rate_keeps_weights():
    data = generate_dataset(random_game(7, seed=1), 100, rollouts=10, seed=0)
    net, _ = train(data, hidden=(8,), epochs=3, lr=0.0, seed=2)
    init = ValueNet.init(net.layout, net.beta, seed=2, dtype=np.float32).astype(np.float64)
    np.testing.assert_array_equal(net.params, init.params)


def test_memorizes_constant_dataset():
    X = np.tile(np.linspace(0, 1, 5), (64, 1))
    Y = np.full((64, 3), 0.3)
    net, report = train(Dataset(X, Y, {"beta": 1.0}), hidden=(16,), epochs=200, lr=0.05, seed=0)
    assert report.train_loss < 1e-8
    assert report.mu_val < 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch():
    X = np.random.default_rng(0).normal(size=(64, 4)) * 1e3
    Y = np.ones((64, 2))
    with pytest.raises(TrainingError, match=r"epoch \d+"):
        train(Dataset(X, Y, {"beta": 1.0}), hidden=(8,), epochs=5, lr=1e6, seed=0)


def test_validation_warning(caplog):
    data = generate_dataset(random_game(7, seed=1), 60, rollouts=5, seed=0)
    with caplog.at_level(logging.WARNING):
        train(data, hidden=(4,), epochs=1, lr=1e-4, seed=0)
    assert "exceeds" in caplog.text


def test_predict_clamps_and_checks_dimension():
    net = _net([3, 4, 2], beta=10.0)
    net.weights[-1][:] = 0.0
    net.biases[-1][:] = [-0.3, 2.0]  # raw -3 and 20 in value units
    out = net.predict_encoded(np.zeros((1, 3)))
    np.testing.assert_array_equal(out, [[0.0, 10.0]])
    with pytest.raises(ValueError, match="dimension"):
        net.predict_encoded(np.zeros((1, 4)))


def test_serialization_round_trip():
    net = _net([5, 7, 3], seed=3, beta=50.0)
    back = ValueNet.from_json(net.to_json())
    np.testing.assert_array_equal(back.params, net.params)
    assert back.layout == net.layout and back.beta == 50.0
    doc = net.to_json()
    doc["version"] = 99
    with pytest.raises(ValueError, match="version"):
        ValueNet.from_json(doc)


def test_extract_q_is_prediction_of_modified_pair():
    spec = random_game(9, seed=7)
    enc = Encoding(spec)
    net = ValueNet.init([enc.dim, 16, spec.n_states], spec.beta, seed=1)
    apt, dift = random_pair(spec, np.random.default_rng(2))
    s = spec.dift_states[0]
    q = extract_q(net, enc, apt, dift, s, 1, 0)
    a2, d2 = apt.copy(), dift.copy()
    a2.at(spec, s)[:] = 0
    a2.at(spec, s)[1] = 1
    d2.at(spec, s)[:] = 0
    d2.at(spec, s)[0] = 1
    assert q == predict(net, enc, a2, d2)[s]
    # identical encodings give identical predictions
    assert q == extract_q(net, enc, apt, dift, s, 1, 0)


def test_sgd_backends_agree():
    try:
        cy = kernels.backend("cython")
    except ImportError:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(0)
    layout = [6, 9, 5, 3]
    X = rng.random((200, 6)).astype(np.float32)
    Y = rng.random((200, 3)).astype(np.float32)
    order = rng.permutation(200).astype(np.int64)
    p0 = ValueNet.init(layout, 1.0, seed=0, dtype=np.float32).params
    out = []
    for mod in (_fallback, cy):
        p, v = p0.copy(), np.zeros_like(p0)
        total, count, ok = mod.sgd_epoch(p, v, layout, X, Y, order, 32, 0.05, 0.9)
        out.append((p, total))
        assert ok and count == 200
    np.testing.assert_allclose(out[0][0], out[1][0], rtol=1e-4, atol=1e-6)
    assert out[0][1] == pytest.approx(out[1][1], rel=1e-5)


@pytest.mark.slow
def test_desk_scale_validation_error():
    # ten-state game: six IFG nodes
    spec = random_game(6, seed=0, hidden=True, beta=100.0)
    assert spec.n_states == 10
    data = generate_dataset(spec, 10_000, rollouts=400, seed=1)
    _, report = train(data, lr=0.05, seed=1)
    assert report.mu_val <= 0.02 * spec.beta


def test_exactly_trained_chain_q():
    hidden = chain_game(hidden=True)
    data = generate_dataset(hidden, 2000, rollouts=400, seed=2)
    net, _ = train(data, hidden=(32, 32), epochs=60, lr=0.05, seed=0)
    enc = Encoding(hidden)
    apt, dift = Strategy.uniform(hidden, "apt"), Strategy.uniform(hidden, "dift")
    v2 = hidden.state("v2")
    q = extract_q(net, enc, apt, dift, v2, 0, 1)  # MoveTo(v1) against Trap(v1)
    assert q == pytest.approx(80.0, abs=3.0)
