"""Level-by-level policy construction from a learned (or exact) value model.

Detection rates are never read: Q-values come from the model's value
predictions for strategy pairs that are pure at the state being solved.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from .game import GameSpec, Strategy, boundary_values, unveil
from .solvers import CycleError, SolveReport, _evaluate, compute_leveling
from .stage import solve_matrix
from .valuenet import Encoding, ValueNet


class HslError(RuntimeError):
    pass


class ValueModel(Protocol):
    def predict_arrays(self, A: np.ndarray, D: np.ndarray) -> np.ndarray:
        """Value vectors ``(K, n_states)`` for ``K`` flat strategy pairs."""


class NetModel:
    def __init__(self, net: ValueNet, spec: GameSpec):
        self.net = net
        self.enc = Encoding(spec)
        if net.layout[0] != self.enc.dim or net.layout[-1] != spec.n_states:
            raise HslError(f"network layout {net.layout} does not fit this game "
                           f"(input {self.enc.dim}, output {spec.n_states})")

    def predict_arrays(self, A, D):
        return self.net.predict_encoded(self.enc.encode_arrays(A, D))


class ExactValueModel:
    """Exact policy evaluation standing in for the network (needs the true rates)."""

    def __init__(self, spec: GameSpec):
        self.spec = spec
        self.fn, self.fp = unveil(spec)

    def predict_arrays(self, A, D):
        sp = self.spec
        return np.stack([_evaluate(sp, Strategy("apt", a), Strategy("dift", d), self.fn, self.fp)
                         for a, d in zip(A, D)])


def random_pure_pair(spec: GameSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    A = np.zeros(int(spec.a_off[-1]))
    D = np.zeros(int(spec.d_off[-1]))
    for s in spec.decision_states:
        A[spec.a_off[s] + rng.integers(0, spec.a_off[s + 1] - spec.a_off[s])] = 1.0
        D[spec.d_off[s] + rng.integers(0, spec.d_off[s + 1] - spec.d_off[s])] = 1.0
    return A, D


def hsl_solve(spec: GameSpec, model: ValueModel, seed: int = 0) -> SolveReport:
    """Backward pass over hierarchical levels using model-predicted Q-values.

    Every state of a level is solved from one batched model query; strategy
    updates of a level are committed once the whole level is done.
    """
    try:
        lev = compute_leveling(spec)
    except CycleError as exc:
        raise HslError(f"HSL needs an acyclic state space: {exc}") from exc
    rng = np.random.default_rng(seed)
    A, D = random_pure_pair(spec, rng)
    V = boundary_values(spec)
    finished = np.zeros(spec.n_states, dtype=bool)
    finished[spec.absorbing] = True
    choice = {}
    solves = 0
    for k in range(lev.M - 1, 0, -1):
        level = lev.states_at(k)
        for s in spec.decision_states:
            if lev.level[s] > k and not finished[s]:
                raise HslError(f"level discipline broken: {spec.names[s]} unsolved at level {k}")
        batch_a, batch_d, slots = [], [], []
        for s in level:
            a_lo, a_hi = spec.a_off[s], spec.a_off[s + 1]
            d_lo, d_hi = spec.d_off[s], spec.d_off[s + 1]
            for d in range(d_hi - d_lo):
                for a in range(a_hi - a_lo):
                    qa, qd = A.copy(), D.copy()
                    qa[a_lo:a_hi] = 0.0
                    qa[a_lo + a] = 1.0
                    qd[d_lo:d_hi] = 0.0
                    qd[d_lo + d] = 1.0
                    batch_a.append(qa)
                    batch_d.append(qd)
            slots.append((s, d_hi - d_lo, a_hi - a_lo))
        pred = model.predict_arrays(np.array(batch_a), np.array(batch_d))
        pos = 0
        updates = []
        for s, nd, na in slots:
            Q = pred[pos:pos + nd * na, s].reshape(nd, na)
            pos += nd * na
            sol = solve_matrix(Q)
            updates.append((s, sol))
            solves += 1
        for s, sol in updates:
            V[s] = sol.value
            D[spec.d_off[s]:spec.d_off[s + 1]] = sol.mix
            A[spec.a_off[s]:spec.a_off[s + 1]] = 0.0
            A[spec.a_off[s] + sol.best_response] = 1.0
            choice[s] = sol.best_response
            finished[s] = True
    return SolveReport(V, Strategy("dift", D), Strategy.pure(spec, "apt", choice), 1, 0.0,
                       [float(V[0])], [], solves)
