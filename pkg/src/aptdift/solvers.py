"""Value iteration (general games) and single-sweep backward induction (acyclic games)."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .game import NO_TRAP_INDEX, GameSpec, Strategy, boundary_values
from .ifg import find_cycle
from .stage import QMatrix, solve_matrix

MONOTONE_TOL = 1e-9
DEFAULT_DELTA = 1e-7
DEFAULT_MAX_ITER = 1_000_000


class SolverError(RuntimeError):
    pass


class CycleError(SolverError):
    pass


class NonConvergenceError(SolverError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


@dataclass
class SolveReport:
    values: np.ndarray
    defender: Strategy
    attacker: Strategy  # pure best responses against ``defender``
    iterations: int
    delta: float
    trace_v0: list[float] = field(default_factory=list)
    deltas: list[float] = field(default_factory=list)
    lp_solves: int = 0

    def to_json(self, spec: GameSpec) -> dict:
        return {
            "values": {spec.names[s]: float(v) for s, v in enumerate(self.values)},
            "defender": self.defender.to_dict(spec),
            "attacker": self.attacker.to_dict(spec),
            "iterations": self.iterations,
            "delta": float(self.delta),
            "trace_v0": [float(x) for x in self.trace_v0],
            "deltas": [float(x) for x in self.deltas],
        }


def q_from_values(spec: GameSpec, s: int, V: np.ndarray) -> QMatrix:
    """Q(s, a, d) = sum_s' P(s, a, d, s') V(s') over the stage's action grid."""
    fn, fp = spec.rates()
    A = spec.attacker_actions(s)
    D = spec.defender_actions(s)
    Q = np.empty((len(D), len(A)))
    va = V[A]
    for i, d in enumerate(D):
        if d == NO_TRAP_INDEX:
            Q[i] = va
        else:
            caught = (1.0 - fn[d]) * V[spec.tau_a] + fn[d] * va
            false_alarm = fp[d] * V[spec.tau_b] + (1.0 - fp[d]) * va
            Q[i] = np.where(A == d, caught, false_alarm)
    return QMatrix(s, Q, tuple(D), tuple(A))


def _extract(spec: GameSpec, V: np.ndarray, states) -> tuple[Strategy, Strategy, int]:
    dift = Strategy.uniform(spec, "dift")
    choice = {}
    for s in states:
        sol = solve_matrix(q_from_values(spec, s, V).values)
        dift.at(spec, s)[:] = sol.mix
        choice[s] = sol.best_response
    return dift, Strategy.pure(spec, "apt", choice), len(states)


def value_iteration(spec: GameSpec, delta: float = DEFAULT_DELTA,
                    max_iter: int = DEFAULT_MAX_ITER, on_sweep=None) -> SolveReport:
    """Synchronous minimax value iteration from the zero vector.

    Every sweep re-solves the stage LP of every non-absorbing state from the
    previous sweep's values and stops once the largest change is at most
    ``delta``. Monotonicity (values never decrease) and the ``[0, beta]``
    bounds are checked on every sweep. ``on_sweep(k, V)`` sees each new vector.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    V = boundary_values(spec)
    states = spec.decision_states
    trace, deltas = [], []
    solves = 0
    for k in range(1, max_iter + 1):
        Vn = V.copy()
        for s in states:
            Vn[s] = solve_matrix(q_from_values(spec, s, V).values).value
        solves += len(states)
        if np.any(Vn < V - MONOTONE_TOL):
            s = int(np.argmax(V - Vn))
            raise SolverError(f"monotonicity violated at {spec.names[s]} in sweep {k}")
        if np.any(Vn < -MONOTONE_TOL) or np.any(Vn > spec.beta + MONOTONE_TOL):
            raise SolverError(f"value left [0, beta] in sweep {k}")
        d = float(np.max(np.abs(Vn - V)))
        V = Vn
        if on_sweep is not None:
            on_sweep(k, V.copy())
        trace.append(float(V[0]))
        deltas.append(d)
        if d <= delta:
            break
    else:
        dift, apt, _ = _extract(spec, V, states)
        report = SolveReport(V, dift, apt, max_iter, deltas[-1], trace, deltas, solves)
        raise NonConvergenceError(f"no convergence within {max_iter} sweeps "
                                  f"(last delta {deltas[-1]:.3g})", report)
    dift, apt, n = _extract(spec, V, states)
    return SolveReport(V, dift, apt, k, deltas[-1], trace, deltas, solves + n)


# -- acyclic games ----------------------------------------------------------------

@dataclass(frozen=True)
class Leveling:
    order: list[int]
    level: np.ndarray  # 1-based level per state
    M: int

    def states_at(self, k: int) -> list[int]:
        return [s for s in self.order if self.level[s] == k]


def compute_leveling(spec: GameSpec) -> Leveling:
    """Kahn topological order plus longest-path levels; absorbing states share level M."""
    succ = spec.state_graph()
    indeg = np.zeros(spec.n_states, dtype=int)
    for s, nxt in succ.items():
        for t in nxt:
            indeg[t] += 1
    heap = [s for s in range(spec.n_states) if indeg[s] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        s = heapq.heappop(heap)
        order.append(s)
        for t in succ[s]:
            indeg[t] -= 1
            if indeg[t] == 0:
                heapq.heappush(heap, t)
    if len(order) < spec.n_states:
        cyc = find_cycle(range(spec.n_states), succ)
        raise CycleError("state graph has a cycle: " + " -> ".join(spec.names[s] for s in cyc))
    level = np.zeros(spec.n_states, dtype=int)
    level[0] = 1
    for s in order:
        if spec.absorbing[s]:
            continue
        if s != 0 and level[s] == 0:
            level[s] = 2
        for t in succ[s]:
            if not spec.absorbing[t]:
                level[t] = max(level[t], level[s] + 1)
    M = int(level.max()) + 1
    level[spec.absorbing] = M
    return Leveling(order, level, M)


def solve_acyclic(spec: GameSpec, leveling: Leveling | None = None) -> SolveReport:
    """One backward sweep over hierarchical levels M-1 .. 1."""
    lev = leveling or compute_leveling(spec)
    V = boundary_values(spec)
    dift = Strategy.uniform(spec, "dift")
    choice = {}
    solves = 0
    for k in range(lev.M - 1, 0, -1):
        for s in lev.states_at(k):
            sol = solve_matrix(q_from_values(spec, s, V).values)
            V[s] = sol.value
            dift.at(spec, s)[:] = sol.mix
            choice[s] = sol.best_response
            solves += 1
    apt = Strategy.pure(spec, "apt", choice)
    return SolveReport(V, dift, apt, 1, 0.0, [float(V[0])], [], solves)


# -- exact policy evaluation --------------------------------------------------------

def transition_matrix(spec: GameSpec, apt: Strategy, dift: Strategy,
                      fn: np.ndarray, fp: np.ndarray) -> np.ndarray:
    P = np.zeros((spec.n_states, spec.n_states))
    for s in spec.decision_states:
        A, pa = spec.attacker_actions(s), apt.at(spec, s)
        D, pd = spec.defender_actions(s), dift.at(spec, s)
        for a, x in zip(A, pa):
            for d, y in zip(D, pd):
                w = x * y
                if w == 0.0:
                    continue
                if d == NO_TRAP_INDEX:
                    P[s, a] += w
                elif d == a:
                    P[s, spec.tau_a] += w * (1.0 - fn[d])
                    P[s, a] += w * fn[d]
                else:
                    P[s, spec.tau_b] += w * fp[d]
                    P[s, a] += w * (1.0 - fp[d])
    return P


def evaluate_policy(spec: GameSpec, apt: Strategy, dift: Strategy) -> np.ndarray:
    """Exact defender payoff from every state under a fixed strategy pair."""
    fn, fp = spec.rates()
    return _evaluate(spec, apt, dift, fn, fp)


def _evaluate(spec, apt, dift, fn, fp):
    P = transition_matrix(spec, apt, dift, fn, fp)
    V = boundary_values(spec)
    T = np.array(spec.decision_states)
    absb = np.flatnonzero(spec.absorbing)
    rhs = P[np.ix_(T, absb)] @ V[absb]
    lhs = np.eye(len(T)) - P[np.ix_(T, T)]
    try:
        V[T] = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        raise SolverError("strategy pair never terminates from some state") from None
    return V
