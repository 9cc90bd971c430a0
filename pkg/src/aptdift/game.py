"""The APT-vs-DIFT stochastic game built on top of an information-flow graph.

States are held as integers::

    0            virtual start state v0
    1 .. q       destination nodes (absorbing)
    q+1 .. N     remaining IFG nodes
    N+1          drop-out (phi)
    N+2          APT detected (tau_A)
    N+3          false positive (tau_B)

External names are ``"v0"``, the IFG node id, ``"phi"``, ``"tau_A"`` and
``"tau_B"``. The attacker's drop action is named ``"phi"`` and the defender's
no-trap action ``"0"``; every other action is the id of the target node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ifg import IfgGraph, dump_ifg, find_cycle, load_ifg

V0, PHI, TAU_A, TAU_B = "v0", "phi", "tau_A", "tau_B"
DROP, NO_TRAP = "phi", "0"
NO_TRAP_INDEX = -1
DEFAULT_BETA = 100.0


class GameError(ValueError):
    pass


class HiddenParametersError(GameError):
    """A solver asked for detection rates that are concealed."""


@dataclass(frozen=True)
class DetectionParams:
    fn: Mapping[str, float]
    fp: Mapping[str, float]
    hidden: bool = False

    def __post_init__(self):
        for name, rates in (("FN", self.fn), ("FP", self.fp)):
            for v, r in rates.items():
                if not 0.0 < float(r) < 1.0:
                    raise GameError(f"{name}({v})={r}: rate must lie strictly in (0,1)")


@dataclass(eq=False)
class GameSpec:
    """A fully specified game plus flat action tables shared by all solvers.

    Attacker actions of state ``s`` are ``a_target[a_off[s]:a_off[s+1]]``
    (successor state indices, drop last). Defender actions of ``s`` are
    ``d_target[d_off[s]:d_off[s+1]]`` with ``-1`` for no trap, listed first.
    """

    graph: IfgGraph
    beta: float
    _params: DetectionParams = field(repr=False)

    def __post_init__(self):
        g = self.graph
        dests = [v for v in g.ids if v in g.destinations]
        rest = [v for v in g.ids if v not in g.destinations]
        self.node_order = dests + rest
        self.n, self.q = len(self.node_order), len(dests)
        self.phi, self.tau_a, self.tau_b = self.n + 1, self.n + 2, self.n + 3
        self.n_states = self.n + 4
        self.names = [V0] + self.node_order + [PHI, TAU_A, TAU_B]
        self.index = {name: i for i, name in enumerate(self.names)}
        node_idx = {v: i + 1 for i, v in enumerate(self.node_order)}

        succ = g.successors()
        self.absorbing = np.zeros(self.n_states, dtype=bool)
        self.absorbing[1:self.q + 1] = True
        self.absorbing[self.phi:] = True

        a_lists, d_lists = [], []
        for s in range(self.n_states):
            if self.absorbing[s]:
                a_lists.append([])
                d_lists.append([])
            elif s == 0:
                a_lists.append(sorted(node_idx[e] for e in g.entries))
                d_lists.append([NO_TRAP_INDEX])
            else:
                nbrs = sorted(node_idx[w] for w in succ[self.names[s]])
                a_lists.append(nbrs + [self.phi])
                d_lists.append([NO_TRAP_INDEX] + nbrs)
        self.a_off = np.cumsum([0] + [len(x) for x in a_lists]).astype(np.int64)
        self.d_off = np.cumsum([0] + [len(x) for x in d_lists]).astype(np.int64)
        self.a_target = np.array([t for x in a_lists for t in x], dtype=np.int64)
        self.d_target = np.array([t for x in d_lists for t in x], dtype=np.int64)

        fn = np.full(self.n_states, 0.5)
        fp = np.full(self.n_states, 0.5)
        for v in self.node_order:
            if v not in self._params.fn or v not in self._params.fp:
                raise GameError(f"missing FN/FP entry for node {v}")
            fn[node_idx[v]] = float(self._params.fn[v])
            fp[node_idx[v]] = float(self._params.fp[v])
        self._fn, self._fp = fn, fp
        self.defender_wins = np.zeros(self.n_states, dtype=bool)
        self.defender_wins[[self.phi, self.tau_a]] = True

        self.decision_states = [s for s in range(self.n_states) if not self.absorbing[s]]
        # defender has a real choice everywhere except v0
        self.dift_states = [s for s in self.decision_states if s != 0]

    # -- accessors ----------------------------------------------------------

    @property
    def hidden(self) -> bool:
        return self._params.hidden

    @property
    def params(self) -> DetectionParams:
        if self._params.hidden:
            raise HiddenParametersError("detection rates are hidden from solvers")
        return self._params

    def rates(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-state (FN, FP) arrays; refuses when the parameters are hidden."""
        self.params
        return self._fn, self._fp

    def attacker_actions(self, s: int) -> np.ndarray:
        return self.a_target[self.a_off[s]:self.a_off[s + 1]]

    def defender_actions(self, s: int) -> np.ndarray:
        return self.d_target[self.d_off[s]:self.d_off[s + 1]]

    def attacker_action_names(self, s: int) -> list[str]:
        return [DROP if t == self.phi else self.names[t] for t in self.attacker_actions(s)]

    def defender_action_names(self, s: int) -> list[str]:
        return [NO_TRAP if t == NO_TRAP_INDEX else self.names[t] for t in self.defender_actions(s)]

    def state(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise GameError(f"unknown state {name}") from None

    def successors(self, s: int) -> list[int]:
        """States reachable in one step from ``s`` under some action pair."""
        if self.absorbing[s]:
            return []
        out = set(int(t) for t in self.attacker_actions(s))
        traps = [int(d) for d in self.defender_actions(s) if d != NO_TRAP_INDEX]
        if traps:
            out.add(self.tau_b)
            out.add(self.tau_a)
        return sorted(out)

    def state_graph(self) -> dict[int, list[int]]:
        return {s: self.successors(s) for s in range(self.n_states)}

    def is_acyclic(self) -> bool:
        return find_cycle(range(self.n_states), self.state_graph()) is None

    def with_beta(self, beta: float) -> "GameSpec":
        return GameSpec(self.graph, beta, self._params)

    def with_hidden(self, hidden: bool) -> "GameSpec":
        p = self._params
        return GameSpec(self.graph, self.beta, DetectionParams(p.fn, p.fp, hidden))


def unveil(spec: GameSpec) -> tuple[np.ndarray, np.ndarray]:
    """True (FN, FP) arrays regardless of ``hidden``. Reserved for the simulator."""
    return spec._fn, spec._fp


def build_game(g: IfgGraph, params: DetectionParams, beta: float = DEFAULT_BETA) -> GameSpec:
    if not beta > 0:
        raise GameError(f"beta must be positive, got {beta}")
    return GameSpec(g, float(beta), params)


def load_game(doc: Mapping) -> GameSpec:
    """Game document: an IFG document plus ``fn``, ``fp``, ``beta`` and ``hidden``."""
    g = load_ifg(doc)
    for key in ("fn", "fp"):
        if not isinstance(doc.get(key), Mapping):
            raise GameError(f"missing field '{key}'")
    params = DetectionParams({str(k): float(v) for k, v in doc["fn"].items()},
                             {str(k): float(v) for k, v in doc["fp"].items()},
                             bool(doc.get("hidden", False)))
    return build_game(g, params, float(doc.get("beta", DEFAULT_BETA)))


def dump_game(spec: GameSpec) -> dict:
    doc = dump_ifg(spec.graph)
    p = spec._params
    doc["fn"] = {v: float(p.fn[v]) for v in spec.graph.ids}
    doc["fp"] = {v: float(p.fp[v]) for v in spec.graph.ids}
    doc["beta"] = spec.beta
    doc["hidden"] = p.hidden
    return doc


# -- dynamics -----------------------------------------------------------------

def _check_actions(spec: GameSpec, s: int, a: int, d: int):
    if spec.absorbing[s]:
        raise GameError(f"state {spec.names[s]} is absorbing")
    if a not in spec.attacker_actions(s):
        raise GameError(f"attacker action {a} not available at {spec.names[s]}")
    if d not in spec.defender_actions(s):
        raise GameError(f"defender action {d} not available at {spec.names[s]}")


def transition_from(spec: GameSpec, fn: np.ndarray, fp: np.ndarray,
                    s: int, a: int, d: int) -> list[tuple[int, float]]:
    _check_actions(spec, s, a, d)
    if d == NO_TRAP_INDEX:
        return [(a, 1.0)]
    if d == a:
        return [(spec.tau_a, 1.0 - fn[d]), (a, fn[d])]
    return [(spec.tau_b, fp[d]), (a, 1.0 - fp[d])]


def transition(spec: GameSpec, s: int, a: int, d: int) -> list[tuple[int, float]]:
    """Support of P(s, a, d, .) as (next state, probability) pairs.

    ``a`` is the attacker's target state (``spec.phi`` for dropping out) and
    ``d`` the trapped node's state index or ``NO_TRAP_INDEX``.
    """
    fn, fp = spec.rates()
    return transition_from(spec, fn, fp, s, a, d)


def terminal_payoff(spec: GameSpec, s: int) -> tuple[float, float]:
    if not spec.absorbing[s]:
        raise GameError(f"state {spec.names[s]} is not absorbing")
    if spec.defender_wins[s]:
        return 0.0, spec.beta
    return spec.beta, 0.0


def boundary_values(spec: GameSpec) -> np.ndarray:
    """Values of the absorbing states (zero elsewhere)."""
    v = np.zeros(spec.n_states)
    v[spec.defender_wins] = spec.beta
    return v


# -- strategies -----------------------------------------------------------------

@dataclass
class Strategy:
    """Stationary mixed strategy stored as a flat array aligned with the action table.

    ``probs[off[s]:off[s+1]]`` is the distribution at state ``s``; absorbing
    states have empty slices.
    """

    player: str  # "apt" or "dift"
    probs: np.ndarray

    def at(self, spec: GameSpec, s: int) -> np.ndarray:
        off = spec.a_off if self.player == "apt" else spec.d_off
        return self.probs[off[s]:off[s + 1]]

    def copy(self) -> "Strategy":
        return Strategy(self.player, self.probs.copy())

    def to_dict(self, spec: GameSpec) -> dict:
        out = {}
        for s in _bearing_states(spec, self.player):
            names = (spec.attacker_action_names if self.player == "apt" else spec.defender_action_names)(s)
            out[spec.names[s]] = {n: float(p) for n, p in zip(names, self.at(spec, s))}
        return out

    @classmethod
    def from_dict(cls, spec: GameSpec, player: str, mapping: Mapping) -> "Strategy":
        report = validate_strategy(spec, player, mapping)
        if report is not None:
            raise GameError(report)
        strat = cls.uniform(spec, player)
        for sname, dist in mapping.items():
            s = spec.state(sname)
            names = (spec.attacker_action_names if player == "apt" else spec.defender_action_names)(s)
            strat.at(spec, s)[:] = [float(dist.get(n, 0.0)) for n in names]
        return strat

    @classmethod
    def uniform(cls, spec: GameSpec, player: str) -> "Strategy":
        off = spec.a_off if player == "apt" else spec.d_off
        sizes = np.diff(off)
        probs = np.repeat(1.0 / np.maximum(sizes, 1), sizes)
        return cls(player, probs)

    @classmethod
    def pure(cls, spec: GameSpec, player: str, choice: Mapping[int, int]) -> "Strategy":
        """Point masses: ``choice[s]`` is the local action index at state ``s``.

        States absent from ``choice`` use action 0.
        """
        off = spec.a_off if player == "apt" else spec.d_off
        probs = np.zeros(off[-1])
        for s in range(spec.n_states):
            if off[s + 1] > off[s]:
                probs[off[s] + choice.get(s, 0)] = 1.0
        return cls(player, probs)


def _bearing_states(spec: GameSpec, player: str) -> list[int]:
    return spec.decision_states if player == "apt" else spec.dift_states


def validate_strategy(spec: GameSpec, player: str, mapping: Mapping, tol: float = 1e-9,
                      complete: bool = True) -> str | None:
    """Return ``None`` if ``mapping`` (state -> {action: prob}) is a valid strategy,
    else a message describing the first violation."""
    if player not in ("apt", "dift"):
        return f"unknown player {player}"
    bearing = [spec.names[s] for s in _bearing_states(spec, player)]
    allowed = set(bearing)
    if complete:
        for sname in bearing:
            if sname not in mapping:
                return f"missing distribution at {sname}"
    for sname, dist in mapping.items():
        if sname not in allowed:
            return f"state {sname} carries no {player} decision"
        s = spec.index[sname]
        names = (spec.attacker_action_names if player == "apt" else spec.defender_action_names)(s)
        total = 0.0
        for act, p in dist.items():
            if act not in names:
                return f"unsupported action {act} at {sname}"
            if not np.isfinite(p) or p < -tol:
                return f"negative or non-finite probability {p} for {act} at {sname}"
            total += p
        if abs(total - 1.0) > tol:
            return f"sums to {total:.12g} at {sname}"
    return None
