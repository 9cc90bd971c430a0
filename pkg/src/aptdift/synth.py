"""Seeded synthetic information-flow graphs and games for tests and benchmarks."""

from __future__ import annotations

import numpy as np

from .game import DetectionParams, GameSpec, build_game
from .ifg import IfgGraph, Node, NodeKind


def random_ifg(n: int, n_edges: int | None = None, seed: int = 0, entries: int = 2,
               destinations: int = 2, back_edges: int = 0) -> IfgGraph:
    """Random graph whose every node lies on some entry-to-destination path.

    Without ``back_edges`` the graph is a DAG; each back edge closes a cycle
    among the interior nodes.
    """
    if n < entries + destinations:
        raise ValueError("too few nodes for the requested entries/destinations")
    rng = np.random.default_rng(seed)
    ids = [f"n{i:02d}" for i in range(n)]
    ent = set(range(entries))
    dst = set(range(n - destinations, n))
    edges = set()
    for v in range(entries, n):
        edges.add((int(rng.integers(0, min(v, n - destinations))), v))
    for u in range(n - destinations):
        if not any(e[0] == u for e in edges):
            edges.add((u, int(rng.integers(max(u + 1, entries), n))))
    target = max(n_edges or 0, len(edges))
    candidates = [(u, v) for u in range(n - destinations) for v in range(max(u + 1, entries), n)
                  if (u, v) not in edges]
    rng.shuffle(candidates)
    for e in candidates[:target - len(edges)]:
        edges.add(tuple(int(x) for x in e))
    interior = list(range(entries, n - destinations))
    back = [(v, u) for u in interior for v in interior if v > u]
    rng.shuffle(back)
    for e in back[:back_edges]:
        edges.add(tuple(int(x) for x in e))
    nodes = tuple(Node(i, NodeKind.PROCESS) for i in ids)
    return IfgGraph(nodes, frozenset((ids[u], ids[v]) for u, v in edges),
                    frozenset(ids[i] for i in ent), frozenset(ids[i] for i in dst))


def random_params(g: IfgGraph, seed: int = 0, lo: float = 0.05, hi: float = 0.95,
                  hidden: bool = False) -> DetectionParams:
    rng = np.random.default_rng(seed)
    fn = {v: float(rng.uniform(lo, hi)) for v in g.ids}
    fp = {v: float(rng.uniform(lo, hi)) for v in g.ids}
    return DetectionParams(fn, fp, hidden)


def random_game(n: int, seed: int = 0, beta: float = 100.0, n_edges: int | None = None,
                back_edges: int = 0, hidden: bool = False, **kw) -> GameSpec:
    g = random_ifg(n, n_edges, seed, back_edges=back_edges, **kw)
    return build_game(g, random_params(g, seed + 7919, hidden=hidden), beta)


def ransomware_scale_game(beta: float = 50.0, hidden: bool = True, seed: int = 2020) -> GameSpec:
    """Fixed 18-node / 29-edge DAG with two entries and two destinations."""
    return random_game(18, seed, beta, n_edges=29, hidden=hidden)


def chain_game(beta: float = 100.0, fn: float = 0.2, fp: float = 0.1, hidden: bool = False) -> GameSpec:
    """Two-node chain v2 -> v1 with v1 the destination."""
    g = IfgGraph((Node("v2", NodeKind.PROCESS), Node("v1", NodeKind.FILE)),
                 frozenset({("v2", "v1")}), frozenset({"v2"}), frozenset({"v1"}))
    return build_game(g, DetectionParams({"v1": fn, "v2": fn}, {"v1": fp, "v2": fp}, hidden), beta)
