import numpy as np
import pytest

from aptdift.ifg import IfgGraph, Node, NodeKind
from aptdift.synth import chain_game


def random_digraph(rng, n, p_edge=0.12, n_entries=2, n_dests=2, kinds=False):
    """Arbitrary random digraph (may be cyclic, may contain dead ends)."""
    ids = [f"x{i}" for i in range(n)]
    edges = {(ids[u], ids[v]) for u in range(n) for v in range(n)
             if u != v and rng.random() < p_edge}
    perm = rng.permutation(n)
    entries = {ids[i] for i in perm[:n_entries]}
    dests = {ids[i] for i in perm[n_entries:n_entries + n_dests]}
    nodes = tuple(Node(i, NodeKind.FILE if kinds and rng.random() < 0.3 else NodeKind.PROCESS)
                  for i in ids)
    return IfgGraph(nodes, frozenset(edges), frozenset(entries), frozenset(dests))


def bfs(succ, starts):
    seen, stack = set(starts), list(starts)
    while stack:
        v = stack.pop()
        for w in succ.get(v, ()):
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


@pytest.fixture
def chain():
    return chain_game()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
