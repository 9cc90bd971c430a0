"""Information-flow graphs: loading, pruning, de-cycling and multi-stage expansion."""

from __future__ import annotations

import enum
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping


class IfgError(ValueError):
    """Raised for malformed or unusable information-flow graphs."""


class NodeKind(enum.Enum):
    PROCESS = "process"
    FILE = "file"
    SOCKET = "socket"
    MEMORY = "memory"
    OTHER = "other"


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    label: str = ""
    path: str | None = None


@dataclass(frozen=True)
class StagePlan:
    """Destination sets of an ``m``-stage attack, one per stage."""

    sets: tuple[frozenset[str], ...]

    @property
    def m(self) -> int:
        return len(self.sets)

    def __post_init__(self):
        if not self.sets:
            raise IfgError("stage plan needs at least one stage")
        for j, s in enumerate(self.sets, 1):
            if not s:
                raise IfgError(f"stage {j} destination set is empty")


@dataclass(frozen=True)
class IfgGraph:
    """Directed provenance graph with entry points and destinations.

    Nodes keep their document order; ``edges`` holds distinct ordered pairs.
    """

    nodes: tuple[Node, ...]
    edges: frozenset[tuple[str, str]]
    entries: frozenset[str]
    destinations: frozenset[str]
    stages: StagePlan | None = None
    _index: dict[str, Node] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for n in self.nodes:
            if n.id in index:
                raise IfgError(f"duplicate node id {n.id}")
            index[n.id] = n
        object.__setattr__(self, "_index", index)
        for u, v in sorted(self.edges):
            for end in (u, v):
                if end not in index:
                    raise IfgError(f"dangling endpoint {end}")
        if not self.entries:
            raise IfgError("entry set is empty")
        if not self.destinations:
            raise IfgError("destination set is empty")
        for s in sorted(self.entries | self.destinations):
            if s not in index:
                raise IfgError(f"unknown node {s} in entries/destinations")
        overlap = self.entries & self.destinations
        if overlap:
            raise IfgError(f"entry/destination overlap: {', '.join(sorted(overlap))}")

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def q(self) -> int:
        return len(self.destinations)

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> Node:
        return self._index[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def successors(self) -> dict[str, list[str]]:
        order = {nid: i for i, nid in enumerate(self.ids)}
        succ: dict[str, list[str]] = {nid: [] for nid in self.ids}
        for u, v in self.edges:
            succ[u].append(v)
        for lst in succ.values():
            lst.sort(key=order.__getitem__)
        return succ

    def predecessors(self) -> dict[str, list[str]]:
        pred: dict[str, list[str]] = {nid: [] for nid in self.ids}
        for u, v in self.edges:
            pred[v].append(u)
        return pred

    def is_acyclic(self) -> bool:
        return find_cycle(self.ids, self.successors()) is None


def find_cycle(vertices: Iterable, succ: Mapping) -> list | None:
    """Return one directed cycle as a vertex list, or None if the graph is a DAG."""
    color = {v: 0 for v in vertices}
    parent = {}
    for root in color:
        if color[root]:
            continue
        stack = [(root, iter(succ.get(root, ())))]
        color[root] = 1
        while stack:
            v, it = stack[-1]
            for w in it:
                if color[w] == 0:
                    color[w] = 1
                    parent[w] = v
                    stack.append((w, iter(succ.get(w, ()))))
                    break
                if color[w] == 1:
                    cycle = [v]
                    while cycle[-1] != w:
                        cycle.append(parent[cycle[-1]])
                    return cycle[::-1]
            else:
                color[v] = 2
                stack.pop()
    return None


# -- document I/O -----------------------------------------------------------

_KINDS = {k.value: k for k in NodeKind}


def load_ifg(doc: Mapping) -> IfgGraph:
    """Build a validated graph from a parsed IFG JSON document."""
    if not isinstance(doc, Mapping):
        raise IfgError("IFG document must be an object")
    for key in ("nodes", "edges", "entries", "destinations"):
        if key not in doc:
            raise IfgError(f"missing field '{key}'")
    nodes = []
    for raw in doc["nodes"]:
        if not isinstance(raw, Mapping) or "id" not in raw:
            raise IfgError(f"node entry without id: {raw!r}")
        kind = raw.get("kind", "other")
        if kind not in _KINDS:
            raise IfgError(f"node {raw['id']}: unknown kind '{kind}'")
        nodes.append(Node(str(raw["id"]), _KINDS[kind], str(raw.get("label", "")), raw.get("path")))
    edges = set()
    for e in doc["edges"]:
        if not isinstance(e, (list, tuple)) or len(e) != 2:
            raise IfgError(f"edge must be a [src, dst] pair: {e!r}")
        edges.add((str(e[0]), str(e[1])))
    stages = None
    if doc.get("stages") is not None:
        st = doc["stages"]
        sets = tuple(frozenset(map(str, s)) for s in st.get("sets", []))
        if "m" in st and st["m"] != len(sets):
            raise IfgError(f"stages.m={st['m']} but {len(sets)} sets given")
        stages = StagePlan(sets)
    return IfgGraph(
        tuple(nodes),
        frozenset(edges),
        frozenset(map(str, doc["entries"])),
        frozenset(map(str, doc["destinations"])),
        stages,
    )


def dump_ifg(g: IfgGraph) -> dict:
    nodes = []
    for n in g.nodes:
        d = {"id": n.id, "kind": n.kind.value, "label": n.label}
        if n.path is not None:
            d["path"] = n.path
        nodes.append(d)
    order = {nid: i for i, nid in enumerate(g.ids)}
    doc = {
        "nodes": nodes,
        "edges": [list(e) for e in sorted(g.edges, key=lambda e: (order[e[0]], order[e[1]]))],
        "entries": sorted(g.entries, key=order.__getitem__),
        "destinations": sorted(g.destinations, key=order.__getitem__),
    }
    if g.stages is not None:
        doc["stages"] = {"m": g.stages.m, "sets": [sorted(s, key=order.get) for s in g.stages.sets]}
    return doc


# -- pruning ----------------------------------------------------------------

def _reach(starts: Iterable[str], adj: Mapping[str, list[str]]) -> set[str]:
    seen = set(starts)
    queue = deque(seen)
    while queue:
        v = queue.popleft()
        for w in adj.get(v, ()):
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return seen


def _on_paths(sources, targets, succ, pred) -> set[str]:
    return _reach(sources, succ) & _reach(targets, pred)


def _match_prefix(path: str, prefixes: list[str]) -> str | None:
    best = None
    for p in prefixes:
        root = p.rstrip("/") or "/"
        if path == root or path.startswith(root.rstrip("/") + "/"):
            if best is None or len(root) > len(best):
                best = root
    return best


def _group_files(g: IfgGraph, prefixes: list[str]) -> IfgGraph:
    rename = {}
    for n in g.nodes:
        if n.kind is NodeKind.FILE and n.path:
            root = _match_prefix(n.path, prefixes)
            if root is not None:
                rename[n.id] = root
    if not rename:
        return g
    nodes, seen = [], set()
    for n in g.nodes:
        nid = rename.get(n.id, n.id)
        if nid in seen:
            continue
        seen.add(nid)
        nodes.append(Node(nid, NodeKind.FILE, nid, nid) if n.id in rename else n)
    ids = {n.id for n in nodes}
    collisions = {v for v in set(rename.values()) if v in {n.id for n in g.nodes if n.id not in rename}}
    if collisions:
        raise IfgError(f"group prefix collides with node id: {', '.join(sorted(collisions))}")
    r = lambda v: rename.get(v, v)  # noqa: E731
    edges = frozenset((r(u), r(v)) for u, v in g.edges if r(u) != r(v))
    stages = None
    if g.stages is not None:
        stages = StagePlan(tuple(frozenset(r(v) for v in s) for s in g.stages.sets))
    assert all(v in ids for e in edges for v in e)
    return IfgGraph(tuple(nodes), edges, frozenset(map(r, g.entries)),
                    frozenset(map(r, g.destinations)), stages)


def prune_ifg(g: IfgGraph, group_prefixes: Iterable[str] = ()) -> IfgGraph:
    """Keep only the attack-relevant part of ``g``.

    Parallel edges are already collapsed by construction; self-loops are
    dropped. Nodes off every entry->destination path (and, for staged graphs,
    off every stage-j -> stage-(j+1) path) are removed, then file nodes under
    each grouping prefix are merged into one super-node.
    """
    edges = frozenset((u, v) for u, v in g.edges if u != v)
    g = replace(g, edges=edges, _index=None)
    succ, pred = g.successors(), g.predecessors()
    keep = _on_paths(g.entries, g.destinations, succ, pred)
    if not keep & g.destinations:
        raise IfgError("no attack path survives pruning")
    if g.stages is not None:
        sets = g.stages.sets
        for a, b in zip(sets, sets[1:]):
            keep |= _on_paths(a, b, succ, pred)
    keep |= g.entries | g.destinations
    if g.stages is not None:
        for s in g.stages.sets:
            keep |= s
    nodes = tuple(n for n in g.nodes if n.id in keep)
    edges = frozenset((u, v) for u, v in edges if u in keep and v in keep)
    out = IfgGraph(nodes, edges, g.entries, g.destinations, g.stages)
    return _group_files(out, list(group_prefixes)) if group_prefixes else out


# -- node versioning ----------------------------------------------------------

def _sccs(ids: list[str], succ: Mapping[str, list[str]]) -> list[list[str]]:
    """Tarjan's algorithm, iterative."""
    index, low, on_stack = {}, {}, set()
    stack, out = [], []
    counter = 0
    for root in ids:
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            v, i = work.pop()
            if i == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack.add(v)
            nbrs = succ[v]
            recurse = False
            while i < len(nbrs):
                w = nbrs[i]
                i += 1
                if w not in index:
                    work.append((v, i))
                    work.append((w, 0))
                    recurse = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if recurse:
                continue
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                out.append(comp)
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
    return out


def version_acyclic(g: IfgGraph) -> IfgGraph:
    """Split nodes on cycles into numbered versions so the graph becomes a DAG.

    Each strongly connected component ``C`` with ``k > 1`` nodes is unrolled
    into ``k`` layers: an internal edge ``u -> w`` becomes
    ``u@i -> w@(i+1)``, edges entering ``C`` (and entry points in ``C``) use
    layer 1, and edges leaving ``C`` leave from every layer. A simple path
    visits at most ``k`` nodes of ``C``, so every entry->destination path of
    ``g`` survives. Versions on no entry->destination path are dropped; the
    surviving versions of a node are named ``id``, ``id#2``, ... in layer order.
    """
    succ = g.successors()
    comps = [c for c in _sccs(g.ids, succ) if len(c) > 1]
    if not comps:
        return g
    comp_of = {}
    for ci, comp in enumerate(comps):
        for v in comp:
            comp_of[v] = ci

    def versions(v):
        if v in comp_of:
            return [(v, i) for i in range(1, len(comps[comp_of[v]]) + 1)]
        return [(v, 1)]

    vedges = set()
    for u, w in g.edges:
        cu, cw = comp_of.get(u), comp_of.get(w)
        if cu is not None and cu == cw:
            k = len(comps[cu])
            vedges.update(((u, i), (w, i + 1)) for i in range(1, k))
        else:
            vedges.update((x, (w, 1)) for x in versions(u))
    vnodes = [x for v in g.ids for x in versions(v)]
    vsucc, vpred = defaultdict(list), defaultdict(list)
    for a, b in vedges:
        vsucc[a].append(b)
        vpred[b].append(a)
    ventries = {(e, 1) for e in g.entries}
    vdests = {x for d in g.destinations for x in versions(d)}
    keep = _on_paths(ventries, vdests, vsucc, vpred)
    keep |= ventries
    for v in g.ids:
        if not any(x in keep for x in versions(v)):
            keep.add((v, 1))
    for d in g.destinations:  # every original destination keeps its primary version
        if not any(x in keep for x in versions(d)):
            keep.add((d, 1))

    names = {}
    for v in g.ids:
        live = [x for x in versions(v) if x in keep]
        for rank, x in enumerate(live, 1):
            names[x] = v if rank == 1 else f"{v}#{rank}"
    nodes = []
    for x in vnodes:
        if x in keep:
            base = g.node(x[0])
            nodes.append(Node(names[x], base.kind, base.label, base.path))
    edges = frozenset((names[a], names[b]) for a, b in vedges if a in keep and b in keep)
    dests = frozenset(names[x] for x in vdests if x in keep)
    stages = None
    if g.stages is not None:
        stages = StagePlan(tuple(frozenset(names[x] for v in s for x in versions(v) if x in keep)
                                 for s in g.stages.sets))
    out = IfgGraph(tuple(nodes), edges, frozenset(names[x] for x in ventries), dests, stages)
    assert out.is_acyclic()
    return out


# -- multi-stage expansion ----------------------------------------------------

def expand_multistage(g: IfgGraph, plan: StagePlan | None = None) -> IfgGraph:
    """Chain ``m`` copies of ``g``; stage-j destinations feed their twins in copy j+1.

    Copy ``j`` of node ``v`` is named ``v@j`` (ids are unchanged when ``m == 1``).
    """
    plan = plan if plan is not None else g.stages
    if plan is None:
        raise IfgError("no stage plan given and the document has no 'stages' field")
    for j, s in enumerate(plan.sets, 1):
        missing = sorted(v for v in s if v not in g)
        if missing:
            raise IfgError(f"stage {j} destination {missing[0]} is not a node of the graph")
    if not g.is_acyclic():
        raise IfgError("multi-stage expansion requires an acyclic graph")
    m = plan.m
    if m == 1:
        return IfgGraph(g.nodes, g.edges, g.entries, plan.sets[0], None)

    def name(v, j):
        return f"{v}@{j}"

    nodes = tuple(replace(n, id=name(n.id, j)) for j in range(1, m + 1) for n in g.nodes)
    edges = {(name(u, j), name(v, j)) for j in range(1, m + 1) for u, v in g.edges}
    for j in range(1, m):
        edges.update((name(v, j), name(v, j + 1)) for v in plan.sets[j - 1])
    return IfgGraph(
        nodes,
        frozenset(edges),
        frozenset(name(e, 1) for e in g.entries),
        frozenset(name(d, m) for d in plan.sets[-1]),
        None,
    )
