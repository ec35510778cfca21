"""Two-view knowledge graph: class taxonomy plus class-attribute links.

File format (UTF-8, one triple per line, ``#`` starts a comment line)::

    horse<TAB>subClass<TAB>equine
    zebra<TAB>hasAttribute<TAB>stripe

Name vectors live in a separate file::

    name_vectors class 3
    horse<TAB>0.1,0.2,0.3
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "KGParseError", "KGValidationError", "KnowledgeGraph", "GraphView", "LabelSpace",
    "DecoderEdges", "RELATIONS", "SUBCLASS", "HAS_ATTRIBUTE",
    "parse_triples", "load_graph", "save_graph", "extract_views", "edge_sets_for_decoder",
    "load_name_vectors", "save_name_vectors",
]

SUBCLASS = "subClass"
HAS_ATTRIBUTE = "hasAttribute"
RELATIONS = (SUBCLASS, HAS_ATTRIBUTE)


class KGParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class KGValidationError(ValueError):
    pass


@dataclass(frozen=True)
class KnowledgeGraph:
    """Validated graph. ``classes`` and ``attributes`` are sorted by name.

    ``subclass`` holds (child, parent) index pairs into ``classes``;
    ``has_attribute`` holds (class index, attribute index) pairs.
    """

    classes: tuple[str, ...]
    attributes: tuple[str, ...]
    subclass: tuple[tuple[int, int], ...]
    has_attribute: tuple[tuple[int, int], ...]

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, str, str]],
                     classes: Iterable[str] = (), attributes: Iterable[str] = ()) -> "KnowledgeGraph":
        """Build from named triples; node kinds are inferred from relations.

        ``classes``/``attributes`` may list isolated nodes explicitly.
        """
        triples = list(dict.fromkeys(triples))
        class_names = set(classes)
        attr_names = set(attributes)
        for s, r, o in triples:
            if r == SUBCLASS:
                class_names.update((s, o))
            elif r == HAS_ATTRIBUTE:
                class_names.add(s)
                attr_names.add(o)
            else:
                raise KGParseError(f"unknown relation {r!r}")
        clash = class_names & attr_names
        if clash:
            raise KGValidationError(f"names used as both class and attribute: {sorted(clash)}")
        cls_order = tuple(sorted(class_names))
        attr_order = tuple(sorted(attr_names))
        ci = {n: i for i, n in enumerate(cls_order)}
        ai = {n: i for i, n in enumerate(attr_order)}
        sub = sorted({(ci[s], ci[o]) for s, r, o in triples if r == SUBCLASS})
        has = sorted({(ci[s], ai[o]) for s, r, o in triples if r == HAS_ATTRIBUTE})
        kg = cls(cls_order, attr_order, tuple(sub), tuple(has))
        kg.validate()
        return kg

    def validate(self) -> None:
        if len(set(self.classes)) != len(self.classes):
            raise KGValidationError("duplicate class names")
        if len(set(self.attributes)) != len(self.attributes):
            raise KGValidationError("duplicate attribute names")
        n, m = len(self.classes), len(self.attributes)
        for a, b in self.subclass:
            if not (0 <= a < n and 0 <= b < n):
                raise KGValidationError(f"subClass edge ({a}, {b}) references a missing class")
            if a == b:
                raise KGValidationError(f"subClass self-loop on {self.classes[a]!r}")
        for c, a in self.has_attribute:
            if not (0 <= c < n and 0 <= a < m):
                raise KGValidationError(f"hasAttribute edge ({c}, {a}) references a missing node")
        cycle = _find_cycle(n, self.subclass)
        if cycle:
            names = " -> ".join(self.classes[i] for i in cycle)
            raise KGValidationError(f"subClass cycle: {names}")

    @property
    def class_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.classes)}

    @property
    def attribute_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.attributes)}

    def triples(self) -> list[tuple[str, str, str]]:
        out = [(self.classes[a], SUBCLASS, self.classes[b]) for a, b in self.subclass]
        out += [(self.classes[c], HAS_ATTRIBUTE, self.attributes[a]) for c, a in self.has_attribute]
        return out

    def parents(self, name: str) -> list[str]:
        i = self.class_index[name]
        return [self.classes[b] for a, b in self.subclass if a == i]

    def attributes_of(self, name: str) -> list[str]:
        i = self.class_index[name]
        return [self.attributes[a] for c, a in self.has_attribute if c == i]


def _find_cycle(n: int, edges) -> list[int] | None:
    children = [[] for _ in range(n)]
    for a, b in edges:
        children[a].append(b)
    color = [0] * n
    for root in range(n):
        if color[root]:
            continue
        stack = [(root, iter(children[root]))]
        path = [root]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                path.pop()
            elif color[nxt] == 1:
                return path[path.index(nxt):] + [nxt]
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(children[nxt])))
                path.append(nxt)
    return None


def parse_triples(lines: Iterable[str]) -> list[tuple[str, str, str]]:
    out = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise KGParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
        s, r, o = (p.strip() for p in parts)
        if r not in RELATIONS:
            raise KGParseError(f"unknown relation {r!r}", lineno)
        if not s or not o:
            raise KGParseError("empty node name", lineno)
        out.append((s, r, o))
    return out


def load_graph(path) -> KnowledgeGraph:
    with open(path, encoding="utf-8") as fh:
        triples = parse_triples(fh)
    return KnowledgeGraph.from_triples(triples)


def save_graph(kg: KnowledgeGraph, path) -> None:
    lines = ["\t".join(t) for t in kg.triples()]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


@dataclass(frozen=True)
class GraphView:
    """One view of the graph as undirected neighbour lists.

    Nodes ``0..n_classes-1`` are the classes in KG order; in the attribute
    view nodes ``n_classes..`` are the attributes.
    """

    kind: str  # "class" | "attribute"
    nodes: tuple[str, ...]
    n_classes: int
    neighbors: tuple[tuple[int, ...], ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def neighbors_of(self, name: str) -> set[str]:
        i = self.nodes.index(name)
        return {self.nodes[j] for j in self.neighbors[i]}

    def mean_adjacency(self) -> np.ndarray:
        """Row-normalised adjacency; rows of isolated nodes are zero."""
        a = np.zeros((self.n_nodes, self.n_nodes))
        for i, nb in enumerate(self.neighbors):
            if nb:
                a[i, list(nb)] = 1.0 / len(nb)
        return a

    def without_edges(self, removed) -> "GraphView":
        """Same nodes with the given (i, j) edges dropped."""
        drop = {tuple(sorted(map(int, e))) for e in removed}
        return _view(self.kind, self.nodes, self.n_classes,
                     [e for e in self.edges if tuple(sorted(e)) not in drop])

    def admissible(self, i: int, j: int) -> bool:
        if self.kind == "class":
            return i != j
        return (i < self.n_classes) != (j < self.n_classes)


def _view(kind: str, nodes, n_classes: int, edges) -> GraphView:
    nb = [set() for _ in nodes]
    for a, b in edges:
        nb[a].add(b)
        nb[b].add(a)
    return GraphView(kind, tuple(nodes), n_classes, tuple(tuple(sorted(s)) for s in nb), tuple(edges))


def extract_views(kg: KnowledgeGraph) -> tuple[GraphView, GraphView]:
    n = len(kg.classes)
    class_edges = sorted({(min(a, b), max(a, b)) for a, b in kg.subclass})
    attr_edges = sorted((c, n + a) for c, a in kg.has_attribute)
    return (_view("class", kg.classes, n, class_edges),
            _view("attribute", kg.classes + kg.attributes, n, attr_edges))


@dataclass(frozen=True)
class DecoderEdges:
    positives: np.ndarray  # (p, 2) int
    negatives: np.ndarray  # (q, 2) int
    weight: float


def edge_sets_for_decoder(view: GraphView, policy: str = "auto", ratio: int = 5,
                          seed: int = 0, max_exhaustive: int = 10_000) -> DecoderEdges:
    """Positive links, negative (unlinked admissible) pairs, and w = |pos|/|neg|.

    ``policy`` is ``"exhaustive"``, ``"sampled"`` (``ratio`` negatives per
    positive, seeded), or ``"auto"``: exhaustive unless the number of
    candidate pairs exceeds ``max_exhaustive``.
    """
    if not view.edges:
        raise ValueError(f"{view.kind} view has no edges; the decoder loss is undefined")
    pos = np.array(view.edges, dtype=np.int64)
    linked = {tuple(e) for e in view.edges}
    n, nc = view.n_nodes, view.n_classes
    if view.kind == "class":
        candidates = n * (n - 1) // 2
    else:
        candidates = nc * (n - nc)
    if policy == "auto":
        policy = "exhaustive" if candidates <= max_exhaustive else "sampled"
    if policy == "exhaustive":
        if view.kind == "class":
            pairs = ((i, j) for i in range(n) for j in range(i + 1, n))
        else:
            pairs = ((i, j) for i in range(nc) for j in range(nc, n))
        neg = [p for p in pairs if p not in linked]
    elif policy == "sampled":
        want = ratio * len(pos)
        free = candidates - len(linked)
        if want > free:
            raise ValueError(f"cannot sample {want} negatives from {free} unlinked pairs")
        rng = np.random.default_rng(seed)
        chosen: dict[tuple[int, int], None] = {}
        while len(chosen) < want:
            if view.kind == "class":
                i, j = rng.integers(0, n, size=2)
                if i == j:
                    continue
                p = (int(min(i, j)), int(max(i, j)))
            else:
                p = (int(rng.integers(0, nc)), int(rng.integers(nc, n)))
            if p not in linked:
                chosen[p] = None
        neg = list(chosen)
    else:
        raise ValueError(f"unknown negative policy {policy!r}")
    neg_arr = np.array(neg, dtype=np.int64).reshape(-1, 2)
    # a complete view has no negatives; the decoder then sees positives only
    weight = len(pos) / len(neg_arr) if len(neg_arr) else 0.0
    return DecoderEdges(pos, neg_arr, weight)


@dataclass(frozen=True)
class LabelSpace:
    seen: tuple[str, ...]
    unseen: tuple[str, ...]
    class_nodes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise KGValidationError(f"labels both seen and unseen: {sorted(overlap)}")

    def node(self, label: str) -> str:
        return self.class_nodes.get(label, label)

    def check_against(self, kg: KnowledgeGraph) -> None:
        known = set(kg.classes)
        missing = [y for y in self.seen + self.unseen if self.node(y) not in known]
        if missing:
            raise KGValidationError(f"labels without a class node: {missing}")


def load_name_vectors(path) -> tuple[str, dict[str, np.ndarray]]:
    """Returns (node kind, name -> vector)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "name_vectors":
            raise KGParseError("expected header 'name_vectors <node-kind> <dimension>'", 1)
        kind, dim = header[1], int(header[2])
        out = {}
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            try:
                name, values = line.split("\t")
                vec = np.array([float(v) for v in values.split(",")])
            except ValueError as exc:
                raise KGParseError(f"malformed vector line: {exc}", lineno) from None
            if vec.shape != (dim,):
                raise KGParseError(f"{name!r} has dimension {vec.size}, expected {dim}", lineno)
            if name in out:
                raise KGParseError(f"duplicate name {name!r}", lineno)
            out[name] = vec
    return kind, out


def save_name_vectors(path, kind: str, vectors: Mapping[str, np.ndarray]) -> None:
    dims = {np.asarray(v).size for v in vectors.values()}
    if len(dims) > 1:
        raise ValueError("name vectors must share one dimension")
    dim = dims.pop() if dims else 0
    lines = [f"name_vectors {kind} {dim}"]
    for name in sorted(vectors):
        vals = ",".join(repr(float(x)) for x in np.asarray(vectors[name]).ravel())
        lines.append(f"{name}\t{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

