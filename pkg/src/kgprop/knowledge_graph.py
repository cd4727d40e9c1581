"""Taxonomy-driven construction of the typed label graph.

Labels are linked by one of three edge kinds. Ancestor/descendant pairs in
the taxonomy get a super-subordinate edge; every other pair is scored with
Wu-Palmer similarity and thresholded into a positive or negative edge (or
left unconnected).
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

from kgprop.errors import (
    IndexOutOfRange,
    InvalidConfig,
    UnknownConcept,
    UnmappedLabel,
    ValidationError,
)
from kgprop.semantic_space import LabelVocabulary


class EdgeKind(str, enum.Enum):
    SUPER_SUB = "super_sub"
    POSITIVE = "positive"
    NEGATIVE = "negative"


EDGE_KINDS = (EdgeKind.SUPER_SUB, EdgeKind.POSITIVE, EdgeKind.NEGATIVE)


class Taxonomy:
    """ISA hierarchy stored as child -> parents. Must be acyclic."""

    def __init__(self, isa_edges: Iterable[tuple[str, str]], nodes: Iterable[str] = ()):
        parents: dict[str, set[str]] = {n: set() for n in nodes}
        for child, parent in isa_edges:
            if child == parent:
                raise ValidationError(f"self loop on {child!r}")
            parents.setdefault(child, set()).add(parent)
            parents.setdefault(parent, set())
        self._parents = {k: frozenset(v) for k, v in parents.items()}
        self._check_acyclic()

    def _check_acyclic(self):
        # Kahn's algorithm over parent -> child edges.
        indeg = {n: len(ps) for n, ps in self._parents.items()}
        queue = deque(n for n, d in indeg.items() if d == 0)
        seen = 0
        children = self.children
        while queue:
            n = queue.popleft()
            seen += 1
            for c in children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        if seen != len(indeg):
            raise ValidationError("taxonomy contains a directed cycle")

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self._parents)

    @property
    def isa_edges(self) -> list[tuple[str, str]]:
        return sorted((c, p) for c, ps in self._parents.items() for p in ps)

    @property
    def roots(self) -> list[str]:
        return sorted(n for n, ps in self._parents.items() if not ps)

    @cached_property
    def children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n: [] for n in self._parents}
        for c, ps in self._parents.items():
            for p in ps:
                out[p].append(c)
        for v in out.values():
            v.sort()
        return out

    def parents(self, node: str) -> frozenset[str]:
        self._require(node)
        return self._parents[node]

    def __contains__(self, node):
        return node in self._parents

    def _require(self, node):
        if node not in self._parents:
            raise UnknownConcept(node)

    @cached_property
    def _depths(self) -> dict[str, int]:
        # multi-source BFS from every root; first visit is the shortest path
        depth = {r: 1 for r in self.roots}
        queue = deque(self.roots)
        while queue:
            n = queue.popleft()
            for c in self.children[n]:
                if c not in depth:
                    depth[c] = depth[n] + 1
                    queue.append(c)
        return depth

    @cached_property
    def _ancestors(self) -> dict[str, frozenset[str]]:
        memo: dict[str, frozenset[str]] = {}

        def visit(n):
            if n not in memo:
                acc = {n}
                for p in self._parents[n]:
                    acc |= visit(p)
                memo[n] = frozenset(acc)
            return memo[n]

        for n in self._parents:
            visit(n)
        return memo

    def ancestors(self, node: str) -> frozenset[str]:
        """All ancestors of ``node``, including ``node`` itself."""
        self._require(node)
        return self._ancestors[node]

    def is_ancestor(self, a: str, b: str) -> bool:
        """True when ``a`` is a proper ancestor of ``b``."""
        return a != b and a in self.ancestors(b)

    def save(self, path) -> None:
        lines = [f"{c}\t{p}" for c, p in self.isa_edges]
        # isolated roots would otherwise be lost
        isolated = [n for n in self.roots if not self.children[n]]
        lines += [f"{n}\t" for n in isolated]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Taxonomy":
        edges, nodes = [], []
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{lineno}: expected 'child<TAB>parent'")
            child, parent = parts[0].strip(), parts[1].strip()
            if parent:
                edges.append((child, parent))
            else:
                nodes.append(child)
        return cls(edges, nodes)


def depth(tax: Taxonomy, node: str) -> int:
    """Nodes on the shortest root-to-node path; roots have depth 1."""
    tax._require(node)
    return tax._depths[node]


def wup_similarity(tax: Taxonomy, u: str, v: str) -> float | None:
    """Wu-Palmer similarity, or None when u and v share no ancestor.

    In a DAG with shortcut edges an ancestor can sit deeper (by shortest
    path) than its descendant, so the raw ratio is capped at 1.
    """
    common = tax.ancestors(u) & tax.ancestors(v)
    if not common:
        return None
    lcs_depth = max(depth(tax, c) for c in common)
    return min(1.0, 2.0 * lcs_depth / (depth(tax, u) + depth(tax, v)))


@dataclass(frozen=True)
class GraphBuildConfig:
    theta_pos: float = 0.8
    theta_neg: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.theta_pos <= 1.0:
            raise InvalidConfig(f"theta_pos={self.theta_pos} outside (0, 1]")
        if not 0.0 <= self.theta_neg < 1.0:
            raise InvalidConfig(f"theta_neg={self.theta_neg} outside [0, 1)")
        if not self.theta_neg < self.theta_pos:
            raise InvalidConfig("theta_neg must be below theta_pos")


@dataclass(frozen=True, order=True)
class Edge:
    """For SUPER_SUB, ``u`` is the ancestor. Other kinds keep ``u < v``."""

    u: int
    v: int
    kind: EdgeKind


class TypedGraph:
    def __init__(self, node_count: int, edges: Iterable[Edge] = ()):
        self.node_count = int(node_count)
        seen_pairs = set()
        clean = []
        for e in edges:
            e = Edge(int(e.u), int(e.v), EdgeKind(e.kind))
            if e.u == e.v:
                raise ValidationError(f"self edge on node {e.u}")
            for i in (e.u, e.v):
                if not 0 <= i < self.node_count:
                    raise IndexOutOfRange(f"edge endpoint {i} outside [0, {self.node_count})")
            if e.kind is not EdgeKind.SUPER_SUB and e.u > e.v:
                e = Edge(e.v, e.u, e.kind)
            pair = (min(e.u, e.v), max(e.u, e.v))
            if pair in seen_pairs:
                raise ValidationError(f"more than one edge between nodes {pair}")
            seen_pairs.add(pair)
            clean.append(e)
        self.edges: tuple[Edge, ...] = tuple(sorted(clean))
        self._adj: list[list[tuple[int, EdgeKind]]] = [[] for _ in range(self.node_count)]
        for e in self.edges:
            self._adj[e.v].append((e.u, e.kind))
            self._adj[e.u].append((e.v, e.kind))
        for lst in self._adj:
            lst.sort()

    def __eq__(self, other):
        return (
            isinstance(other, TypedGraph)
            and self.node_count == other.node_count
            and self.edges == other.edges
        )

    def __repr__(self):
        return f"TypedGraph(node_count={self.node_count}, edges={len(self.edges)})"

    def count(self, kind: EdgeKind) -> int:
        return sum(e.kind is kind for e in self.edges)

    def subgraph(self, count: int) -> "TypedGraph":
        """Induced graph on nodes ``0..count-1``."""
        return TypedGraph(count, [e for e in self.edges if e.u < count and e.v < count])

    def permuted(self, perm) -> "TypedGraph":
        """Relabel node ``i`` as ``perm[i]``."""
        return TypedGraph(
            self.node_count, [Edge(int(perm[e.u]), int(perm[e.v]), e.kind) for e in self.edges]
        )

    def to_json(self) -> dict:
        return {
            "node_count": self.node_count,
            "edges": [{"u": e.u, "v": e.v, "kind": e.kind.value} for e in self.edges],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "TypedGraph":
        try:
            return cls(obj["node_count"], [Edge(d["u"], d["v"], EdgeKind(d["kind"])) for d in obj["edges"]])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed graph json: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TypedGraph":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
        return cls.from_json(obj)


def build_typed_graph(
    tax: Taxonomy,
    vocab: LabelVocabulary,
    mapping: Mapping[str, str] | None = None,
    cfg: GraphBuildConfig = GraphBuildConfig(),
) -> TypedGraph:
    """Connect every label pair per the taxonomy.

    ``mapping`` sends label names to taxonomy concepts; labels missing from it
    map to the concept of the same name.
    """
    mapping = dict(mapping or {})
    concepts = []
    for label in vocab.labels:
        c = mapping.get(label, label)
        if c not in tax:
            raise UnmappedLabel(label)
        concepts.append(c)

    edges = []
    n = len(concepts)
    for i in range(n):
        for j in range(i + 1, n):
            ci, cj = concepts[i], concepts[j]
            if tax.is_ancestor(ci, cj):
                edges.append(Edge(i, j, EdgeKind.SUPER_SUB))
                continue
            if tax.is_ancestor(cj, ci):
                edges.append(Edge(j, i, EdgeKind.SUPER_SUB))
                continue
            s = wup_similarity(tax, ci, cj)
            if s is None:
                continue
            if s >= cfg.theta_pos:
                edges.append(Edge(i, j, EdgeKind.POSITIVE))
            elif s <= cfg.theta_neg:
                edges.append(Edge(i, j, EdgeKind.NEGATIVE))
    return TypedGraph(n, edges)


def adjacency_blocks(g: TypedGraph, receiver: int) -> list[tuple[int, EdgeKind]]:
    """Neighbours of ``receiver`` with the connecting edge kind, sorted by index."""
    if not 0 <= receiver < g.node_count:
        raise IndexOutOfRange(f"node {receiver} outside [0, {g.node_count})")
    return list(g._adj[receiver])


def load_mapping(path) -> dict[str, str]:
    """``label<TAB>concept`` per line."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if raw.strip():
            label, concept = raw.split("\t")
            out[label.strip()] = concept.strip()
    return out
