"""Generic e-graph: hash-consed e-nodes grouped into e-classes by a union-find.

An e-class is a set of e-nodes that compute the same value; an e-node is an
operator application whose children are e-classes. Rule application only ever
adds nodes or merges classes, so the set of terms representable from the root
never shrinks. After a batch of unions, rebuild() restores the congruence
invariant: two e-nodes with the same symbol and the same canonical children
always live in the same e-class.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Optional


class StructuralError(ValueError):
    """Malformed e-graph operation: unknown class id, arity mismatch, bad payload."""


def _check_payload(payload: Any) -> None:
    # floats are forbidden: payloads participate in hashing and must compare bit-exactly
    if payload is None or isinstance(payload, (int, str)):
        return
    if isinstance(payload, tuple):
        for item in payload:
            _check_payload(item)
        return
    raise StructuralError(f"unsupported symbol payload: {payload!r}")


@dataclass(frozen=True)
class Symbol:
    """Operator/constant/variable symbol. Arity is fixed per (name, payload) pair."""

    name: str
    arity: int
    payload: Any = None

    def __post_init__(self) -> None:
        if self.arity < 0:
            raise StructuralError("negative arity")
        _check_payload(self.payload)

    def key(self) -> tuple:
        return (self.name, self.arity, repr(self.payload))


@dataclass(frozen=True)
class ENode:
    """Symbol application over e-class children (length must equal symbol arity)."""

    symbol: Symbol
    children: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(self.children) != self.symbol.arity:
            raise StructuralError(
                f"arity mismatch for {self.symbol.name}: "
                f"expected {self.symbol.arity}, got {len(self.children)}"
            )

    def key(self) -> tuple:
        return (self.symbol.name, repr(self.symbol.payload), self.children)


def node_sort_key(node: ENode) -> tuple:
    return node.key()


@dataclass
class EClass:
    id: int
    nodes: set[ENode] = field(default_factory=set)
    parents: set[tuple[ENode, int]] = field(default_factory=set)


class UnionFind:
    """Disjoint sets over dense integer ids; ranked union, rank ties go to the lower id."""

    def __init__(self) -> None:
        self.parent: list[int] = []
        self.rank: list[int] = []

    def make(self) -> int:
        idx = len(self.parent)
        self.parent.append(idx)
        self.rank.append(0)
        return idx

    def find(self, x: int) -> int:
        if x < 0 or x >= len(self.parent):
            raise StructuralError(f"unknown e-class id {x}")
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> tuple[int, int]:
        """Union the sets of a and b; returns (winner, loser) roots."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra, ra
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        elif self.rank[ra] == self.rank[rb]:
            if rb < ra:
                ra, rb = rb, ra
            self.rank[ra] += 1
        self.parent[rb] = ra
        return ra, rb

    def copy(self) -> "UnionFind":
        uf = UnionFind()
        uf.parent = list(self.parent)
        uf.rank = list(self.rank)
        return uf


def _stable_hash(*parts: Any) -> int:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


class EGraph:
    """Mutable e-graph. Single-writer; snapshots are fully independent copies."""

    def __init__(self, language: Any = None) -> None:
        self._uf = UnionFind()
        self.classes: dict[int, EClass] = {}
        self.hashcons: dict[ENode, int] = {}
        self.root: Optional[int] = None
        self.dirty: list[int] = []
        self.language = language
        self._version = 0
        self._fp_cache: Optional[tuple[int, int]] = None  # (version, fingerprint)

    # -- basic queries ------------------------------------------------------

    def find(self, cid: int) -> int:
        return self._uf.find(cid)

    def canonicalize(self, node: ENode) -> ENode:
        return ENode(node.symbol, tuple(self._uf.find(c) for c in node.children))

    def canonical_root(self) -> int:
        if self.root is None:
            raise StructuralError("e-graph has no root")
        return self._uf.find(self.root)

    def canonical_class_ids(self) -> list[int]:
        return sorted(self.classes)

    def enodes(self) -> Iterator[tuple[int, ENode]]:
        for cid in self.canonical_class_ids():
            for node in sorted(self.classes[cid].nodes, key=node_sort_key):
                yield cid, node

    @property
    def version(self) -> int:
        return self._version

    def is_clean(self) -> bool:
        return not self.dirty

    # -- construction -------------------------------------------------------

    def add(self, node: ENode) -> int:
        """Insert an e-node, returning its e-class (existing class on a hash-cons hit)."""
        canon = self.canonicalize(node)  # find() validates the child ids
        existing = self.hashcons.get(canon)
        if existing is not None:
            return self._uf.find(existing)
        cid = self._uf.make()
        self.classes[cid] = EClass(cid, {canon})
        self.hashcons[canon] = cid
        for child in set(canon.children):
            self.classes[self._uf.find(child)].parents.add((canon, cid))
        self._version += 1
        return cid

    def union(self, a: int, b: int) -> int:
        """Merge two e-classes, marking the survivor dirty; no-op when already equal."""
        ra, rb = self._uf.find(a), self._uf.find(b)
        if ra == rb:
            return ra
        winner, loser = self._uf.union(ra, rb)
        lost = self.classes.pop(loser)
        kept = self.classes[winner]
        kept.nodes |= lost.nodes
        kept.parents |= lost.parents
        self.dirty.append(winner)
        self._version += 1
        return winner

    def rebuild(self) -> int:
        """Restore the congruence invariant; returns the number of merges performed."""
        total = 0
        while True:
            self.dirty.clear()
            merged = False
            canon_map: dict[ENode, int] = {}
            for node, cid in self.hashcons.items():
                n = self.canonicalize(node)
                c = self._uf.find(cid)
                prev = canon_map.get(n)
                if prev is None:
                    canon_map[n] = c
                elif self._uf.find(prev) != c:
                    winner, _ = self._uf.union(self._uf.find(prev), c)
                    canon_map[n] = winner
                    merged = True
                    total += 1
                    self._version += 1
            self.hashcons = {n: self._uf.find(c) for n, c in canon_map.items()}
            self._regroup()
            if not merged:
                break
        return total

    def _regroup(self) -> None:
        groups: dict[int, set[ENode]] = defaultdict(set)
        parents: dict[int, set[tuple[ENode, int]]] = defaultdict(set)
        for node, cid in self.hashcons.items():
            groups[cid].add(node)
        for node, cid in self.hashcons.items():
            for child in set(node.children):
                parents[self._uf.find(child)].add((node, cid))
        self.classes = {
            cid: EClass(cid, nodes, parents.get(cid, set())) for cid, nodes in groups.items()
        }

    # -- measurements -------------------------------------------------------

    def size(self) -> tuple[int, int]:
        """(number of e-nodes, number of e-classes) over canonical classes."""
        n_nodes = sum(len(c.nodes) for c in self.classes.values())
        return n_nodes, len(self.classes)

    def fingerprint(self) -> int:
        """Canonical 64-bit hash, invariant under insertion order of congruent content.

        Computed by Weisfeiler-Lehman-style refinement over class labels, so two
        differently-numbered but structurally identical e-graphs hash equally.
        Requires a rebuilt graph.
        """
        if self.dirty:
            raise StructuralError("fingerprint requires a rebuilt e-graph")
        if self._fp_cache is not None and self._fp_cache[0] == self._version:
            return self._fp_cache[1]

        labels = {
            cid: _stable_hash(sorted(n.symbol.key() for n in cls.nodes))
            for cid, cls in self.classes.items()
        }
        prev_partition: Optional[dict[int, int]] = None
        for _ in range(max(1, len(self.classes))):
            new_labels = {}
            for cid, cls in self.classes.items():
                descr = sorted(
                    (n.symbol.key(), tuple(labels[self._uf.find(c)] for c in n.children))
                    for n in cls.nodes
                )
                new_labels[cid] = _stable_hash(descr)
            # stop once the induced partition stabilizes
            buckets: dict[int, list[int]] = defaultdict(list)
            for cid, lab in new_labels.items():
                buckets[lab].append(cid)
            partition = {}
            for members in buckets.values():
                rep = min(members)
                for cid in members:
                    partition[cid] = rep
            labels = new_labels
            if partition == prev_partition:
                break
            prev_partition = partition

        body = sorted(
            sorted(
                (n.symbol.key(), tuple(labels[self._uf.find(c)] for c in n.children))
                for n in cls.nodes
            )
            for cls in self.classes.values()
        )
        root_label = labels[self.canonical_root()] if self.root is not None else None
        fp = _stable_hash(body, root_label)
        self._fp_cache = (self._version, fp)
        return fp

    # -- copies --------------------------------------------------------------

    def snapshot(self) -> "EGraph":
        """Deep, independent copy; mutating the copy never affects the original."""
        g = EGraph(self.language)
        g._uf = self._uf.copy()
        g.classes = {
            cid: EClass(cid, set(c.nodes), set(c.parents)) for cid, c in self.classes.items()
        }
        g.hashcons = dict(self.hashcons)
        g.root = self.root
        g.dirty = list(self.dirty)
        g._version = self._version
        g._fp_cache = self._fp_cache
        return g

    # -- rendering -----------------------------------------------------------

    def dump(self) -> str:
        """Deterministic text rendering, one e-class per line, sorted by canonical id."""
        lines = []
        for cid in self.canonical_class_ids():
            rendered = []
            for node in sorted(self.classes[cid].nodes, key=node_sort_key):
                args = ",".join(f"ec{self._uf.find(c)}" for c in node.children)
                text = f"{node.symbol.name}({args})" if node.children else node.symbol.name
                if node.symbol.payload is not None:
                    text += f"#{node.symbol.payload!r}"
                rendered.append(text)
            marker = " <root>" if self.root is not None and self.canonical_root() == cid else ""
            lines.append(f"ec{cid}: " + " | ".join(rendered) + marker)
        return "\n".join(lines)

    def to_dot(self) -> str:
        """GraphViz rendering: rectangles for e-classes, circles for e-nodes."""
        out = ["digraph egraph {", "  compound=true;", "  node [shape=circle];"]
        node_ids = {}
        for idx, (cid, node) in enumerate(self.enodes()):
            node_ids[(cid, node)] = f"n{idx}"
        for cid in self.canonical_class_ids():
            out.append(f"  subgraph cluster_{cid} {{")
            out.append(f'    label="ec{cid}"; style=dashed;')
            for node in sorted(self.classes[cid].nodes, key=node_sort_key):
                out.append(f'    {node_ids[(cid, node)]} [label="{node.symbol.name}"];')
            out.append("  }")
        for cid in self.canonical_class_ids():
            for node in sorted(self.classes[cid].nodes, key=node_sort_key):
                src = node_ids[(cid, node)]
                for child in node.children:
                    ch = self._uf.find(child)
                    target_nodes = sorted(self.classes[ch].nodes, key=node_sort_key)
                    if target_nodes:
                        anchor = node_ids[(ch, target_nodes[0])]
                        out.append(f"  {src} -> {anchor} [lhead=cluster_{ch}];")
        out.append("}")
        return "\n".join(out)
