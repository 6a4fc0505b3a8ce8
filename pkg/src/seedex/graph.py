"""Typed knowledge-graph storage, adjacency indexes and induced subgraphs.

On-disk layout (all UTF-8, tab separated, one record per line)::

    nodes.tsv      external_id <TAB> type_name <TAB> text
    edges.tsv      external_src <TAB> relation_name <TAB> external_dst
    manifest.json  {"node_types": [...], "relations": [...]}

Text fields escape backslash, tab and newline as ``\\\\``, ``\\t`` and ``\\n``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ReferentialIntegrityError

logger = logging.getLogger(__name__)

DIRECTIONS = ("out", "in", "both")


@dataclass(frozen=True)
class NodeRecord:
    id: int
    type_id: int
    text: str


def escape_field(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def unescape_field(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, "\\" + nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _csr(keys: np.ndarray, rel: np.ndarray, other: np.ndarray, n: int):
    # sort by (key, rel, other) so each row is ordered by rel-id then neighbor-id
    order = np.lexsort((other, rel, keys))
    counts = np.bincount(keys, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, rel[order], other[order], order


class TypedGraph:
    """Immutable typed multigraph with dense integer node ids.

    Parallel edges are kept as distinct entries. ``out_offsets``/``out_rel``/
    ``out_nbr`` form a CSR index over outgoing edges (``in_*`` likewise for
    incoming), each row sorted by relation id then neighbor id.
    """

    def __init__(
        self,
        node_types: Sequence[str],
        relations: Sequence[str],
        type_ids: Sequence[int],
        texts: Sequence[str],
        edges: np.ndarray | Sequence[tuple[int, int, int]],
        external_ids: Sequence[str] | None = None,
    ):
        self.node_types = tuple(node_types)
        self.relations = tuple(relations)
        self.type_ids = np.asarray(type_ids, dtype=np.int64).reshape(-1)
        self.texts = tuple(texts)
        n = len(self.type_ids)
        if len(self.texts) != n:
            raise ValueError("texts and type_ids differ in length")
        if external_ids is None:
            external_ids = [str(i) for i in range(n)]
        self.external_ids = tuple(external_ids)
        if len(self.external_ids) != n:
            raise ValueError("external_ids and type_ids differ in length")
        if n and (self.type_ids.min() < 0 or self.type_ids.max() >= len(self.node_types)):
            raise ReferentialIntegrityError("node type id out of range")

        e = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
        self.src = e[:, 0].copy()
        self.rel = e[:, 1].copy()
        self.dst = e[:, 2].copy()
        for arr in (self.src, self.rel, self.dst):
            arr.setflags(write=False)
        if len(e):
            if min(self.src.min(), self.dst.min()) < 0 or max(self.src.max(), self.dst.max()) >= n:
                raise ReferentialIntegrityError("edge endpoint out of range")
            if self.rel.min() < 0 or self.rel.max() >= len(self.relations):
                raise ReferentialIntegrityError("edge relation id out of range")

        self.out_offsets, self.out_rel, self.out_nbr, self.out_edge = _csr(self.src, self.rel, self.dst, n)
        self.in_offsets, self.in_rel, self.in_nbr, self.in_edge = _csr(self.dst, self.rel, self.src, n)
        self.type_ids.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.type_ids)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> list[tuple[int, int, int]]:
        return list(zip(self.src.tolist(), self.rel.tolist(), self.dst.tolist()))

    @cached_property
    def external_index(self) -> dict[str, int]:
        return {ext: i for i, ext in enumerate(self.external_ids)}

    def node(self, v: int) -> NodeRecord:
        self._check(v)
        return NodeRecord(int(v), int(self.type_ids[v]), self.texts[v])

    @property
    def nodes(self) -> list[NodeRecord]:
        return [NodeRecord(i, int(t), s) for i, (t, s) in enumerate(zip(self.type_ids, self.texts))]

    def out_degree(self) -> np.ndarray:
        return np.diff(self.out_offsets)

    def in_degree(self) -> np.ndarray:
        return np.diff(self.in_offsets)

    def _check(self, v: int) -> None:
        if not 0 <= int(v) < self.num_nodes:
            raise IndexError(f"node id {v} out of range [0, {self.num_nodes})")

    def neighbors(self, v: int, direction: str = "out") -> list[tuple[int, int]]:
        """Incident ``(rel_id, node_id)`` pairs, ordered by relation then neighbor."""
        self._check(v)
        if direction == "out":
            a, b = self.out_offsets[v], self.out_offsets[v + 1]
            return list(zip(self.out_rel[a:b].tolist(), self.out_nbr[a:b].tolist()))
        if direction == "in":
            a, b = self.in_offsets[v], self.in_offsets[v + 1]
            return list(zip(self.in_rel[a:b].tolist(), self.in_nbr[a:b].tolist()))
        if direction == "both":
            return sorted(self.neighbors(v, "out") + self.neighbors(v, "in"))
        raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")

    def neighbor_ids(self, v: int, direction: str = "out") -> np.ndarray:
        """Neighbor node ids only (with repeats for parallel edges)."""
        if direction == "out":
            return self.out_nbr[self.out_offsets[v]:self.out_offsets[v + 1]]
        if direction == "in":
            return self.in_nbr[self.in_offsets[v]:self.in_offsets[v + 1]]
        return np.concatenate([self.neighbor_ids(v, "out"), self.neighbor_ids(v, "in")])

    def incident_edges(self, v: int, direction: str = "out") -> np.ndarray:
        """Edge indices into ``src/rel/dst`` incident to ``v``."""
        if direction == "out":
            return self.out_edge[self.out_offsets[v]:self.out_offsets[v + 1]]
        if direction == "in":
            return self.in_edge[self.in_offsets[v]:self.in_offsets[v + 1]]
        return np.concatenate([self.incident_edges(v, "out"), self.incident_edges(v, "in")])

    def induced_subgraph(self, members: Iterable[int]) -> "SubgraphView":
        return SubgraphView(self, members)

    def __repr__(self) -> str:
        return (f"TypedGraph(nodes={self.num_nodes}, edges={self.num_edges}, "
                f"types={len(self.node_types)}, relations={len(self.relations)})")


class SubgraphView:
    """Ordered member subset of a parent graph; induced edges computed lazily."""

    def __init__(self, parent: TypedGraph, members: Iterable[int]):
        self.parent = parent
        m = np.fromiter((int(v) for v in members), dtype=np.int64)
        if len(m) and (m.min() < 0 or m.max() >= parent.num_nodes):
            bad = m[(m < 0) | (m >= parent.num_nodes)][0]
            raise IndexError(f"member {bad} out of range")
        if len(np.unique(m)) != len(m):
            raise ValueError("duplicate members in subgraph")
        m.setflags(write=False)
        self.members = m

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, v) -> bool:
        return int(v) in self.local_index

    @cached_property
    def local_index(self) -> dict[int, int]:
        return {int(v): i for i, v in enumerate(self.members)}

    @cached_property
    def _mask(self) -> np.ndarray:
        mask = np.zeros(self.parent.num_nodes, dtype=bool)
        mask[self.members] = True
        return mask

    @cached_property
    def edge_ids(self) -> np.ndarray:
        """Indices of parent edges with both endpoints inside the view."""
        p = self.parent
        if not len(self.members):
            return np.zeros(0, dtype=np.int64)
        cand = np.concatenate([p.incident_edges(v, "out") for v in self.members])
        cand = np.sort(cand)
        return cand[self._mask[p.dst[cand]]]

    @property
    def edges(self) -> list[tuple[int, int, int]]:
        p = self.parent
        e = self.edge_ids
        return list(zip(p.src[e].tolist(), p.rel[e].tolist(), p.dst[e].tolist()))

    def local_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Induced edges as (src, rel, dst) arrays in member-local indices."""
        p = self.parent
        e = self.edge_ids
        pos = np.full(p.num_nodes, -1, dtype=np.int64)
        pos[self.members] = np.arange(len(self.members))
        return pos[p.src[e]], p.rel[e].copy(), pos[p.dst[e]]

    def neighbors(self, v: int, direction: str = "out") -> list[tuple[int, int]]:
        if v not in self:
            raise IndexError(f"node {v} not in subgraph")
        return [(r, u) for r, u in self.parent.neighbors(v, direction) if self._mask[u]]

    def induced_subgraph(self, members: Iterable[int]) -> "SubgraphView":
        members = list(members)
        for v in members:
            if v not in self:
                raise IndexError(f"node {v} not in subgraph")
        return SubgraphView(self.parent, members)


def neighbors(g: TypedGraph, v: int, direction: str = "out") -> list[tuple[int, int]]:
    return g.neighbors(v, direction)


def induced_subgraph(g: TypedGraph, members: Iterable[int]) -> SubgraphView:
    return SubgraphView(g, members)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def _read_records(path: Path, width: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != width:
                raise FormatError(f"expected {width} tab-separated fields, got {len(parts)}", path, lineno)
            yield lineno, [unescape_field(p) for p in parts]


def load_graph(nodes_path, edges_path, manifest_path=None, dedup: bool = False) -> TypedGraph:
    """Parse a graph from node/edge TSV files.

    If ``manifest_path`` is omitted, ``manifest.json`` next to the nodes file is
    used when present; otherwise vocabularies are assigned in first-seen order.
    """
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    if manifest_path is None:
        guess = nodes_path.with_name("manifest.json")
        manifest_path = guess if guess.exists() else None
    node_types: list[str] = []
    relations: list[str] = []
    fixed_vocab = False
    if manifest_path is not None:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        node_types = list(manifest["node_types"])
        relations = list(manifest["relations"])
        fixed_vocab = True
    type_index = {t: i for i, t in enumerate(node_types)}
    rel_index = {r: i for i, r in enumerate(relations)}

    ext_ids, type_ids, texts = [], [], []
    ext_index: dict[str, int] = {}
    for lineno, (ext, tname, text) in _read_records(nodes_path, 3):
        if ext in ext_index:
            raise FormatError(f"duplicate node id {ext!r}", nodes_path, lineno)
        if tname not in type_index:
            if fixed_vocab:
                raise FormatError(f"node type {tname!r} missing from manifest", nodes_path, lineno)
            type_index[tname] = len(node_types)
            node_types.append(tname)
        ext_index[ext] = len(ext_ids)
        ext_ids.append(ext)
        type_ids.append(type_index[tname])
        texts.append(text)

    edges = []
    seen = set()
    for lineno, (s, rname, d) in _read_records(edges_path, 3):
        if rname not in rel_index:
            if fixed_vocab:
                raise FormatError(f"relation {rname!r} missing from manifest", edges_path, lineno)
            rel_index[rname] = len(relations)
            relations.append(rname)
        for end in (s, d):
            if end not in ext_index:
                raise ReferentialIntegrityError(f"{edges_path}:{lineno}: unknown node id {end!r}")
        e = (ext_index[s], rel_index[rname], ext_index[d])
        if dedup:
            if e in seen:
                continue
            seen.add(e)
        edges.append(e)

    g = TypedGraph(node_types, relations, type_ids, texts, edges, ext_ids)
    logger.info("loaded %r", g)
    return g


def save_graph(g: TypedGraph, directory) -> dict[str, Path]:
    """Write ``nodes.tsv``, ``edges.tsv`` and ``manifest.json`` into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "nodes": directory / "nodes.tsv",
        "edges": directory / "edges.tsv",
        "manifest": directory / "manifest.json",
    }
    with open(paths["nodes"], "w", encoding="utf-8", newline="\n") as fh:
        for ext, t, text in zip(g.external_ids, g.type_ids.tolist(), g.texts):
            fh.write(f"{escape_field(ext)}\t{escape_field(g.node_types[t])}\t{escape_field(text)}\n")
    with open(paths["edges"], "w", encoding="utf-8", newline="\n") as fh:
        for s, r, d in zip(g.src.tolist(), g.rel.tolist(), g.dst.tolist()):
            fh.write(f"{escape_field(g.external_ids[s])}\t{escape_field(g.relations[r])}\t"
                     f"{escape_field(g.external_ids[d])}\n")
    with open(paths["manifest"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"node_types": list(g.node_types), "relations": list(g.relations)}, fh, indent=2)
        fh.write("\n")
    return paths
