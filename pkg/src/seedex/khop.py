"""Budgeted frontier expansion ("K-hop with filtering").

Each candidate ``u`` adjacent to the current frontier is scored as

    score(u) = sim(q,u)/3 + max over edges v -r-> u with v in frontier of
               [sim(q,v)/3 + sim(q,r)/3]

and only the best ``b_h`` candidates of hop ``h`` survive to become the next
frontier. With ``joint=False`` the source and relation terms are maximised
independently instead of over a single edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .embed import EmbeddingTable, cosine_scores
from .graph import SubgraphView, TypedGraph


@dataclass(frozen=True)
class ExpansionBudget:
    per_hop: tuple[int, ...]
    total_cap: int | None = None

    def __post_init__(self):
        per_hop = tuple(int(b) for b in self.per_hop)
        if not per_hop or any(b < 1 for b in per_hop):
            raise ValueError(f"per-hop budgets must all be >= 1, got {per_hop}")
        if self.total_cap is not None and self.total_cap < sum(per_hop):
            raise ValueError(f"total_cap {self.total_cap} below sum of per-hop budgets {sum(per_hop)}")
        object.__setattr__(self, "per_hop", per_hop)

    @classmethod
    def parse(cls, text: str, total_cap: int | None = None) -> "ExpansionBudget":
        """Parse ``"7,10"`` style budgets."""
        try:
            values = [int(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise ValueError(f"budgets must be comma-separated integers, got {text!r}") from None
        return cls(tuple(values), total_cap)

    @property
    def total(self) -> int:
        return sum(self.per_hop)


@dataclass(frozen=True)
class FrontierCandidate:
    node: int
    score: float
    best_source: int
    best_rel: int


@dataclass
class QuerySims:
    """Cosine similarities of one query against all nodes and relations."""

    node: np.ndarray
    rel: np.ndarray

    @classmethod
    def compute(cls, emb: EmbeddingTable, rel_emb: EmbeddingTable, q) -> "QuerySims":
        return cls(cosine_scores(emb, q), cosine_scores(rel_emb, q))


def _frontier_edges(g: TypedGraph, frontier: np.ndarray, direction: str):
    """(source, rel, candidate) triples for edges leaving the frontier."""
    parts_src, parts_rel, parts_dst = [], [], []
    if direction in ("out", "both"):
        e = np.concatenate([g.incident_edges(v, "out") for v in frontier]) if len(frontier) else np.zeros(0, np.int64)
        parts_src.append(g.src[e]); parts_rel.append(g.rel[e]); parts_dst.append(g.dst[e])
    if direction in ("in", "both"):
        e = np.concatenate([g.incident_edges(v, "in") for v in frontier]) if len(frontier) else np.zeros(0, np.int64)
        parts_src.append(g.dst[e]); parts_rel.append(g.rel[e]); parts_dst.append(g.src[e])
    if direction not in ("out", "in", "both"):
        raise ValueError(f"unknown direction {direction!r}")
    return np.concatenate(parts_src), np.concatenate(parts_rel), np.concatenate(parts_dst)


def score_frontier(g: TypedGraph, emb: EmbeddingTable | None, rel_emb: EmbeddingTable | None, q,
                   frontier: Iterable[int], selected: Iterable[int], *, direction: str = "out",
                   joint: bool = True, sims: QuerySims | None = None) -> list[FrontierCandidate]:
    """Score every unselected neighbor of ``frontier``; sorted by node id."""
    if sims is None:
        sims = QuerySims.compute(emb, rel_emb, q)
    frontier = np.unique(np.fromiter((int(v) for v in frontier), dtype=np.int64))
    sel = np.zeros(g.num_nodes, dtype=bool)
    sel[np.fromiter((int(v) for v in selected), dtype=np.int64)] = True
    src, rel, cand = _frontier_edges(g, frontier, direction)
    keep = ~sel[cand]
    src, rel, cand = src[keep], rel[keep], cand[keep]
    if not len(cand):
        return []
    vs, rs = sims.node[src] / 3.0, sims.rel[rel] / 3.0
    if joint:
        val = vs + rs
        # per candidate: highest value, ties to lowest source then relation
        order = np.lexsort((rel, src, -val, cand))
        first = np.ones(len(order), dtype=bool)
        first[1:] = cand[order][1:] != cand[order][:-1]
        pick = order[first]
        return [FrontierCandidate(int(u), float(sims.node[u] / 3.0 + val[i]), int(src[i]), int(rel[i]))
                for u, i in zip(cand[pick], pick)]
    out = []
    order = np.argsort(cand, kind="stable")
    cand_s = cand[order]
    bounds = np.flatnonzero(np.r_[True, cand_s[1:] != cand_s[:-1], True])
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        iv = idx[np.lexsort((src[idx], -vs[idx]))[0]]
        ir = idx[np.lexsort((rel[idx], -rs[idx]))[0]]
        u = int(cand_s[a])
        out.append(FrontierCandidate(u, float(sims.node[u] / 3.0 + vs[iv] + rs[ir]), int(src[iv]), int(rel[ir])))
    return out


@dataclass
class KhopTrace:
    nodes: list[int]
    hops: list[int]          # 0 for seeds
    scores: list[float]      # filter score when kept; +inf for seeds


def khop_trace(g: TypedGraph, emb: EmbeddingTable | None, rel_emb: EmbeddingTable | None, q,
               seeds: Sequence[int], budget: ExpansionBudget, *, direction: str = "out",
               joint: bool = True, sims: QuerySims | None = None) -> KhopTrace:
    """Like :func:`khop_filter` but also reports each node's hop and filter score."""
    if not len(seeds):
        raise ValueError("at least one seed is required")
    if sims is None:
        sims = QuerySims.compute(emb, rel_emb, q)
    out: list[int] = []
    hops: list[int] = []
    scores: list[float] = []
    seen: set[int] = set()
    for s in seeds:
        s = int(s)
        if s not in seen:
            seen.add(s)
            out.append(s)
            hops.append(0)
            scores.append(float("inf"))
    frontier = list(out)
    room = budget.total_cap
    for h, b in enumerate(budget.per_hop, start=1):
        cands = score_frontier(g, None, None, None, frontier, seen, direction=direction, joint=joint, sims=sims)
        if not cands:
            break
        if room is not None:
            b = min(b, room)
        cands.sort(key=lambda c: (-c.score, c.node))
        kept = cands[:b]
        out.extend(c.node for c in kept)
        hops.extend([h] * len(kept))
        scores.extend(c.score for c in kept)
        seen.update(c.node for c in kept)
        frontier = [c.node for c in kept]
        if room is not None:
            room -= len(kept)
            if room <= 0:
                break
    return KhopTrace(out, hops, scores)


def khop_filter(g: TypedGraph, emb: EmbeddingTable | None, rel_emb: EmbeddingTable | None, q,
                seeds: Sequence[int], budget: ExpansionBudget, *, direction: str = "out",
                joint: bool = True, sims: QuerySims | None = None,
                return_hops: bool = False):
    """Seeds followed by the nodes kept at each hop (hop order, then score order).

    Stops early, forfeiting the remaining budgets, once no candidates remain.
    With ``return_hops`` a parallel list of hop indices (0 for seeds) is returned too.
    """
    t = khop_trace(g, emb, rel_emb, q, seeds, budget, direction=direction, joint=joint, sims=sims)
    return (t.nodes, t.hops) if return_hops else t.nodes


def extract_query_subgraph(g: TypedGraph, emb: EmbeddingTable | None, rel_emb: EmbeddingTable | None, q,
                           seeds: Sequence[int], budget: ExpansionBudget, **kwargs) -> SubgraphView:
    return SubgraphView(g, khop_filter(g, emb, rel_emb, q, seeds, budget, **kwargs))


def uniform_khop_sizes(g: TypedGraph, seeds: Sequence[int], hops: int, direction: str = "out") -> list[int]:
    """Size of the unfiltered neighborhood after 0..hops hops (growth diagnostic)."""
    reached = np.zeros(g.num_nodes, dtype=bool)
    frontier = np.unique(np.asarray(seeds, dtype=np.int64))
    reached[frontier] = True
    sizes = [int(reached.sum())]
    for _ in range(hops):
        if not len(frontier):
            sizes.append(sizes[-1])
            continue
        nbrs = np.unique(np.concatenate([g.neighbor_ids(v, direction) for v in frontier]))
        frontier = nbrs[~reached[nbrs]]
        reached[frontier] = True
        sizes.append(int(reached.sum()))
    return sizes
