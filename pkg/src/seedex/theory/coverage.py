"""Coverage objectives under a reachability (frontier) constraint.

F(S) = |union of C(v) for v in S|. A feasible set contains the seeds, adds at
most ``budget`` nodes, and is built one frontier node at a time. Frontier
greedy can be arbitrarily bad here; the frontier-aware bound
(1 - exp(-alpha * beta)) holds when alpha and beta are measured along the
policy's own trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# at most 2^15 reachable sets, so no separate budget cap is needed
MAX_EXHAUSTIVE_NODES = 15


@dataclass
class CoverageInstance:
    num_nodes: int
    adjacency: list[frozenset[int]]      # undirected neighbor sets
    covers: list[frozenset[int]]         # C(v)
    seeds: frozenset[int]
    budget: int
    labels: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.adjacency) != self.num_nodes or len(self.covers) != self.num_nodes:
            raise ValueError("adjacency and covers need one entry per node")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")

    @classmethod
    def from_edges(cls, num_nodes: int, edges, covers, seeds, budget: int, labels=None) -> "CoverageInstance":
        adj: list[set[int]] = [set() for _ in range(num_nodes)]
        for u, v in edges:
            if u != v:
                adj[u].add(v)
                adj[v].add(u)
        return cls(num_nodes, [frozenset(a) for a in adj], [frozenset(c) for c in covers],
                   frozenset(seeds), budget, dict(labels or {}))

    def value(self, S) -> int:
        units: set[int] = set()
        for v in S:
            units |= self.covers[v]
        return len(units)

    def gain(self, v: int, S, covered: set[int] | None = None) -> int:
        if covered is None:
            covered = set().union(*(self.covers[u] for u in S)) if S else set()
        return len(self.covers[v] - covered)

    def frontier(self, S) -> set[int]:
        out: set[int] = set()
        for v in S:
            out |= self.adjacency[v]
        return out - set(S)


def is_feasible(inst: CoverageInstance, order: Sequence[int]) -> bool:
    """Replays a construction order: every addition must be a frontier node of the current set."""
    S = set(inst.seeds)
    if len(order) > inst.budget or len(set(order)) != len(order):
        return False
    for v in order:
        if v in S or v not in inst.frontier(S):
            return False
        S.add(v)
    return True


@dataclass
class SearchResult:
    order: list[int]          # additions in construction order
    nodes: frozenset[int]     # seeds plus additions
    value: int
    gains: list[int] = field(default_factory=list)
    best_gains: list[int] = field(default_factory=list)


def frontier_greedy(inst: CoverageInstance) -> SearchResult:
    """Adds the frontier node of largest marginal gain (ties: lowest id) until the budget is spent."""
    return alpha_greedy(inst, 1.0)


def alpha_greedy(inst: CoverageInstance, alpha: float, rng: np.random.Generator | None = None) -> SearchResult:
    """Picks any frontier node whose gain is at least ``alpha`` times the best gain.

    Deterministic by default: the qualifying node with the smallest gain
    (lowest id on ties), the worst choice the condition allows. With ``rng``
    the pick is uniform over qualifying nodes.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    S = set(inst.seeds)
    covered = set().union(*(inst.covers[v] for v in S))
    order, gains, best = [], [], []
    for _ in range(inst.budget):
        front = sorted(inst.frontier(S))
        if not front:
            break
        g = {u: len(inst.covers[u] - covered) for u in front}
        top = max(g.values())
        ok = [u for u in front if g[u] >= alpha * top - 1e-12]
        if alpha == 1.0:
            pick = ok[0]
        elif rng is not None:
            pick = ok[int(rng.integers(len(ok)))]
        else:
            pick = min(ok, key=lambda u: (g[u], u))
        order.append(pick)
        gains.append(g[pick])
        best.append(top)
        S.add(pick)
        covered |= inst.covers[pick]
    return SearchResult(order, frozenset(S), len(covered), gains, best)


def exhaustive_optimal(inst: CoverageInstance) -> SearchResult:
    """Best feasible set by enumerating every reachable set (small instances only)."""
    if inst.num_nodes > MAX_EXHAUSTIVE_NODES:
        raise ValueError(f"exhaustive search refused: {inst.num_nodes} nodes > {MAX_EXHAUSTIVE_NODES}")
    start = frozenset(inst.seeds)
    best_set, best_val = start, inst.value(start)
    parent: dict[frozenset, tuple[frozenset, int] | None] = {start: None}
    layer = [start]
    for _ in range(inst.budget):
        nxt = []
        for S in layer:
            for u in sorted(inst.frontier(S)):
                T = S | {u}
                if T not in parent:
                    parent[T] = (S, u)
                    nxt.append(T)
                    val = inst.value(T)
                    if val > best_val:
                        best_set, best_val = T, val
        layer = nxt
    order = []
    cur = best_set
    while parent[cur] is not None:
        prev, u = parent[cur]
        order.append(u)
        cur = prev
    order.reverse()
    return SearchResult(order, best_set, best_val)


def coverage_search(inst: CoverageInstance, policy: str = "frontier_greedy", alpha: float = 1.0,
                    rng: np.random.Generator | None = None) -> tuple[frozenset[int], int]:
    if policy == "frontier_greedy":
        res = frontier_greedy(inst)
    elif policy == "exhaustive_optimal":
        res = exhaustive_optimal(inst)
    elif policy == "alpha_greedy":
        res = alpha_greedy(inst, alpha, rng)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return res.nodes, res.value


def build_greedy_counterexample(B: int, L: int, M: int, budget: int | None = None) -> CoverageInstance:
    """Seed s; B unit-gain neighbors of s; a zero-gain path of L connectors from s to a terminal worth M.

    Node layout: 0 = seed, 1..B = unit nodes, B+1..B+L = connectors, B+L+1 = terminal.
    The budget defaults to B additions.
    """
    if not (M > B >= 1 and L >= 1):
        raise ValueError("need M > B >= 1 and L >= 1")
    budget = B if budget is None else budget
    if budget < L + 1:
        raise ValueError(f"budget {budget} cannot reach the terminal (needs {L + 1})")
    n = B + L + 2
    edges = [(0, i) for i in range(1, B + 1)]
    path = [0] + list(range(B + 1, B + L + 1)) + [B + L + 1]
    edges += list(zip(path[:-1], path[1:]))
    covers: list[set[int]] = [set() for _ in range(n)]
    for i in range(1, B + 1):
        covers[i] = {i - 1}
    covers[B + L + 1] = set(range(B, B + M))
    labels = {0: "seed", **{i: f"unit{i}" for i in range(1, B + 1)},
              **{B + j: f"connector{j}" for j in range(1, L + 1)}, B + L + 1: "terminal"}
    return CoverageInstance.from_edges(n, edges, covers, {0}, budget, labels)


def optimal_value_counterexample(B: int, L: int, M: int, budget: int | None = None) -> int:
    """Closed form of the best feasible value on the counterexample (terminal plus leftover units)."""
    budget = B if budget is None else budget
    return max(min(budget, B), M + min(B, budget - L - 1))


def greedy_gap(B: int, L: int, M: int) -> dict:
    inst = build_greedy_counterexample(B, L, M)
    greedy = frontier_greedy(inst)
    if inst.num_nodes <= MAX_EXHAUSTIVE_NODES:
        opt = exhaustive_optimal(inst)
        opt_val, method = opt.value, "exhaustive"
    else:
        opt_val, method = optimal_value_counterexample(B, L, M), "closed_form"
    return {"B": B, "L": L, "M": M, "greedy": greedy.value, "optimal": opt_val,
            "ratio": greedy.value / opt_val, "optimal_method": method,
            "greedy_order": [inst.labels[v] for v in greedy.order]}


def measure_alpha(res: SearchResult) -> float:
    """min over steps of chosen gain / best available gain (steps with no available gain skipped)."""
    ratios = [g / b for g, b in zip(res.gains, res.best_gains) if b > 0]
    return min(ratios) if ratios else 1.0


def measure_beta(inst: CoverageInstance, order: Sequence[int], opt_value: int) -> float:
    """Largest beta in (0, 1] with max frontier gain >= beta (F* - F(S)) / (B - b) at every prefix of ``order``."""
    S = set(inst.seeds)
    beta = 1.0
    seq = list(order)
    for b in range(inst.budget):
        deficit = opt_value - inst.value(S)
        if deficit <= 0:
            break
        covered = set().union(*(inst.covers[v] for v in S))
        front = inst.frontier(S)
        top = max((len(inst.covers[u] - covered) for u in front), default=0)
        beta = min(beta, top * (inst.budget - b) / deficit)
        if b >= len(seq):
            break
        S.add(seq[b])
    return beta


def random_instance(rng: np.random.Generator, num_nodes: int = 10, units: int = 12, budget: int = 4,
                    extra_edges: int = 4, max_cover: int = 4) -> CoverageInstance:
    """Random connected graph (random tree plus extra edges) with random cover sets and one seed."""
    edges = [(int(rng.integers(i)), i) for i in range(1, num_nodes)]
    for _ in range(extra_edges):
        u, v = rng.integers(num_nodes, size=2)
        edges.append((int(u), int(v)))
    covers = [set(rng.choice(units, size=int(rng.integers(0, max_cover + 1)), replace=False).tolist())
              for _ in range(num_nodes)]
    return CoverageInstance.from_edges(num_nodes, edges, covers, {0}, budget)


def coverage_bound_check(instances: int = 200, seed: int = 0, alpha: float = 1.0, max_nodes: int = 12) -> dict:
    """Checks greedy value >= (1 - exp(-alpha*beta)) * optimum with alpha, beta measured per instance."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(instances):
        n = int(rng.integers(5, max_nodes + 1))
        inst = random_instance(rng, n, units=int(rng.integers(4, 16)), budget=int(rng.integers(1, 6)))
        opt = exhaustive_optimal(inst)
        pol = alpha_greedy(inst, alpha)
        a = measure_alpha(pol)
        b = measure_beta(inst, pol.order, opt.value)
        bound = (1 - math.exp(-a * b)) * opt.value
        rows.append({"greedy": pol.value, "optimal": opt.value, "alpha": a, "beta": b, "bound": bound,
                     "ok": pol.value >= bound - 1e-9, "feasible": is_feasible(inst, pol.order)})
    return {"instances": instances, "alpha_policy": alpha,
            "violations": sum(not r["ok"] for r in rows),
            "infeasible": sum(not r["feasible"] for r in rows),
            "min_ratio": min(r["greedy"] / r["optimal"] for r in rows if r["optimal"] > 0),
            "mean_beta": float(np.mean([r["beta"] for r in rows])),
            "holds": all(r["ok"] and r["feasible"] for r in rows)}
