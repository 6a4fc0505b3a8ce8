"""Relation-tracing graphs, exact linear tracers and their Monte Carlo checks.

A relation-tracing graph on ``n`` nodes has ``k`` relations, each a
permutation ``sigma_j`` of the nodes, with edges ``s -j-> sigma_j(s)``. A
query ``(s, r)`` asks for ``sigma_r(s) = sigma_{r_L}(...sigma_{r_1}(s))``.

Nodes carry binary features ``x_s = [bin(sigma_1(s)), ..., bin(sigma_k(s))]``
and one linear classifier per relation reads the right block back out, so a
hop-by-hop tracer answers every query exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from ..graph import TypedGraph


@dataclass(frozen=True)
class RelationTracingGraph:
    n: int
    k: int
    perms: np.ndarray          # k x n, perms[j, s] = sigma_j(s)

    def __post_init__(self):
        p = np.asarray(self.perms, dtype=np.int64)
        if p.shape != (self.k, self.n):
            raise ValueError(f"expected {self.k} permutations of {self.n} nodes, got shape {p.shape}")
        ref = np.arange(self.n)
        for j in range(self.k):
            if not np.array_equal(np.sort(p[j]), ref):
                raise ValueError(f"relation {j} is not a permutation")
        p.setflags(write=False)
        object.__setattr__(self, "perms", p)

    @classmethod
    def from_permutations(cls, perms) -> "RelationTracingGraph":
        p = np.atleast_2d(np.asarray(perms, dtype=np.int64))
        return cls(p.shape[1], p.shape[0], p)

    @cached_property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perms)
        rows = np.arange(self.k)[:, None]
        inv[rows, self.perms] = np.arange(self.n)[None, :]
        return inv

    @cached_property
    def graph(self) -> TypedGraph:
        src = np.tile(np.arange(self.n), self.k)
        rel = np.repeat(np.arange(self.k), self.n)
        dst = self.perms.reshape(-1)
        edges = list(zip(src.tolist(), rel.tolist(), dst.tolist()))
        return TypedGraph(["node"], [f"r{j}" for j in range(self.k)], np.zeros(self.n, dtype=np.int64),
                          [f"n{i}" for i in range(self.n)], edges)

    def compose(self, s: int, r: Sequence[int]) -> int:
        """Ground truth sigma_r(s) by direct composition."""
        v = int(s)
        for j in r:
            v = int(self.perms[j, v])
        return v


def gen_relation_tracing(n: int, k: int, rng_seed=None) -> RelationTracingGraph:
    """``k`` independent uniform permutations of ``n`` nodes."""
    if n < 2 or k < 1:
        raise ValueError("need n >= 2 and k >= 1")
    rng = np.random.default_rng(rng_seed)
    # Generator.permutation is an in-place Fisher-Yates shuffle
    return RelationTracingGraph(n, k, np.stack([rng.permutation(n) for _ in range(k)]))


def bit_width(n: int) -> int:
    return max(1, math.ceil(math.log2(n)))


def binary_codes(n: int, d: int | None = None) -> np.ndarray:
    """Row i is bin(i mod n) with the most significant bit first (so bin(n) = bin(0))."""
    d = d or bit_width(n)
    i = np.arange(n, dtype=np.int64) % n
    return ((i[:, None] >> np.arange(d - 1, -1, -1)[None, :]) & 1).astype(np.int8)


@dataclass(frozen=True)
class BinaryFeatureTable:
    """x_s = [bin(sigma_1(s)) | ... | bin(sigma_k(s)) (| bin(s))]."""

    features: np.ndarray       # n x (k*d [+ d]) of 0/1
    d: int
    k: int
    with_identifier: bool = False

    @classmethod
    def build(cls, g: RelationTracingGraph, with_identifier: bool = False) -> "BinaryFeatureTable":
        d = bit_width(g.n)
        codes = binary_codes(g.n, d)
        blocks = [codes[g.perms[j]] for j in range(g.k)]
        if with_identifier:
            blocks.append(codes)
        return cls(np.concatenate(blocks, axis=1), d, g.k, with_identifier)

    def block(self, s: int, j: int) -> np.ndarray:
        return self.features[s, j * self.d:(j + 1) * self.d]


@dataclass(frozen=True)
class LinearTracer:
    """f_j(x) = argmax_i (W_j x + b)_i with A's transpose in block j of W_j."""

    A: np.ndarray              # d x n, column i is 2 bin(i) - 1
    b: np.ndarray              # n, b_i = -(number of ones in bin(i))
    k: int
    width: int                 # feature length

    @classmethod
    def build(cls, n: int, k: int, with_identifier: bool = False) -> "LinearTracer":
        d = bit_width(n)
        codes = binary_codes(n, d).astype(np.float64)
        A = (2 * codes - 1).T
        b = -codes.sum(axis=1)
        return cls(A, b, k, (k + int(with_identifier)) * d)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def weight(self, j: int) -> np.ndarray:
        """The full n x width matrix W_j."""
        W = np.zeros((self.A.shape[1], self.width))
        W[:, j * self.d:(j + 1) * self.d] = self.A.T
        return W

    def scores(self, j: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        block = x[..., j * self.d:(j + 1) * self.d]
        return block @ self.A + self.b

    def classify(self, j: int, x) -> int | np.ndarray:
        s = self.scores(j, x)
        return np.argmax(s, axis=-1)


def trace_query(g: RelationTracingGraph, tracer: LinearTracer, s: int, r: Sequence[int],
                table: BinaryFeatureTable | None = None) -> int:
    """Follow ``r`` from ``s`` one classifier call per hop."""
    table = table or BinaryFeatureTable.build(g)
    v = int(s)
    for j in r:
        if not 0 <= j < g.k:
            raise ValueError(f"relation id {j} out of range")
        v = int(tracer.classify(j, table.features[v]))
    return v


def trace_batch(g: RelationTracingGraph, tracer: LinearTracer, table: BinaryFeatureTable,
                sources: np.ndarray, paths: np.ndarray) -> np.ndarray:
    """Vectorised tracing of many equal-length queries (paths: queries x L)."""
    v = np.asarray(sources, dtype=np.int64).copy()
    for step in range(paths.shape[1]):
        for j in range(g.k):
            m = paths[:, step] == j
            if m.any():
                v[m] = tracer.classify(j, table.features[v[m]])
    return v


def tracing_accuracy(n: int, k: int, L: int, queries: int, seed: int = 0) -> dict:
    g = gen_relation_tracing(n, k, seed)
    tracer = LinearTracer.build(n, k)
    table = BinaryFeatureTable.build(g)
    rng = np.random.default_rng(seed + 1)
    sources = rng.integers(n, size=queries)
    lengths = rng.integers(0, L + 1, size=queries)
    matches = 0
    for s, length in zip(sources, lengths):
        r = rng.integers(k, size=length)
        matches += trace_query(g, tracer, s, r, table) == g.compose(s, r)
    return {"n": n, "k": k, "L": L, "queries": queries, "exact": int(matches),
            "accuracy": matches / queries, "feature_bits": table.features.shape[1]}


def corrupted_trace_rate(g: RelationTracingGraph, tracer: LinearTracer, epsilons: Sequence[float],
                         length: int, trials: int, seed: int = 0, table: BinaryFeatureTable | None = None) -> dict:
    """Failure rate of tracing when classifier j answers a uniform wrong node with probability eps_j."""
    eps = np.asarray(epsilons, dtype=np.float64)
    if eps.shape != (g.k,) or (eps < 0).any() or (eps >= 1).any():
        raise ValueError("need one corruption rate in [0, 1) per relation")
    table = table or BinaryFeatureTable.build(g)
    rng = np.random.default_rng(seed)
    sources = rng.integers(g.n, size=trials)
    paths = rng.integers(g.k, size=(trials, length))
    truth = sources.copy()
    v = sources.copy()
    for step in range(length):
        rel = paths[:, step]
        truth = g.perms[rel, truth]
        clean = np.empty_like(v)
        for j in range(g.k):
            m = rel == j
            if m.any():
                clean[m] = tracer.classify(j, table.features[v[m]])
        corrupt = rng.random(trials) < eps[rel]
        # uniform over the n-1 wrong labels
        wrong = rng.integers(g.n - 1, size=trials)
        wrong = wrong + (wrong >= clean)
        v = np.where(corrupt, wrong, clean)
    failures = int((v != truth).sum())
    rate = failures / trials
    # per-query union bound sum_i eps_{r_i}, averaged over the sampled queries
    bound = float(eps[paths].sum(axis=1).mean()) if length else 0.0
    se = math.sqrt(max(bound * (1 - bound), 0.0) / trials) if 0 < bound < 1 else 0.0
    return {"trials": trials, "length": length, "failures": failures, "rate": rate,
            "union_bound": bound, "binomial_se": se, "holds": rate <= bound + 3 * se}


def frontier_growth_mc(n: int, k: int, L: int, trials: int, seed: int = 0) -> dict:
    """Monte Carlo estimate of E|A_l| for the inverse-image expansion from a fixed target.

    S_0 = {t}, S_{l+1} = union_j sigma_j^{-1}(S_l), B_l = S_0 u ... u S_l and
    A_l = S_l minus B_{l-1}. Requires k^L <= (k-1)/(k+4) n.
    """
    eta = (k - 1) / (k + 4)
    if k < 2 or k ** L > eta * n:
        raise ValueError(f"precondition k^L <= (k-1)/(k+4) n fails for n={n}, k={k}, L={L}")
    rng = np.random.default_rng(seed)
    sizes = np.zeros((trials, L + 1), dtype=np.int64)
    for t in range(trials):
        inv = np.stack([rng.permutation(n) for _ in range(k)])   # uniform permutations, used as sigma^{-1}
        seen = np.zeros(n, dtype=bool)
        S = np.array([0], dtype=np.int64)
        for level in range(L + 1):
            A = S[~seen[S]]
            sizes[t, level] = len(A)
            seen[S] = True
            if level < L:
                S = np.unique(inv[:, S].reshape(-1))
    mean = sizes.mean(axis=0)
    se = sizes.std(axis=0, ddof=1) / math.sqrt(trials) if trials > 1 else np.zeros(L + 1)
    bound = 0.5 * np.power(float(k), np.arange(L + 1))
    return {"n": n, "k": k, "L": L, "trials": trials,
            "mean": mean.tolist(), "stderr": se.tolist(), "half_k_pow": bound.tolist(),
            "holds": bool((mean >= bound).all())}
