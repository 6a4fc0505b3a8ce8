"""Seed-and-expand rollouts over the bounded query subgraph.

A rollout starts from the seed set V_0 inside the query subgraph, and at each
step t scores the (capped) frontier U_t with the policy head, picks c_t nodes
and adds them to V_t. Training samples picks with Gumbel top-k; inference
takes the top c_t logits.

Many rollouts (all M samples of every query in a minibatch) advance in
lock-step so that each step is one batched GNN forward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .embed import EmbeddingTable, LinearProjection, apply_projection, cosine_topk
from .errors import ConfigError
from .gnn import GraphBatch, ModelParams, encode_batch, node_scores_rows, policy_logits_rows
from .graph import SubgraphView, TypedGraph
from .khop import ExpansionBudget, QuerySims, khop_filter, khop_trace

logger = logging.getLogger(__name__)

SAMPLER_MODES = ("stochastic", "greedy")


@dataclass(frozen=True)
class SamplerConfig:
    expand: tuple[int, ...] = (7, 10)
    caps: tuple[int, ...] | None = (20, 50)
    temperature: float = 1.0
    mode: str = "stochastic"
    direction: str = "out"
    cap_by: str = "cosine"     # frontier cap ranks by "cosine" or by the K-hop "prior" score

    def __post_init__(self):
        object.__setattr__(self, "expand", tuple(int(c) for c in self.expand))
        if self.caps is not None:
            object.__setattr__(self, "caps", tuple(int(c) for c in self.caps))
            if len(self.caps) != len(self.expand):
                raise ConfigError("need one frontier cap per expansion step")
            if any(cap < c for cap, c in zip(self.caps, self.expand)):
                raise ConfigError(f"frontier caps {self.caps} must be >= expansion sizes {self.expand}")
        if not self.expand or min(self.expand) < 1:
            raise ConfigError("expansion sizes must be positive")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.mode not in SAMPLER_MODES:
            raise ConfigError(f"unknown sampler mode {self.mode!r}")
        if self.direction not in ("out", "in", "both"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.cap_by not in ("cosine", "prior"):
            raise ConfigError(f"unknown frontier cap criterion {self.cap_by!r}")

    @property
    def horizon(self) -> int:
        return len(self.expand)

    def with_mode(self, mode: str) -> "SamplerConfig":
        return SamplerConfig(self.expand, self.caps, self.temperature, mode, self.direction, self.cap_by)


# ---------------------------------------------------------------------------
# Gumbel top-k and Plackett-Luce log-probabilities
# ---------------------------------------------------------------------------

def gumbel_order(logits: np.ndarray, k: int, temperature: float, rng: np.random.Generator | None) -> np.ndarray:
    """Positions of the k picks, in pick order.

    Adds Gumbel noise to ``logits / temperature`` and keeps the k largest,
    which samples the without-replacement softmax sequence. With ``rng=None``
    no noise is added (greedy); ties go to the lower position.
    """
    logits = np.asarray(logits, dtype=np.float64)
    k = min(int(k), len(logits))
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    keys = logits / temperature
    if rng is not None:
        keys = keys + rng.gumbel(size=len(keys))
    order = np.lexsort((np.arange(len(keys)), -keys))
    return order[:k].astype(np.int64)


def plackett_luce_logprob(logits: np.ndarray, order: Sequence[int], temperature: float = 1.0) -> float:
    """log P(order) under sequential softmax sampling without replacement."""
    x = np.asarray(logits, dtype=np.float64) / temperature
    remaining = np.ones(len(x), dtype=bool)
    total = 0.0
    for i in order:
        xr = x[remaining]
        m = xr.max()
        total += x[i] - (m + np.log(np.exp(xr - m).sum()))
        remaining[i] = False
    return float(total)


def gumbel_topk(logits: dict[int, float], k: int, temperature: float = 1.0,
                rng_seed=None) -> tuple[set[int], float]:
    """Sample ``min(k, |logits|)`` distinct nodes and the log-probability of the pick order."""
    if not logits:
        return set(), 0.0
    nodes = sorted(logits)
    vals = np.array([logits[u] for u in nodes], dtype=np.float64)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    order = gumbel_order(vals, k, temperature, rng)
    return {nodes[i] for i in order}, plackett_luce_logprob(vals, order, temperature)


def greedy_topk(logits: dict[int, float], k: int) -> list[int]:
    """Top-k nodes by logit, ties to the lower node id."""
    return sorted(logits, key=lambda u: (-logits[u], u))[:k]


def batched_pl_logprob(logits: Tensor, groups: Sequence[tuple[int, np.ndarray]], temperature: float,
                       num_groups: int) -> Tensor:
    """Differentiable Plackett-Luce log-probability per group.

    ``logits`` is a 1-D tensor holding every group's candidates contiguously;
    ``groups[g] = (start, order, n)`` gives the group's offset, its pick order
    (positions relative to ``start``) and its candidate count.
    """
    rem_idx, rem_seg, chosen, pick_group = [], [], [], []
    pick = 0
    for g, (start, order, n) in enumerate(groups):
        taken = np.zeros(n, dtype=bool)
        for i in order:
            avail = np.flatnonzero(~taken)
            rem_idx.append(start + avail)
            rem_seg.append(np.full(len(avail), pick, dtype=np.int64))
            chosen.append(start + int(i))
            pick_group.append(g)
            taken[i] = True
            pick += 1
    if pick == 0:
        return Tensor(np.zeros(num_groups, dtype=logits.dtype))
    scaled = ad.scale(logits, 1.0 / temperature)
    lse = ad.segment_logsumexp(ad.gather_rows(scaled, np.concatenate(rem_idx)),
                               Segments(np.concatenate(rem_seg), pick))
    terms = ad.sub(ad.gather_rows(scaled, np.asarray(chosen, dtype=np.int64)), lse)
    return ad.segment_sum(terms, Segments(np.asarray(pick_group, dtype=np.int64), num_groups))


# ---------------------------------------------------------------------------
# per-query environment and rollout state
# ---------------------------------------------------------------------------

@dataclass
class QueryEnv:
    """The bounded query subgraph in local indices, ready for rollouts."""

    query_id: str
    z_q: np.ndarray            # query vector in model feature space
    members: np.ndarray        # global node ids, local index = position
    seeds: np.ndarray          # local indices of V_0
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    sim: np.ndarray            # cosine(query, member) in the original embedding space
    adjacency: sp.csr_matrix = field(repr=False)
    answers: np.ndarray | None = None   # bool mask over members
    prior: np.ndarray | None = None     # K-hop filter score per member (+inf for seeds)

    @property
    def size(self) -> int:
        return len(self.members)

    @classmethod
    def build(cls, view: SubgraphView, seeds: Sequence[int], z_q: np.ndarray, sim: np.ndarray,
              answers=None, direction: str = "out", query_id: str = "", prior=None) -> "QueryEnv":
        src, rel, dst = view.local_edges()
        n = len(view)
        if direction == "out":
            rows, cols = src, dst
        elif direction == "in":
            rows, cols = dst, src
        else:
            rows, cols = np.r_[src, dst], np.r_[dst, src]
        adj = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
        adj.sum_duplicates()
        index = view.local_index
        seed_local = np.array([index[int(s)] for s in seeds], dtype=np.int64)
        mask = None
        if answers is not None:
            mask = np.zeros(n, dtype=bool)
            for a in answers:
                if int(a) in index:
                    mask[index[int(a)]] = True
        return cls(query_id, np.asarray(z_q), view.members.copy(), seed_local, src, rel, dst,
                   np.asarray(sim, dtype=np.float64), adj, mask,
                   None if prior is None else np.asarray(prior, dtype=np.float64))

    def frontier(self, selected_mask: np.ndarray, cap: int | None, cap_by: str = "cosine") -> np.ndarray:
        """U_t = N(V_t) minus V_t, optionally capped to the ``cap`` best nodes by ``cap_by``."""
        nbrs = self.adjacency[np.flatnonzero(selected_mask)].indices
        nbrs = np.unique(nbrs)
        nbrs = nbrs[~selected_mask[nbrs]]
        if cap is not None and len(nbrs) > cap:
            key = self.sim if cap_by == "cosine" or self.prior is None else self.prior
            order = np.lexsort((nbrs, -key[nbrs]))[:cap]
            nbrs = np.sort(nbrs[order])
        return nbrs


@dataclass
class StepRecord:
    frontier: np.ndarray   # local indices
    chosen: np.ndarray     # local indices in pick order
    logprob: float


@dataclass
class ExpansionState:
    env: QueryEnv
    selected: list[int]
    mask: np.ndarray
    steps: list[StepRecord] = field(default_factory=list)

    @classmethod
    def start(cls, env: QueryEnv) -> "ExpansionState":
        mask = np.zeros(env.size, dtype=bool)
        selected = []
        for s in env.seeds:
            if not mask[s]:
                mask[s] = True
                selected.append(int(s))
        return cls(env, selected, mask)

    def add(self, nodes) -> None:
        for u in nodes:
            u = int(u)
            if self.mask[u]:
                raise ValueError(f"node {u} already selected")
            self.mask[u] = True
            self.selected.append(u)


@dataclass
class Trajectory:
    query_id: str
    steps: list[StepRecord]
    final: list[int]           # global ids of V_T in selection order
    reward: float | None = None

    @property
    def logprob(self) -> float:
        return float(sum(s.logprob for s in self.steps))


def _members_batch(states: Sequence[ExpansionState], keeps: Sequence[np.ndarray], node_feats: np.ndarray):
    """GraphBatch over the induced subgraphs ``env[keep]``; returns batch and local->row maps."""
    ids, gidx, src, rel, dst, queries, row_maps = [], [], [], [], [], [], []
    base = 0
    for g, (st, keep) in enumerate(zip(states, keeps)):
        env = st.env
        local = np.flatnonzero(keep)
        row = np.full(env.size, -1, dtype=np.int64)
        row[local] = np.arange(len(local)) + base
        e = keep[env.src] & keep[env.dst]
        ids.append(env.members[local])
        gidx.append(np.full(len(local), g, dtype=np.int64))
        src.append(row[env.src[e]]); rel.append(env.rel[e]); dst.append(row[env.dst[e]])
        queries.append(env.z_q)
        row_maps.append(row)
        base += len(local)
    node_ids = np.concatenate(ids)
    batch = GraphBatch.from_arrays(node_ids, np.concatenate(gidx), node_feats[node_ids], np.stack(queries),
                                   np.concatenate(src), np.concatenate(rel), np.concatenate(dst))
    return batch, row_maps


def expand_batch(states: Sequence[ExpansionState], step: int, params: ModelParams, sampler: SamplerConfig,
                 node_feats: np.ndarray, rng: np.random.Generator | None = None, train: bool = False,
                 dropout_rng: np.random.Generator | None = None) -> Tensor | None:
    """Advance every state by one expansion step.

    Returns a differentiable tensor of per-state log-probabilities in
    stochastic mode (zero for states whose frontier was empty), else None.
    """
    cap = sampler.caps[step] if sampler.caps is not None else None
    c = sampler.expand[step]
    frontiers = [st.env.frontier(st.mask, cap, sampler.cap_by) for st in states]
    active = [i for i, f in enumerate(frontiers) if len(f)]
    stochastic = sampler.mode == "stochastic"
    if not active:
        for st, f in zip(states, frontiers):
            st.steps.append(StepRecord(f, np.zeros(0, np.int64), 0.0))
        return Tensor(np.zeros(len(states), dtype=params.dtype)) if stochastic else None

    sub = [states[i] for i in active]
    keeps = []
    for i in active:
        keep = states[i].mask.copy()
        keep[frontiers[i]] = True
        keeps.append(keep)
    batch, row_maps = _members_batch(sub, keeps, node_feats)
    enc = encode_batch(batch, params, train=train, rng=dropout_rng)
    rows = np.concatenate([row_maps[j][frontiers[i]] for j, i in enumerate(active)])
    logits = policy_logits_rows(enc, rows, params)
    vals = logits.data.astype(np.float64)

    groups = []
    start = 0
    picks: dict[int, np.ndarray] = {}
    for i in active:
        n = len(frontiers[i])
        order = gumbel_order(vals[start:start + n], c, sampler.temperature, rng if stochastic else None)
        groups.append((start, order, n))
        picks[i] = order
        start += n

    logp = batched_pl_logprob(logits, groups, sampler.temperature, len(active)) if stochastic else None
    for j, i in enumerate(active):
        st, f = states[i], frontiers[i]
        chosen = f[picks[i]]
        lp = float(logp.data[j]) if logp is not None else 0.0
        st.steps.append(StepRecord(f, chosen, lp))
        st.add(chosen)
    for i, f in enumerate(frontiers):
        if not len(f):
            states[i].steps.append(StepRecord(f, np.zeros(0, np.int64), 0.0))
    if not stochastic:
        return None
    # scatter active log-probs back to all states
    return ad.segment_sum(logp, Segments(np.asarray(active, dtype=np.int64), len(states)))


def expand_step(state: ExpansionState, params: ModelParams, sampler: SamplerConfig, node_feats: np.ndarray,
                rng: np.random.Generator | None = None) -> ExpansionState:
    """Single-rollout step (convenience wrapper around :func:`expand_batch`)."""
    expand_batch([state], len(state.steps), params, sampler, node_feats, rng)
    return state


def rollout(envs: Sequence[QueryEnv], params: ModelParams, sampler: SamplerConfig, node_feats: np.ndarray,
            rng: np.random.Generator | None = None, train: bool = False,
            dropout_rng: np.random.Generator | None = None):
    """Run full-horizon rollouts, one per env. Returns (states, summed logprob tensor or None)."""
    states = [ExpansionState.start(env) for env in envs]
    total = None
    for t in range(sampler.horizon):
        lp = expand_batch(states, t, params, sampler, node_feats, rng, train, dropout_rng)
        if lp is not None:
            total = lp if total is None else ad.add(total, lp)
    return states, total


def score_final(states: Sequence[ExpansionState], params: ModelParams, node_feats: np.ndarray,
                train: bool = False, dropout_rng: np.random.Generator | None = None):
    """Encode G_T = G~_q[V_T] for each state; returns (score tensor, per-state local index arrays).

    Scores are laid out state by state with each state's V_T in ascending local order.
    """
    keeps = [st.mask for st in states]
    batch, row_maps = _members_batch(states, keeps, node_feats)
    enc = encode_batch(batch, params, train=train, rng=dropout_rng)
    scores = node_scores_rows(enc, np.arange(batch.num_nodes), params)
    locals_ = [np.flatnonzero(k) for k in keeps]
    return scores, locals_


def to_trajectory(state: ExpansionState) -> Trajectory:
    env = state.env
    return Trajectory(env.query_id, state.steps, [int(env.members[i]) for i in state.selected])


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalConfig:
    k0: int = 3
    budget: ExpansionBudget = field(default_factory=lambda: ExpansionBudget((60, 120, 120)))
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(mode="greedy"))
    topk: int = 20
    direction: str = "out"
    joint: bool = True


@dataclass
class Retriever:
    """Bundles the graph, embeddings and feature space used by every retrieval method."""

    graph: TypedGraph
    node_emb: EmbeddingTable
    rel_emb: EmbeddingTable
    projection: LinearProjection | None = None
    _feats: np.ndarray | None = field(default=None, repr=False)

    @property
    def node_feats(self) -> np.ndarray:
        if self._feats is None:
            if self.projection is None:
                self._feats = self.node_emb.rows
            else:
                p = self.projection
                x = (self.node_emb.rows.astype(np.float64) - p.mean) @ p.matrix
                n = np.linalg.norm(x, axis=1, keepdims=True)
                self._feats = (x / np.where(n > 0, n, 1)).astype(np.float32)
        return self._feats

    def query_feats(self, q) -> np.ndarray:
        if self.projection is None:
            return np.asarray(q, dtype=np.float32)
        v, _ = apply_projection(self.projection, q)
        return v.astype(np.float32)

    def seeds(self, q, k0: int) -> list[int]:
        return [v for v, _ in cosine_topk(self.node_emb, q, k0)]

    def sims(self, q) -> QuerySims:
        return QuerySims.compute(self.node_emb, self.rel_emb, q)

    def khop(self, q, cfg: RetrievalConfig, budget: ExpansionBudget | None = None) -> list[int]:
        return khop_filter(self.graph, None, None, q, self.seeds(q, cfg.k0), budget or cfg.budget,
                           direction=cfg.direction, joint=cfg.joint, sims=self.sims(q))

    def env(self, q, cfg: RetrievalConfig, answers=None, query_id: str = "") -> QueryEnv:
        sims = self.sims(q)
        seeds = self.seeds(q, cfg.k0)
        trace = khop_trace(self.graph, None, None, q, seeds, cfg.budget,
                           direction=cfg.direction, joint=cfg.joint, sims=sims)
        view = SubgraphView(self.graph, trace.nodes)
        score = dict(zip(trace.nodes, trace.scores))
        prior = [score[int(v)] for v in view.members]
        return QueryEnv.build(view, seeds, self.query_feats(q), sims.node[view.members], answers,
                              cfg.sampler.direction, query_id, prior)


def rank_final(states: Sequence[ExpansionState], params: ModelParams, node_feats: np.ndarray):
    """Ranked (global id, score) lists of V_T per state, score desc then id asc."""
    scores, locals_ = score_final(states, params, node_feats)
    out, start = [], 0
    vals = scores.data.astype(np.float64)
    for st, loc in zip(states, locals_):
        ids = st.env.members[loc]
        s = vals[start:start + len(loc)]
        start += len(loc)
        order = np.lexsort((ids, -s))
        out.append([(int(ids[i]), float(s[i])) for i in order])
    return out


def run_inference_batch(envs: Sequence[QueryEnv], params: ModelParams, sampler: SamplerConfig,
                        node_feats: np.ndarray, topk: int | None = None,
                        rng: np.random.Generator | None = None):
    """Rollouts and final ranking for many queries at once.

    Greedy unless ``rng`` is given and ``sampler.mode`` is stochastic.
    Returns per-query (ranked list of (node, score) truncated to topk, V_T as a set).
    """
    if rng is None or sampler.mode == "greedy":
        states, _ = rollout(envs, params, sampler.with_mode("greedy"), node_feats)
    else:
        states, _ = rollout(envs, params, sampler, node_feats, rng=rng)
    ranked = rank_final(states, params, node_feats)
    return [(r[:topk] if topk else r, {int(st.env.members[i]) for i in st.selected})
            for r, st in zip(ranked, states)]


def run_inference(q, retriever: Retriever, params: ModelParams, cfg: RetrievalConfig):
    """R_k(q): seeds, bounded subgraph, greedy expansion, final scoring. Returns [(node, score)]."""
    env = retriever.env(q, cfg)
    return run_inference_batch([env], params, cfg.sampler, retriever.node_feats, cfg.topk)[0][0]
