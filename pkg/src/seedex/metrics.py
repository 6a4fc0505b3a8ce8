"""Retrieval metrics, split evaluation for every method, and the multi-seed stability report."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sstats

from .dataset import Query
from .embed import cosine_topk
from .gnn import ModelParams
from .khop import ExpansionBudget
from .policy import ExpansionState, QueryEnv, RetrievalConfig, Retriever, rank_final, run_inference_batch

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("hit@1", "hit@5", "mrr", "recall@20", "hit@any", "recall@any")


@dataclass
class EvalResult:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    excluded: int = 0

    @property
    def count(self) -> int:
        return len(self.per_query)

    @property
    def mean(self) -> dict[str, float]:
        if not self.per_query:
            return {c: float("nan") for c in METRIC_COLUMNS}
        rows = list(self.per_query.values())
        return {c: float(np.mean([r[c] for r in rows])) for c in rows[0]}

    def add(self, query_id: str, row: dict[str, float] | None) -> None:
        if row is None:
            self.excluded += 1
        else:
            self.per_query[query_id] = row

    def tsv(self, method: str = "", columns=METRIC_COLUMNS) -> str:
        m = self.mean
        head = "method\t" + "\t".join(columns) + "\tqueries\texcluded"
        row = method + "\t" + "\t".join(f"{m[c]:.6f}" for c in columns) + f"\t{self.count}\t{self.excluded}"
        return head + "\n" + row + "\n"


def compute_metrics(ranked: Sequence[int], full_set: Iterable[int], answers: Iterable[int],
                    ks: Sequence[int] = (1, 5), recall_ks: Sequence[int] = (20,)) -> dict[str, float] | None:
    """Hit@k, Recall@k and MRR on ``ranked``; Hit@Any and Recall@Any on ``full_set``.

    Returns None for an empty answer set (the caller excludes the query).
    """
    answers = set(int(a) for a in answers)
    if not answers:
        return None
    ranked = [int(v) for v in ranked]
    row: dict[str, float] = {}
    for k in ks:
        row[f"hit@{k}"] = float(any(v in answers for v in ranked[:k]))
    rr = 0.0
    for i, v in enumerate(ranked):
        if v in answers:
            rr = 1.0 / (i + 1)
            break
    row["mrr"] = rr
    for k in recall_ks:
        row[f"recall@{k}"] = len(answers.intersection(ranked[:k])) / len(answers)
    found = answers.intersection(int(v) for v in full_set)
    row["hit@any"] = float(bool(found))
    row["recall@any"] = len(found) / len(answers)
    return row


# ---------------------------------------------------------------------------
# split evaluation
# ---------------------------------------------------------------------------

def _chunks(xs, n):
    for i in range(0, len(xs), n):
        yield xs[i:i + n]


def evaluate_dense(retriever: Retriever, queries: Sequence[Query], budget: int, topk: int = 20) -> EvalResult:
    """Dense cosine top-``budget`` list; @Any uses the whole list."""
    res = EvalResult()
    for q in queries:
        ranked = [v for v, _ in cosine_topk(retriever.node_emb, q.embedding, budget)]
        res.add(q.query_id, compute_metrics(ranked, ranked, q.answers.nodes))
    return res


def evaluate_khop(retriever: Retriever, queries: Sequence[Query], cfg: RetrievalConfig,
                  budget: ExpansionBudget) -> EvalResult:
    """K-hop-with-filtering list in retrieval order; @Any uses the whole list."""
    res = EvalResult()
    for q in queries:
        ranked = retriever.khop(q.embedding, cfg, budget)
        res.add(q.query_id, compute_metrics(ranked, ranked, q.answers.nodes))
    return res


def build_envs(retriever: Retriever, queries: Sequence[Query], cfg: RetrievalConfig) -> list[QueryEnv]:
    return [retriever.env(q.embedding, cfg, q.answers.nodes, q.query_id) for q in queries]


def evaluate_seeder(params: ModelParams, envs: Sequence[QueryEnv], queries: Sequence[Query],
                    cfg: RetrievalConfig, node_feats: np.ndarray, chunk: int = 64) -> EvalResult:
    """Greedy expansion then scoring-head ranking of V_T; @Any uses V_T."""
    res = EvalResult()
    i = 0
    for part in _chunks(list(envs), chunk):
        for ranked, final in run_inference_batch(part, params, cfg.sampler, node_feats):
            q = queries[i]
            i += 1
            res.add(q.query_id, compute_metrics([v for v, _ in ranked], final, q.answers.nodes))
    return res


def evaluate_rerank(params: ModelParams, envs: Sequence[QueryEnv], queries: Sequence[Query],
                    node_feats: np.ndarray, chunk: int = 64) -> EvalResult:
    """Scoring-head ranking of the whole bounded subgraph (no learned expansion)."""
    res = EvalResult()
    i = 0
    for part in _chunks(list(envs), chunk):
        states = [ExpansionState(env, list(range(env.size)), np.ones(env.size, dtype=bool)) for env in part]
        for ranked in rank_final(states, params, node_feats):
            q = queries[i]
            i += 1
            ids = [v for v, _ in ranked]
            res.add(q.query_id, compute_metrics(ids, ids, q.answers.nodes))
    return res


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------

@dataclass
class Correlation:
    pearson: float | None
    spearman: float | None
    kendall: float | None
    n: int
    note: str = ""

    def as_dict(self) -> dict:
        return {"pearson": self.pearson, "spearman": self.spearman, "kendall": self.kendall,
                "n": self.n, "note": self.note}


def correlate(x, y) -> Correlation:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired series must be 1-D and equally long")
    if len(x) < 2:
        return Correlation(None, None, None, len(x), "fewer than two points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return Correlation(None, None, None, len(x), "constant series: correlation undefined")

    def fin(v):
        v = float(v)
        return v if math.isfinite(v) else None
    return Correlation(fin(sstats.pearsonr(x, y)[0]), fin(sstats.spearmanr(x, y)[0]),
                       fin(sstats.kendalltau(x, y)[0]), len(x))


def stability_report(streams: Sequence[Sequence[dict]], metrics=("recall@20",),
                     val_prefix: str = "val_", test_prefix: str = "test_") -> dict:
    """Validation-test correlations over every (seed, epoch) record.

    ``streams`` holds one list of per-epoch stats dicts per seed; each dict
    carries ``val_<metric>`` and ``test_<metric>`` keys.
    """
    if len(streams) < 2:
        raise ValueError("stability report needs at least two seeds")
    if min(len(s) for s in streams) < 2:
        raise ValueError("stability report needs at least two epochs per seed")
    out = {"seeds": len(streams), "epochs": [len(s) for s in streams], "metrics": {}}
    for m in metrics:
        x = [rec[val_prefix + m] for s in streams for rec in s]
        y = [rec[test_prefix + m] for s in streams for rec in s]
        out["metrics"][m] = correlate(x, y).as_dict()
    return out
