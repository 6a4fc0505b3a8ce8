"""End-to-end helpers shared by the command line and the experiment scripts."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as M
from .config import RunConfig
from .dataset import Dataset
from .embed import fit_projection
from .errors import DataError
from .gnn import ModelParams
from .graph import SubgraphView
from .policy import QueryEnv, Retriever
from .training import Trainer

logger = logging.getLogger(__name__)

METHODS = ("dense", "khop", "seeder", "rerank")


def build_retriever(ds: Dataset, cfg: RunConfig) -> Retriever:
    """Retriever over the dataset; node features are PCA-reduced when wider than ``pca_dim``."""
    pca_dim = cfg.tree["retrieval"].get("pca_dim")
    proj = None
    if pca_dim and ds.node_emb.dim > int(pca_dim):
        proj = fit_projection(ds.node_emb, int(pca_dim))
    return Retriever(ds.graph, ds.node_emb, ds.rel_emb, proj)


def build_envs(retriever: Retriever, queries, cfg: RunConfig, cache: dict | None = None) -> list[QueryEnv]:
    """Bounded query subgraphs; ``cache`` maps query id to (seeds, members, prior) from :func:`index_subgraphs`."""
    rc = cfg.retrieval_config()
    if cache is None:
        return M.build_envs(retriever, queries, rc)
    envs = []
    for q in queries:
        if q.query_id not in cache:
            raise DataError(f"query {q.query_id} missing from subgraph cache")
        seeds, members, prior = cache[q.query_id]
        view = SubgraphView(retriever.graph, members)
        sims = retriever.sims(q.embedding)
        score = dict(zip(members, prior))
        envs.append(QueryEnv.build(view, seeds, retriever.query_feats(q.embedding), sims.node[view.members],
                                   q.answers.nodes, rc.sampler.direction, q.query_id,
                                   [score[int(v)] for v in view.members]))
    return envs


def index_subgraphs(retriever: Retriever, queries, cfg: RunConfig) -> list[dict]:
    rc = cfg.retrieval_config()
    out = []
    for q in queries:
        env = retriever.env(q.embedding, rc, None, q.query_id)
        out.append({"query_id": q.query_id,
                    "seeds": [int(env.members[i]) for i in env.seeds],
                    "members": [int(v) for v in env.members],
                    # JSON has no infinity; seeds carry a null prior
                    "prior": [None if np.isinf(p) else float(p) for p in env.prior]})
    return out


def load_subgraph_cache(path) -> dict:
    cache = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                prior = [np.inf if p is None else p for p in rec["prior"]]
                cache[rec["query_id"]] = (rec["seeds"], rec["members"], prior)
    return cache


@dataclass
class Experiment:
    """A dataset, a run config and the cached bounded subgraphs of every split."""

    ds: Dataset
    cfg: RunConfig
    retriever: Retriever
    envs: dict[str, list[QueryEnv]]

    @classmethod
    def prepare(cls, ds: Dataset, cfg: RunConfig, splits: Sequence[str] = ("train", "val", "test"),
                cache: dict | None = None) -> "Experiment":
        r = build_retriever(ds, cfg)
        envs = {s: build_envs(r, ds.split(s), cfg, cache) for s in splits if s in ds.splits}
        return cls(ds, cfg, r, envs)

    def new_params(self, seed: int | None = None) -> ModelParams:
        feats = self.retriever.node_feats
        mc = self.cfg.model_config(feats.shape[1], len(self.ds.graph.relations))
        return ModelParams.init(mc, seed=self.cfg.seed if seed is None else seed)

    def evaluate(self, method: str, split: str, params: ModelParams | None = None) -> M.EvalResult:
        queries = self.ds.split(split)
        rc = self.cfg.retrieval_config()
        if method == "dense":
            return M.evaluate_dense(self.retriever, queries, rc.k0 + sum(rc.sampler.expand))
        if method == "khop":
            return M.evaluate_khop(self.retriever, queries, rc, self.cfg.khop_budget())
        if params is None:
            raise ValueError(f"method {method!r} needs trained parameters")
        envs = self.envs.get(split) or build_envs(self.retriever, queries, self.cfg)
        if method == "seeder":
            return M.evaluate_seeder(params, envs, queries, rc, self.retriever.node_feats)
        if method == "rerank":
            return M.evaluate_rerank(params, envs, queries, self.retriever.node_feats)
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")

    def train(self, mode: str = "seeder", seed: int | None = None, eval_splits: Sequence[str] = ("val", "test"),
              log_path=None, dump_dir=None, epochs: int | None = None):
        """Train one model; each epoch's stats carry ``<split>_<metric>`` for ``eval_splits``."""
        seed = self.cfg.seed if seed is None else seed
        params = self.new_params(seed)
        tc = self.cfg.train_config(seed)
        if epochs is not None:
            tc.epochs = epochs
        trainer = Trainer(params, self.retriever.node_feats, self.cfg.sampler("stochastic"), tc, mode=mode)
        method = "seeder" if mode == "seeder" else "rerank"

        def evaluate(p):
            out = {}
            for s in eval_splits:
                for k, v in self.evaluate(method, s, p).mean.items():
                    out[f"{s}_{k}"] = v
            return out
        history = trainer.fit(self.envs["train"], evaluate if eval_splits else None, log_path, dump_dir)
        return params, history


def write_jsonl(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def coverage_stats(envs: Sequence[QueryEnv], queries) -> dict:
    """Fraction of answers inside the bounded subgraphs (an upper bound for any expansion)."""
    fr = [e.answers.sum() / len(q.answers) for e, q in zip(envs, queries) if len(q.answers)]
    return {"mean_size": float(np.mean([e.size for e in envs])), "answer_coverage": float(np.mean(fr))}


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
