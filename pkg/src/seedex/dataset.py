"""Queries, answer sets and the on-disk dataset bundle.

A dataset directory holds::

    nodes.tsv edges.tsv manifest.json     graph (see :mod:`seedex.graph`)
    node_emb.bin rel_emb.bin query_emb.bin embedding tables (see :mod:`seedex.embed`)
    queries.jsonl                          {query_id, text, embedding_row, answer_external_ids}
    splits.json                            {"train": [...], "val": [...], "test": [...]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import EmbeddingTable, load_embeddings, save_embeddings
from .errors import DataError, FormatError, ReferentialIntegrityError
from .graph import TypedGraph, load_graph, save_graph

logger = logging.getLogger(__name__)

FILES = {
    "nodes": "nodes.tsv",
    "edges": "edges.tsv",
    "manifest": "manifest.json",
    "node_emb": "node_emb.bin",
    "rel_emb": "rel_emb.bin",
    "query_emb": "query_emb.bin",
    "queries": "queries.jsonl",
    "splits": "splits.json",
}


@dataclass(frozen=True)
class QuerySpec:
    query_id: str
    text: str
    embedding_row: int


@dataclass(frozen=True)
class AnswerSet:
    nodes: frozenset[int]

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class Query:
    spec: QuerySpec
    answers: AnswerSet
    embedding: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def query_id(self) -> str:
        return self.spec.query_id


@dataclass
class Dataset:
    graph: TypedGraph
    node_emb: EmbeddingTable
    rel_emb: EmbeddingTable
    query_emb: EmbeddingTable
    queries: list[Query]
    splits: dict[str, list[str]]

    def __post_init__(self):
        if len(self.node_emb) != self.graph.num_nodes:
            raise DataError(f"{len(self.node_emb)} node embeddings for {self.graph.num_nodes} nodes")
        if len(self.rel_emb) != len(self.graph.relations):
            raise DataError(f"{len(self.rel_emb)} relation embeddings for {len(self.graph.relations)} relations")
        self._by_id = {q.query_id: q for q in self.queries}

    def split(self, name: str) -> list[Query]:
        if name not in self.splits:
            raise DataError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return [self._by_id[qid] for qid in self.splits[name]]

    def query(self, query_id: str) -> Query:
        return self._by_id[query_id]


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    save_graph(ds.graph, directory)
    save_embeddings(ds.node_emb, directory / FILES["node_emb"])
    save_embeddings(ds.rel_emb, directory / FILES["rel_emb"])
    save_embeddings(ds.query_emb, directory / FILES["query_emb"])
    ext = ds.graph.external_ids
    with open(directory / FILES["queries"], "w", encoding="utf-8", newline="\n") as fh:
        for q in ds.queries:
            rec = {
                "query_id": q.spec.query_id,
                "text": q.spec.text,
                "embedding_row": q.spec.embedding_row,
                "answer_external_ids": [ext[v] for v in sorted(q.answers.nodes)],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(directory / FILES["splits"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(ds.splits, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return directory


def load_queries(path, graph: TypedGraph, query_emb: EmbeddingTable) -> list[Query]:
    index = graph.external_index
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                spec = QuerySpec(str(rec["query_id"]), str(rec["text"]), int(rec["embedding_row"]))
                answer_ids = list(rec["answer_external_ids"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"bad query record: {exc}", path, lineno) from None
            if not 0 <= spec.embedding_row < len(query_emb):
                raise ReferentialIntegrityError(f"{path}:{lineno}: embedding_row {spec.embedding_row} out of range")
            missing = [a for a in answer_ids if a not in index]
            if missing:
                raise ReferentialIntegrityError(f"{path}:{lineno}: unknown answer ids {missing}")
            out.append(Query(spec, AnswerSet(frozenset(index[a] for a in answer_ids)),
                             query_emb.rows[spec.embedding_row]))
    return out


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    for key in ("nodes", "edges", "node_emb", "rel_emb", "query_emb", "queries"):
        if not (directory / FILES[key]).exists():
            raise DataError(f"missing dataset file: {directory / FILES[key]}")
    graph = load_graph(directory / FILES["nodes"], directory / FILES["edges"])
    node_emb = load_embeddings(directory / FILES["node_emb"], graph.num_nodes)
    rel_emb = load_embeddings(directory / FILES["rel_emb"], len(graph.relations))
    query_emb = load_embeddings(directory / FILES["query_emb"])
    queries = load_queries(directory / FILES["queries"], graph, query_emb)
    split_path = directory / FILES["splits"]
    if split_path.exists():
        with open(split_path, encoding="utf-8") as fh:
            splits = json.load(fh)
    else:
        splits = {"all": [q.query_id for q in queries]}
    return Dataset(graph, node_emb, rel_emb, query_emb, queries, splits)
