"""Synthetic typed knowledge graphs with planted multi-hop queries.

Nodes get pseudo-embeddings from hashed tokens, so lexical overlap is the
only thing cosine similarity can see. Every query names its start entity
(dense retrieval can find it) and asks for the nodes at the end of a planted
2-3 step relation path, which share no tokens with the query. Relations in the
query text are sometimes paraphrased with synonyms, so similarity to the
relation name is only a partial routing signal.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import AnswerSet, Dataset, Query, QuerySpec
from .embed import EmbeddingTable, normalize_rows
from .errors import ConfigError, DataError
from .graph import TypedGraph

_TOKEN = re.compile(r"[a-z0-9_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class PseudoEmbedder:
    """Deterministic stand-in for a text encoder.

    Each token's 64-bit hash seeds a unit Gaussian vector; a text embeds to
    the normalized mean of its token vectors.
    """

    def __init__(self, dim: int, salt: str = ""):
        self.dim = dim
        self.salt = salt
        self._cache: dict[str, np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b((self.salt + token).encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._cache[token] = vec
        return vec

    def embed_tokens(self, tokens: list[str]) -> np.ndarray:
        if not tokens:
            return np.zeros(self.dim)
        v = np.mean([self.token_vector(t) for t in tokens], axis=0)
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def embed(self, text: str) -> np.ndarray:
        return self.embed_tokens(tokenize(text))


DEFAULT_RELATIONS = (
    ("associated_with", "disease", "gene", 2.5),
    ("implicated_in", "disease", "pathway", 2.5),
    ("participates_in", "gene", "pathway", 2.5),
    ("interacts_with", "gene", "gene", 2.5),
    ("targeted_by", "pathway", "drug", 2.5),
    ("indication", "drug", "disease", 2.5),
)

DEFAULT_RELATION_SYNONYMS = {
    "associated_with": ["linked", "correlated"],
    "implicated_in": ["disrupting", "perturbing"],
    "participates_in": ["member", "involving"],
    "interacts_with": ["binding", "partnering"],
    "targeted_by": ["modulating", "acting"],
    "indication": ["treating", "prescribed"],
}

DEFAULT_TYPE_SYNONYMS = {
    "disease": ["condition", "disorder"],
    "gene": ["protein", "locus"],
    "pathway": ["cascade", "process"],
    "drug": ["medication", "compound"],
}


@dataclass
class SynthConfig:
    node_counts: dict[str, int] = field(default_factory=lambda: {
        "disease": 500, "gene": 500, "pathway": 500, "drug": 500})
    relations: list[tuple[str, str, str, float]] = field(default_factory=lambda: [list(r) for r in DEFAULT_RELATIONS])
    relation_synonyms: dict[str, list[str]] = field(default_factory=lambda: dict(DEFAULT_RELATION_SYNONYMS))
    type_synonyms: dict[str, list[str]] = field(default_factory=lambda: dict(DEFAULT_TYPE_SYNONYMS))
    hop_lengths: list[int] = field(default_factory=lambda: [2, 3])
    hop_weights: list[float] = field(default_factory=lambda: [0.5, 0.5])
    relation_mention: float = 0.5
    type_mention: float = 0.5
    distractor_density: float = 0.3
    name_vocab: int = 400
    name_tokens: int = 2
    type_weight: float = 0.3
    dim: int = 64
    noise: float = 0.1
    num_queries: int = 600
    max_answers: int = 5
    answer_max_cos: float = 0.3
    split_fractions: list[float] = field(default_factory=lambda: [0.55, 0.20, 0.25])
    seed: int = 0

    def validate(self) -> None:
        if not 0 <= self.noise < 1:
            raise ConfigError("noise must lie in [0, 1)")
        for name, src, dst, deg in self.relations:
            for t in (src, dst):
                if self.node_counts.get(t, 0) < 1:
                    raise ConfigError(f"relation {name!r} uses type {t!r} with no nodes")
            if deg < 0:
                raise ConfigError(f"relation {name!r} has negative degree")
        if len(self.hop_lengths) != len(self.hop_weights) or min(self.hop_lengths) < 1:
            raise ConfigError("hop_lengths and hop_weights must align and be positive")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if self.name_vocab < self.name_tokens:
            raise ConfigError("name_vocab too small")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _pseudo_words(n: int, rng: np.random.Generator) -> list[str]:
    cons, vows = "bdfgklmnprstvz", "aeiou"
    words, seen = [], set()
    while len(words) < n:
        w = "".join(cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(3))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _node_embeddings(cfg: SynthConfig, embedder: PseudoEmbedder, node_types: list[str],
                     type_ids: np.ndarray, texts: list[str], rng: np.random.Generator) -> np.ndarray:
    rows = np.zeros((len(texts), cfg.dim))
    for i, (t, text) in enumerate(zip(type_ids, texts)):
        rows[i] = cfg.type_weight * embedder.token_vector("type:" + node_types[t]) + embedder.embed(text)
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    if cfg.noise > 0:
        g = rng.standard_normal(rows.shape)
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        rows = rows + cfg.noise * g
    return normalize_rows(rows)


def gen_synthetic_kg(cfg: SynthConfig) -> tuple[TypedGraph, EmbeddingTable, EmbeddingTable]:
    """Random schema-respecting graph plus node and relation embeddings."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    node_types = list(cfg.node_counts)
    relations = [r[0] for r in cfg.relations]
    type_ids = np.concatenate([np.full(cfg.node_counts[t], i) for i, t in enumerate(node_types)])
    pools = {t: np.flatnonzero(type_ids == i) for i, t in enumerate(node_types)}

    vocab = _pseudo_words(cfg.name_vocab, rng)
    texts = [" ".join(vocab[j] for j in rng.choice(cfg.name_vocab, cfg.name_tokens, replace=False))
             for _ in range(len(type_ids))]
    ext_ids = [f"{node_types[t]}:{i}" for i, t in enumerate(type_ids)]

    edges = []
    for r, (_, src_t, dst_t, deg) in enumerate(cfg.relations):
        dst_pool = pools[dst_t]
        for v in pools[src_t]:
            for u in rng.choice(dst_pool, rng.poisson(deg), replace=True):
                if u != v:
                    edges.append((int(v), r, int(u)))
    # distractor edges: extra schema-valid edges spread over all relations
    if cfg.distractor_density > 0:
        n_extra = rng.poisson(cfg.distractor_density * len(type_ids))
        for _ in range(n_extra):
            r = int(rng.integers(len(cfg.relations)))
            _, src_t, dst_t, _ = cfg.relations[r]
            v, u = int(rng.choice(pools[src_t])), int(rng.choice(pools[dst_t]))
            if u != v:
                edges.append((v, r, u))
    edges.sort()
    graph = TypedGraph(node_types, relations, type_ids, texts, edges, ext_ids)

    embedder = PseudoEmbedder(cfg.dim)
    node_emb = _node_embeddings(cfg, embedder, node_types, type_ids, texts, rng)
    rel_emb = normalize_rows(np.stack([embedder.embed_tokens([r]) for r in relations]))
    return graph, EmbeddingTable(node_emb, True), EmbeddingTable(rel_emb, True)


def follow_path(graph: TypedGraph, start: int, path) -> set[int]:
    """Nodes reached from ``start`` by following exactly the relation sequence."""
    current = {int(start)}
    for r in path:
        nxt = set()
        for v in current:
            a, b = graph.out_offsets[v], graph.out_offsets[v + 1]
            rels, nbrs = graph.out_rel[a:b], graph.out_nbr[a:b]
            nxt.update(nbrs[rels == r].tolist())
        current = nxt
        if not current:
            break
    return current


def gen_queries(graph: TypedGraph, node_emb: EmbeddingTable, cfg: SynthConfig, count: int | None = None,
                max_tries: int = 200) -> tuple[list[Query], EmbeddingTable]:
    """Plant ``count`` path queries; returns the queries and their embedding table."""
    count = cfg.num_queries if count is None else count
    rng = np.random.default_rng(cfg.seed + 1)
    embedder = PseudoEmbedder(cfg.dim)
    schema: dict[int, list[int]] = {}
    type_index = {t: i for i, t in enumerate(graph.node_types)}
    for r, (_, src_t, dst_t, _) in enumerate(cfg.relations):
        schema.setdefault(type_index[src_t], []).append(r)
    starts = np.flatnonzero(graph.out_degree() > 0)
    if not len(starts):
        raise DataError("graph has no edges to plant queries on")

    queries, rows, used = [], [], set()
    hop_p = np.asarray(cfg.hop_weights, dtype=float) / sum(cfg.hop_weights)
    while len(queries) < count:
        for _ in range(max_tries):
            s = int(rng.choice(starts))
            hops = int(rng.choice(cfg.hop_lengths, p=hop_p))
            path, t = [], int(graph.type_ids[s])
            for _ in range(hops):
                options = schema.get(t, [])
                if not options:
                    break
                r = int(rng.choice(options))
                path.append(r)
                t = type_index[cfg.relations[r][2]]
            if len(path) != hops or (s, tuple(path)) in used:
                continue
            answers = follow_path(graph, s, path) - {s}
            if not 1 <= len(answers) <= cfg.max_answers:
                continue
            target_type = graph.node_types[t]
            words = ["which"]
            if rng.random() < cfg.type_mention:
                words.append(target_type)
            else:
                words.append(str(rng.choice(cfg.type_synonyms[target_type])))
            for r in reversed(path):
                name = graph.relations[r]
                words.append(name if rng.random() < cfg.relation_mention
                             else str(rng.choice(cfg.relation_synonyms[name])))
            words.append(graph.texts[s])
            text = " ".join(words)
            vec = embedder.embed(text)
            if cfg.noise > 0:
                g = rng.standard_normal(cfg.dim)
                vec = vec + cfg.noise * g / np.linalg.norm(g)
            vec = vec / np.linalg.norm(vec)
            ans = np.array(sorted(answers))
            if np.max(node_emb.rows[ans].astype(np.float64) @ vec) >= cfg.answer_max_cos:
                continue
            used.add((s, tuple(path)))
            qid = f"q{len(queries):05d}"
            queries.append(Query(QuerySpec(qid, text, len(rows)), AnswerSet(frozenset(answers)),
                                 vec.astype(np.float32),
                                 {"start": s, "path": path, "hops": hops}))
            rows.append(vec)
            break
        else:
            raise DataError(f"could not plant query {len(queries)} after {max_tries} tries")
    table = EmbeddingTable(normalize_rows(np.stack(rows)), True)
    for q in queries:
        q.embedding = table.rows[q.spec.embedding_row]
    return queries, table


def split_queries(queries: list[Query], fractions, seed: int) -> dict[str, list[str]]:
    rng = np.random.default_rng(seed + 2)
    order = rng.permutation(len(queries))
    n = len(queries)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    ids = [queries[i].query_id for i in order]
    return {
        "train": sorted(ids[:n_train]),
        "val": sorted(ids[n_train:n_train + n_val]),
        "test": sorted(ids[n_train + n_val:]),
    }


def generate_dataset(cfg: SynthConfig | None = None) -> Dataset:
    cfg = cfg or SynthConfig()
    graph, node_emb, rel_emb = gen_synthetic_kg(cfg)
    queries, query_emb = gen_queries(graph, node_emb, cfg)
    splits = split_queries(queries, cfg.split_fractions, cfg.seed)
    return Dataset(graph, node_emb, rel_emb, query_emb, queries, splits)
