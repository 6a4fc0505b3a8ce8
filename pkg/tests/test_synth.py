import hashlib

import numpy as np
import pytest

from seedex.dataset import load_dataset, save_dataset
from seedex.errors import ConfigError
from seedex.synth import PseudoEmbedder, SynthConfig, follow_path, gen_synthetic_kg, generate_dataset, tokenize


@pytest.fixture(scope="module")
def default_dataset():
    return generate_dataset(SynthConfig())


def digests(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_tokenize_and_embedder_are_deterministic():
    assert tokenize("Which Gene, linked_to X9?") == ["which", "gene", "linked_to", "x9"]
    a, b = PseudoEmbedder(16), PseudoEmbedder(16)
    np.testing.assert_array_equal(a.embed("alpha beta"), b.embed("beta alpha"))
    assert np.linalg.norm(a.embed("alpha")) == pytest.approx(1.0)
    assert not np.allclose(a.embed("alpha"), PseudoEmbedder(16, salt="x").embed("alpha"))


def test_same_text_without_noise_gives_identical_embeddings():
    cfg = SynthConfig(node_counts={"a": 60}, relations=[["r", "a", "a", 1.0]], name_vocab=5, name_tokens=1,
                      noise=0.0, num_queries=1)
    g, node_emb, _ = gen_synthetic_kg(cfg)
    by_text = {}
    for i, t in enumerate(g.texts):
        by_text.setdefault(t, []).append(i)
    group = next(v for v in by_text.values() if len(v) > 1)
    np.testing.assert_array_equal(node_emb.rows[group[0]], node_emb.rows[group[1]])


def test_edges_respect_the_schema():
    cfg = SynthConfig(node_counts={"a": 40, "b": 40}, relations=[["r", "a", "b", 2.0]], distractor_density=0.5)
    g, _, _ = gen_synthetic_kg(cfg)
    assert g.edges
    for s, r, t in g.edges:
        assert g.node_types[g.type_ids[s]] == "a" and g.node_types[g.type_ids[t]] == "b"


def test_same_type_nodes_are_more_similar(default_dataset):
    ds = default_dataset
    rng = np.random.default_rng(0)
    x, types = ds.node_emb.rows.astype(np.float64), ds.graph.type_ids
    same, cross = [], []
    while len(same) < 1000 or len(cross) < 1000:
        i, j = rng.integers(len(types), size=2)
        if i == j:
            continue
        (same if types[i] == types[j] else cross).append(x[i] @ x[j])
    assert np.mean(same[:1000]) > np.mean(cross[:1000])


def test_invalid_configs_are_rejected():
    with pytest.raises(ConfigError):
        SynthConfig(noise=1.0).validate()
    with pytest.raises(ConfigError):
        SynthConfig(relations=[["r", "a", "missing", 1.0]], node_counts={"a": 3}).validate()
    with pytest.raises(ConfigError):
        SynthConfig(split_fractions=[0.5, 0.5, 0.5]).validate()
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"nodes": 3})


def test_default_scale(default_dataset):
    ds = default_dataset
    assert ds.graph.num_nodes == 2000 and len(ds.graph.node_types) == 4 and len(ds.graph.relations) == 6
    assert len(ds.queries) == 600
    assert {k: len(v) for k, v in ds.splits.items()} == {"train": 330, "val": 120, "test": 150}


def test_planted_paths_replay(default_dataset):
    ds = default_dataset
    for q in ds.queries:
        meta = q.meta
        assert meta["hops"] in (2, 3) and len(meta["path"]) == meta["hops"]
        assert set(q.answers.nodes) == follow_path(ds.graph, meta["start"], meta["path"]) - {meta["start"]}
        assert 1 <= len(q.answers) <= 5


def test_answers_within_planted_hops(default_dataset):
    ds = default_dataset
    for q in ds.queries[:100]:
        reach, frontier = {q.meta["start"]}, {q.meta["start"]}
        for _ in range(q.meta["hops"]):
            frontier = {v for u in frontier for _, v in ds.graph.neighbors(u)}
            reach |= frontier
        assert set(q.answers.nodes) <= reach


def test_dense_retrieval_misses_answers(default_dataset):
    ds = default_dataset
    x = ds.node_emb.rows.astype(np.float64)
    missed = 0
    for q in ds.queries:
        top = np.argsort(-(x @ q.embedding))[:20]
        missed += not set(top.tolist()) & set(q.answers.nodes)
    assert missed / len(ds.queries) >= 0.9


def test_answers_are_far_from_the_query(default_dataset):
    ds = default_dataset
    x = ds.node_emb.rows.astype(np.float64)
    ans = [np.mean(x[sorted(q.answers.nodes)] @ q.embedding) for q in ds.queries]
    seed = [x[q.meta["start"]] @ q.embedding for q in ds.queries]
    assert max(np.max(x[sorted(q.answers.nodes)] @ q.embedding) for q in ds.queries) < 0.3
    assert np.mean(seed) - np.mean(ans) >= 0.3


def test_generation_is_byte_identical(tmp_path):
    cfg = SynthConfig(node_counts={"disease": 80, "gene": 80, "pathway": 80, "drug": 80}, num_queries=30, seed=7)
    a = save_dataset(generate_dataset(cfg), tmp_path / "a")
    b = save_dataset(generate_dataset(cfg), tmp_path / "b")
    assert digests(a) == digests(b)
    cfg.seed = 8
    c = save_dataset(generate_dataset(cfg), tmp_path / "c")
    assert digests(a) != digests(c)


def test_saved_dataset_round_trips(tmp_path):
    ds = generate_dataset(SynthConfig(node_counts={"disease": 80, "gene": 80, "pathway": 80, "drug": 80},
                                      num_queries=20, seed=1))
    back = load_dataset(save_dataset(ds, tmp_path))
    assert back.graph.edges == ds.graph.edges and back.splits == ds.splits
    for q, r in zip(ds.queries, back.queries):
        assert q.query_id == r.query_id and q.answers == r.answers and q.spec.text == r.spec.text
        np.testing.assert_array_equal(q.embedding, r.embedding)
