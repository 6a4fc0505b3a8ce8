import json

import pytest

from seedex.config import DEFAULTS, RunConfig, parse_override
from seedex.errors import ConfigError


def test_defaults_validate():
    cfg = RunConfig.load()
    assert cfg.tree == DEFAULTS
    assert cfg.train_config().M == 8 and cfg.train_config().lr == 1e-3
    rc = cfg.retrieval_config()
    assert rc.k0 == 3 and rc.sampler.expand == (7, 10) and rc.sampler.caps == (20, 50)
    assert cfg.khop_budget().per_hop == (7, 10)


def test_parse_override():
    assert parse_override("train.lr=0.0005") == (["train", "lr"], 0.0005)
    assert parse_override("retrieval.direction=in") == (["retrieval", "direction"], "in")
    assert parse_override("retrieval.caps=null") == (["retrieval", "caps"], None)
    with pytest.raises(ConfigError):
        parse_override("train.lr")


def test_precedence_file_then_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr": 0.01, "M": 4}, "seed": 3}))
    cfg = RunConfig.load(path, ["train.lr=0.02", "train.lr=0.03"])
    assert cfg.tree["train"]["lr"] == 0.03 and cfg.tree["train"]["M"] == 4 and cfg.seed == 3


def test_base_tree_sits_under_file_and_overrides():
    base = {"model": {"hidden": 8}, "retrieval": {"topk": 5}}
    cfg = RunConfig.load(None, ["retrieval.topk=7"], base)
    assert cfg.tree["model"]["hidden"] == 8 and cfg.tree["retrieval"]["topk"] == 7


def test_unknown_and_malformed_keys(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["train.learning_rate=1"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["train=3"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["synth.nodes=3"])
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    with pytest.raises(FileNotFoundError):
        RunConfig.load(tmp_path / "missing.json")


def test_invalid_values_are_config_errors():
    for text in ("retrieval.caps=[3,3]", "retrieval.k0=0", "model.injection=\"mul\"", "train.M=0",
                 "retrieval.env_budgets=[]", "synth.noise=1.5"):
        with pytest.raises(ConfigError):
            RunConfig.load(None, [text])


def test_synth_section_and_seed():
    cfg = RunConfig.load(None, ["seed=9", "synth.num_queries=12"])
    sc = cfg.synth_config()
    assert sc.num_queries == 12 and sc.seed == 9
    assert cfg.with_seed(4).seed == 4 and cfg.seed == 9
    assert json.loads(cfg.to_json()) == cfg.tree
