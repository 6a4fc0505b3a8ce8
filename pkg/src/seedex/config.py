"""Run configuration: one JSON tree with dotted command-line overrides.

Keys mirror the hyperparameter names used throughout the package; see
``DEFAULTS`` for the full tree. Later sources win: defaults, then the config
file, then ``--set section.key=value`` overrides in order.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .gnn import ModelConfig
from .khop import ExpansionBudget
from .policy import RetrievalConfig, SamplerConfig
from .synth import SynthConfig
from .training import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "retrieval": {
        "k0": 3,
        "env_budgets": [60, 120, 120],
        "expand": [7, 10],
        "caps": [20, 50],
        "cap_by": "cosine",
        "temperature": 1.0,
        "direction": "out",
        "joint": True,
        "topk": 20,
        "pca_dim": 256,
    },
    "model": {
        "hidden": 16,
        "layers": 3,
        "injection": "concat",
        "dropout": 0.1,
        "reverse_edges": False,
    },
    "train": {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
    "synth": {},
}


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        where = f"{path}{k}"
        if where == "synth":
            if not isinstance(v, dict):
                raise ConfigError("config key 'synth' must be a table")
            out[k].update(copy.deepcopy(v))   # keys checked by SynthConfig
            continue
        if path == "synth.":
            out[k] = copy.deepcopy(v)
            continue
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``train.lr=0.0005`` -> (["train", "lr"], 0.0005); values parse as JSON, else as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


@dataclass
class RunConfig:
    tree: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides=(), base: dict | None = None) -> "RunConfig":
        """Defaults (or ``base``, e.g. the tree stored in a checkpoint), then the file, then overrides."""
        tree = copy.deepcopy(DEFAULTS) if base is None else _merge(DEFAULTS, base)
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise FileNotFoundError(f"config file not found: {p}")
            try:
                data = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: invalid JSON: {exc}") from None
            tree = _merge(tree, data)
        for text in overrides:
            keys, value = parse_override(text)
            patch: dict = value  # type: ignore[assignment]
            for k in reversed(keys):
                patch = {k: patch}
            tree = _merge(tree, patch)
        cfg = cls(tree)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.retrieval_config()
        self.train_config()
        ModelConfig(in_dim=1, num_relations=1, **self.tree["model"])
        SynthConfig.from_dict(self.tree["synth"]).validate()

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    def with_seed(self, seed: int) -> "RunConfig":
        tree = copy.deepcopy(self.tree)
        tree["seed"] = int(seed)
        return RunConfig(tree)

    def sampler(self, mode: str = "greedy") -> SamplerConfig:
        r = self.tree["retrieval"]
        caps = tuple(r["caps"]) if r["caps"] is not None else None
        return SamplerConfig(tuple(r["expand"]), caps, float(r["temperature"]), mode, r["direction"], r["cap_by"])

    def retrieval_config(self) -> RetrievalConfig:
        r = self.tree["retrieval"]
        try:
            budget = ExpansionBudget(tuple(r["env_budgets"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if int(r["k0"]) < 1 or int(r["topk"]) < 1:
            raise ConfigError("k0 and topk must be positive")
        return RetrievalConfig(int(r["k0"]), budget, self.sampler(), int(r["topk"]), r["direction"], bool(r["joint"]))

    def khop_budget(self) -> ExpansionBudget:
        """K-hop baseline budgets: the same per-step sizes as the learned expansion."""
        return ExpansionBudget(tuple(self.tree["retrieval"]["expand"]))

    def model_config(self, in_dim: int, num_relations: int) -> ModelConfig:
        return ModelConfig(in_dim=in_dim, num_relations=num_relations, **self.tree["model"])

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig.from_dict({**self.tree["train"], "seed": self.seed if seed is None else seed})

    def synth_config(self) -> SynthConfig:
        d = dict(self.tree["synth"])
        d.setdefault("seed", self.seed)
        return SynthConfig.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.tree, indent=1, sort_keys=True)
