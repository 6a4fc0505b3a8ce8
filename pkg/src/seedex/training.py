"""Group-sampled REINFORCE for the expansion policy plus pairwise ranking for the scorer.

Per minibatch: M stochastic rollouts per query, Recall@Any rewards,
group-centered advantages, L = L_RL + lambda * L_rank, one backward pass,
global-norm clipping and an AdamW step under a warmup + cosine schedule.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tape, Tensor
from .errors import ConfigError, NumericError
from .gnn import ModelParams
from .policy import ExpansionState, QueryEnv, SamplerConfig, rollout, score_final

logger = logging.getLogger(__name__)

BASELINES = ("group_mean", "none", "greedy")
RANKING_LOSSES = ("bpr", "margin")


@dataclass
class TrainConfig:
    M: int = 8
    bpr_weight: float = 1.0
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 15
    warmup_epochs: int = 3
    max_grad_norm: float = 1.0
    baseline: str = "group_mean"
    ranking: str = "bpr"
    margin: float = 0.5
    negatives_per_positive: int = 4
    reward_on: str = "trajectory"
    reward_topk: int = 20
    min_lr_ratio: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if not (self.lr > 0 and self.batch_size >= 1 and self.epochs >= 1):
            raise ConfigError("lr, batch_size and epochs must be positive")
        if self.weight_decay < 0 or self.bpr_weight < 0 or self.max_grad_norm <= 0:
            raise ConfigError("weight_decay and bpr_weight must be >= 0, max_grad_norm > 0")
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        if self.ranking not in RANKING_LOSSES:
            raise ConfigError(f"unknown ranking loss {self.ranking!r}")
        if self.reward_on not in ("trajectory", "topk"):
            raise ConfigError(f"unknown reward_on {self.reward_on!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RewardRecord:
    trajectory: int
    reward: float
    advantage: float


# ---------------------------------------------------------------------------
# rewards and losses
# ---------------------------------------------------------------------------

def compute_reward(final_set, answers) -> float:
    """Fraction of the answer set contained in the final node set."""
    answers = set(int(a) for a in answers)
    if not answers:
        raise ValueError("empty answer set")
    final = set(int(v) for v in final_set)
    return len(answers & final) / len(answers)


def center_advantages(rewards: Sequence[float], mode: str = "group_mean",
                      greedy_reward: float | None = None) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if mode == "group_mean":
        return r - r.mean()
    if mode == "none":
        return r.copy()
    if mode == "greedy":
        if greedy_reward is None:
            raise ValueError("greedy baseline needs the greedy rollout's reward")
        return r - greedy_reward
    raise ValueError(f"unknown baseline mode {mode!r}")


def policy_loss(logprobs: Tensor, advantages, M: int | None = None) -> Tensor:
    """-(1/M) sum_m A_m log pi(tau_m), averaged over query groups when len > M."""
    adv = np.asarray(advantages, dtype=logprobs.dtype)
    if adv.shape != logprobs.shape:
        raise ValueError(f"{adv.shape[0]} advantages for {logprobs.shape[0]} trajectories")
    M = M or len(adv)
    groups = len(adv) / M
    return ad.scale(ad.sum(ad.mul(logprobs, Tensor(adv))), -1.0 / (M * groups))


def ranking_loss(scores: Tensor, positives, negatives, variant: str = "bpr", margin: float = 0.5) -> Tensor:
    """Mean pairwise loss over aligned (positive, negative) index pairs into ``scores``."""
    pos = np.asarray(positives, dtype=np.int64)
    neg = np.asarray(negatives, dtype=np.int64)
    if pos.shape != neg.shape:
        raise ValueError("positives and negatives must be aligned pairs")
    if not len(pos):
        return Tensor(np.zeros((), dtype=scores.dtype))
    diff = ad.sub(ad.gather_rows(scores, pos), ad.gather_rows(scores, neg))
    if variant == "bpr":
        per = ad.softplus(ad.neg(diff))
    elif variant == "margin":
        per = ad.softplus(ad.sub(Tensor(np.asarray(margin, dtype=scores.dtype)), diff))
    else:
        raise ValueError(f"unknown ranking loss {variant!r}")
    return ad.mean(per)


def sample_pairs(is_answer: np.ndarray, rng: np.random.Generator, per_positive: int = 4):
    """Positive/negative index pairs: up to ``per_positive`` uniform negatives per positive."""
    pos = np.flatnonzero(is_answer)
    neg = np.flatnonzero(~is_answer)
    if not len(pos) or not len(neg):
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    k = min(per_positive, len(neg))
    P, N = [], []
    for p in pos:
        chosen = rng.choice(neg, size=k, replace=False)
        P.extend([p] * k)
        N.extend(chosen.tolist())
    return np.asarray(P, np.int64), np.asarray(N, np.int64)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def clip_grad_norm(params: ModelParams, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [t.grad for _, t in params.items() if t.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float, min_ratio: float = 1e-2) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``min_ratio * peak``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    floor = peak * min_ratio
    return floor + 0.5 * (peak - floor) * (1 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params: ModelParams, weight_decay: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data, dtype=np.float64) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data, dtype=np.float64) for n, t in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, t in self.params.items():
            p = t.data.astype(np.float64)
            p -= lr * self.weight_decay * p
            if t.grad is not None:
                g = t.grad.astype(np.float64)
                self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
                self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
                p -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            t.data[...] = p.astype(t.data.dtype)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class BatchStats:
    loss: float
    rl_loss: float
    rank_loss: float
    reward_mean: float
    reward_std: float
    grad_norm: float
    advantage_sums: list[float]
    lr: float


@dataclass
class Trainer:
    params: ModelParams
    node_feats: np.ndarray
    sampler: SamplerConfig
    config: TrainConfig
    mode: str = "seeder"          # or "rerank": BPR only, scoring the full bounded subgraph
    optimizer: AdamW | None = None
    step_count: int = 0
    total_steps: int = 0
    warmup_steps: int = 0
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("seeder", "rerank"):
            raise ConfigError(f"unknown trainer mode {self.mode!r}")
        if self.optimizer is None:
            self.optimizer = AdamW(self.params, self.config.weight_decay)
        self.rng = np.random.default_rng(self.config.seed)

    def _schedule(self, n_train: int) -> None:
        per_epoch = max(1, math.ceil(n_train / self.config.batch_size))
        self.total_steps = per_epoch * self.config.epochs
        self.warmup_steps = per_epoch * self.config.warmup_epochs

    def batch_loss(self, envs: Sequence[QueryEnv]):
        """Differentiable loss for one minibatch; returns (loss, rl, rank, info)."""
        cfg = self.config
        rng, drop_rng = self.rng, self.rng
        if self.mode == "rerank":
            states = [ExpansionState(env, list(range(env.size)), np.ones(env.size, dtype=bool)) for env in envs]
            scores, locals_ = score_final(states, self.params, self.node_feats, train=True, dropout_rng=drop_rng)
            rank = self._rank_term(scores, states, locals_)
            zero = Tensor(np.zeros((), dtype=self.params.dtype))
            return rank, zero, rank, {"rewards": np.zeros(0), "adv_sums": []}

        M = cfg.M
        rep = [env for env in envs for _ in range(M)]
        states, logp = rollout(rep, self.params, self.sampler.with_mode("stochastic"), self.node_feats,
                               rng=rng, train=True, dropout_rng=drop_rng)
        rewards = np.array([self._reward(st) for st in states])
        adv = np.zeros_like(rewards)
        greedy_r = None
        if cfg.baseline == "greedy":
            g_states, _ = rollout(list(envs), self.params, self.sampler.with_mode("greedy"), self.node_feats)
            greedy_r = [self._reward(st) for st in g_states]
        adv_sums = []
        for i in range(len(envs)):
            sl = slice(i * M, (i + 1) * M)
            adv[sl] = center_advantages(rewards[sl], cfg.baseline, greedy_r[i] if greedy_r else None)
            adv_sums.append(float(adv[sl].sum()))
        rl = policy_loss(logp, adv, M)
        if cfg.bpr_weight > 0:
            scores, locals_ = score_final(states, self.params, self.node_feats, train=True, dropout_rng=drop_rng)
            rank = self._rank_term(scores, states, locals_)
        else:
            rank = Tensor(np.zeros((), dtype=self.params.dtype))
        loss = ad.add(rl, ad.scale(rank, cfg.bpr_weight))
        return loss, rl, rank, {"rewards": rewards, "adv_sums": adv_sums}

    def _reward(self, st: ExpansionState) -> float:
        ans = st.env.answers
        if self.config.reward_on == "topk":
            sel = np.asarray(st.selected[: self.config.reward_topk])
            return float(ans[sel].sum() / ans.sum())
        return float((ans & st.mask).sum() / ans.sum())

    def _rank_term(self, scores: Tensor, states, locals_) -> Tensor:
        pos_all, neg_all = [], []
        start = 0
        for st, loc in zip(states, locals_):
            p, n = sample_pairs(st.env.answers[loc], self.rng, self.config.negatives_per_positive)
            pos_all.append(p + start)
            neg_all.append(n + start)
            start += len(loc)
        return ranking_loss(scores, np.concatenate(pos_all), np.concatenate(neg_all),
                            self.config.ranking, self.config.margin)

    def train_step(self, envs: Sequence[QueryEnv]) -> BatchStats:
        self.params.zero_grad()
        with Tape() as tape:
            loss, rl, rank, info = self.batch_loss(envs)
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite loss at step {self.step_count}: rl={rl.item()} rank={rank.item()}")
            tape.backward(loss)
        norm = clip_grad_norm(self.params, self.config.max_grad_norm)
        if not math.isfinite(norm):
            raise NumericError(f"non-finite gradient norm at step {self.step_count}")
        lr = lr_at(self.step_count, self.total_steps or 1, self.warmup_steps, self.config.lr, self.config.min_lr_ratio)
        self.optimizer.step(lr)
        self.step_count += 1
        r = info["rewards"]
        return BatchStats(loss.item(), rl.item(), rank.item(), float(r.mean()) if len(r) else float("nan"),
                          float(r.std()) if len(r) else float("nan"), norm, info["adv_sums"], lr)

    def train_epoch(self, envs: Sequence[QueryEnv]) -> dict:
        envs = [e for e in envs if e.answers is not None and e.answers.any()]
        if not self.total_steps:
            self._schedule(len(envs))
        order = self.rng.permutation(len(envs))
        batches, sizes = [], []
        for s in range(0, len(order), self.config.batch_size):
            chunk = [envs[i] for i in order[s:s + self.config.batch_size]]
            batches.append(self.train_step(chunk))
            sizes.append(len(chunk))
        # reward statistics weight every query equally, whatever batch it fell in
        w = np.asarray(sizes, dtype=np.float64) / sum(sizes)
        return {
            "loss": float(np.mean([b.loss for b in batches])),
            "rl_loss": float(np.mean([b.rl_loss for b in batches])),
            "rank_loss": float(np.mean([b.rank_loss for b in batches])),
            "reward_mean": float(np.dot(w, [b.reward_mean for b in batches])) if self.mode == "seeder" else None,
            "reward_std": float(np.dot(w, [b.reward_std for b in batches])) if self.mode == "seeder" else None,
            "grad_norm": float(np.mean([b.grad_norm for b in batches])),
            "max_abs_adv_sum": float(max((abs(x) for b in batches for x in b.advantage_sums), default=0.0)),
            "lr": batches[-1].lr,
            "batches": len(batches),
        }

    def fit(self, train_envs: Sequence[QueryEnv], evaluate: Callable[[ModelParams], dict] | None = None,
            log_path=None, dump_dir=None) -> list[dict]:
        usable = [e for e in train_envs if e.answers is not None and e.answers.any()]
        skipped = len(train_envs) - len(usable)
        if skipped:
            logger.info("skipping %d training queries with no answer inside the bounded subgraph", skipped)
        self._schedule(len(usable))
        fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            for epoch in range(self.config.epochs):
                t0 = time.perf_counter()
                try:
                    stats = self.train_epoch(usable)
                except NumericError as exc:
                    self._dump(dump_dir, epoch, str(exc))
                    raise
                stats = {"epoch": epoch + 1, "seed": self.config.seed, "mode": self.mode, **stats}
                if evaluate is not None:
                    stats.update(evaluate(self.params))
                stats["seconds"] = round(time.perf_counter() - t0, 3)
                self.history.append(stats)
                logger.info("epoch %d %s", epoch + 1, json.dumps(stats, sort_keys=True))
                if fh:
                    fh.write(json.dumps(stats, sort_keys=True) + "\n")
                    fh.flush()
        finally:
            if fh:
                fh.close()
        return self.history

    def _dump(self, dump_dir, epoch: int, message: str) -> None:
        if not dump_dir:
            return
        path = Path(dump_dir) / "nan_diagnostics.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        finite = {n: bool(np.isfinite(t.data).all()) for n, t in self.params.items()}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"epoch": epoch + 1, "step": self.step_count, "error": message,
                       "finite_params": finite, "config": asdict(self.config),
                       "history": self.history}, fh, indent=1, sort_keys=True)
        logger.error("wrote diagnostics to %s", path)
