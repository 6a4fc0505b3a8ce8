import numpy as np
import pytest
from scipy import stats

from seedex import autodiff as ad
from seedex.autodiff import Tape, Tensor
from seedex.errors import ConfigError
from seedex.gnn import ModelConfig, ModelParams
from seedex.graph import SubgraphView
from seedex.policy import (ExpansionState, QueryEnv, SamplerConfig, batched_pl_logprob, expand_step, greedy_topk,
                           gumbel_order, gumbel_topk, plackett_luce_logprob, rollout, run_inference_batch,
                           to_trajectory)
from seedex.training import policy_loss

from conftest import make_graph
from reference import reference_head, reference_layer_stack


def model(in_dim=2, hidden=2, layers=1, seed=0, dtype=np.float64):
    cfg = ModelConfig(in_dim=in_dim, num_relations=1, hidden=hidden, layers=layers, injection="add", dropout=0.0)
    return ModelParams.init(cfg, seed=seed, dtype=dtype)


def tree(depth=3, fanout=2):
    edges, frontier, n = [], [0], 1
    for _ in range(depth):
        nxt = []
        for u in frontier:
            for _ in range(fanout):
                edges.append((u, 0, n))
                nxt.append(n)
                n += 1
        frontier = nxt
    return make_graph(n, edges)


def tree_env(rng, in_dim=2, answers=None):
    g = tree()
    x = rng.standard_normal((g.num_nodes, in_dim))
    zq = rng.standard_normal(in_dim)
    view = SubgraphView(g, range(g.num_nodes))
    sim = x @ zq / (np.linalg.norm(x, axis=1) * np.linalg.norm(zq))
    return g, x, QueryEnv.build(view, [0], zq, sim, answers), zq


# --- sampling primitives ---------------------------------------------------

def test_single_candidate_has_logprob_zero():
    chosen, logp = gumbel_topk({5: 0.3}, 1, rng_seed=0)
    assert chosen == {5} and logp == 0.0


def test_dominant_logit_wins_nearly_always():
    rng = np.random.default_rng(0)
    wins = sum(gumbel_topk({0: 10.0, 1: -10.0}, 1, rng_seed=rng)[0] == {0} for _ in range(10_000))
    assert wins >= 9900


def test_k_at_least_n_selects_everything():
    chosen, logp = gumbel_topk({1: 0.1, 2: 0.2, 3: 0.3}, 5, rng_seed=1)
    assert chosen == {1, 2, 3}
    assert np.isfinite(logp)


def test_high_temperature_is_uniform():
    rng = np.random.default_rng(0)
    counts = np.zeros(3)
    logits = {0: 3.0, 1: 0.0, 2: -3.0}
    for _ in range(10_000):
        (u,), _ = gumbel_topk(logits, 1, temperature=1e9, rng_seed=rng)
        counts[u] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_single_pick_frequencies_follow_softmax():
    rng = np.random.default_rng(1)
    logits = np.array([1.0, 0.0, -1.0])
    counts = np.bincount([gumbel_order(logits, 1, 1.0, rng)[0] for _ in range(10_000)], minlength=3)
    p = np.exp(logits) / np.exp(logits).sum()
    assert stats.chisquare(counts, 10_000 * p).pvalue > 0.01


def test_greedy_equals_noise_free_order():
    rng = np.random.default_rng(2)
    for _ in range(20):
        vals = rng.integers(-2, 3, size=8).astype(float)
        logits = dict(enumerate(vals))
        assert greedy_topk(logits, 3) == [int(i) for i in gumbel_order(vals, 3, 1.0, None)]


def test_greedy_breaks_ties_by_id():
    assert greedy_topk({4: 1.0, 2: 1.0, 9: 1.0, 1: 0.5}, 2) == [2, 4]


def test_plackett_luce_sums_to_one_over_orders():
    from itertools import permutations
    logits = np.array([0.5, -0.2, 1.3, 0.0])
    total = sum(np.exp(plackett_luce_logprob(logits, o, 0.7)) for o in permutations(range(4), 2))
    assert total == pytest.approx(1.0)


def test_plackett_luce_hand_example():
    logits = np.log(np.array([1.0, 2.0, 3.0]))
    # P(2 then 0) = 3/6 * 1/3
    assert plackett_luce_logprob(logits, [2, 0]) == pytest.approx(np.log(1 / 6))


def test_batched_logprob_matches_scalar(rng):
    sizes = [4, 1, 6]
    vals = rng.standard_normal(sum(sizes))
    groups, start = [], 0
    for n in sizes:
        groups.append((start, rng.permutation(n)[:min(n, 3)], n))
        start += n
    out = batched_pl_logprob(Tensor(vals), groups, 0.5, len(groups))
    for g, (s, order, n) in enumerate(groups):
        assert out.data[g] == pytest.approx(plackett_luce_logprob(vals[s:s + n], order, 0.5))


def test_batched_logprob_gradient_matches_finite_differences(rng):
    vals = rng.standard_normal(5)
    groups = [(0, np.array([3, 1]), 5)]
    x = Tensor(vals.copy(), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(batched_pl_logprob(x, groups, 0.8, 1))
    tape.backward(loss)
    eps = 1e-6
    for i in range(5):
        d = np.zeros(5)
        d[i] = eps
        fd = (plackett_luce_logprob(vals + d, [3, 1], 0.8) - plackett_luce_logprob(vals - d, [3, 1], 0.8)) / (2 * eps)
        assert x.grad[i] == pytest.approx(fd, abs=1e-7)


# --- sampler config --------------------------------------------------------

def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(expand=(5,), caps=(3,))
    with pytest.raises(ConfigError):
        SamplerConfig(expand=(5, 5), caps=(10,))
    with pytest.raises(ConfigError):
        SamplerConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        SamplerConfig(cap_by="degree")
    assert SamplerConfig(mode="stochastic").with_mode("greedy").mode == "greedy"


# --- environment and rollouts ---------------------------------------------

def test_frontier_and_caps(rng):
    g, x, env, _ = tree_env(rng)
    mask = np.zeros(env.size, dtype=bool)
    mask[0] = True
    np.testing.assert_array_equal(env.frontier(mask, None), [1, 2])
    mask[[1, 2]] = True
    full = env.frontier(mask, None)
    np.testing.assert_array_equal(full, [3, 4, 5, 6])
    capped = env.frontier(mask, 2)
    best = sorted(full, key=lambda u: (-env.sim[u], u))[:2]
    np.testing.assert_array_equal(capped, sorted(best))


def test_frontier_cap_by_prior(rng):
    _, _, env, _ = tree_env(rng)
    env.prior = np.arange(env.size, dtype=float)[::-1].copy()
    mask = np.zeros(env.size, dtype=bool)
    mask[[0, 1, 2]] = True
    np.testing.assert_array_equal(env.frontier(mask, 2, "prior"), [3, 4])


def test_in_direction_uses_reversed_edges(rng):
    g = tree()
    view = SubgraphView(g, range(g.num_nodes))
    env = QueryEnv.build(view, [5], np.ones(2), np.zeros(g.num_nodes), direction="in")
    mask = np.zeros(env.size, dtype=bool)
    mask[5] = True
    np.testing.assert_array_equal(env.frontier(mask, None), [2])


def test_greedy_two_steps_follow_hand_trace(rng):
    """Recompute each step's logits with the loop oracle on G_t = V_t plus U_t and replay argmax-c."""
    g, x, env, zq = tree_env(rng)
    p = model(seed=4)
    for t in p:
        t.data[...] = rng.uniform(-1, 1, t.shape)
    sampler = SamplerConfig(expand=(1, 2), caps=None, mode="greedy")
    state = ExpansionState.start(env)

    V = {0}
    expected = [V.copy()]
    for c in sampler.expand:
        U = sorted({v for s, _, v in g.edges if s in V} - V)
        kept = sorted(V | set(U))
        pos = {u: i for i, u in enumerate(kept)}
        edges = [(pos[s], r, pos[v]) for s, r, v in g.edges if s in pos and v in pos]
        h = reference_layer_stack(x[kept], zq, edges, p, 1)
        logit = {u: float(reference_head(h[pos[u]], zq, p, "policy")[0]) for u in U}
        V |= set(sorted(U, key=lambda u: (-logit[u], u))[:c])
        expected.append(V.copy())

    seen = [set(state.selected)]
    for _ in sampler.expand:
        expand_step(state, p, sampler, x)
        seen.append(set(state.selected))
    assert seen == expected
    assert [len(s) for s in seen] == [1, 2, 4]


def test_rollout_sets_are_nested_and_bounded(rng):
    g, x, env, _ = tree_env(rng)
    p = model()
    sampler = SamplerConfig(expand=(2, 3, 4), caps=(3, 4, 6), mode="stochastic")
    for seed in range(5):
        states, logp = rollout([env], p, sampler, x, rng=np.random.default_rng(seed))
        st = states[0]
        V = set(env.seeds.tolist())
        for step, c in zip(st.steps, sampler.expand):
            assert set(step.chosen.tolist()) <= set(step.frontier.tolist())
            assert len(step.chosen) == min(c, len(step.frontier))
            assert not V & set(step.chosen.tolist())
            V |= set(step.chosen.tolist())
        assert V == set(st.selected)
        assert len(V) <= 1 + sum(sampler.expand)
        assert logp.data[0] == pytest.approx(to_trajectory(st).logprob)


def test_small_frontier_is_taken_whole(rng):
    g, x, env, _ = tree_env(rng)
    states, _ = rollout([env], model(), SamplerConfig(expand=(5,), caps=None, mode="greedy"), x)
    assert set(states[0].selected) == {0, 1, 2}


def test_policy_gradient_matches_finite_differences(rng):
    """Sampled picks held fixed: d/dtheta of -A log pi(tau) through the whole GNN."""
    g, x, env, _ = tree_env(rng)
    p = model(hidden=3, seed=2)
    sampler = SamplerConfig(expand=(2, 2), caps=None, mode="stochastic", temperature=0.7)
    adv = np.array([0.5, -0.5])

    def loss_value(params):
        states, logp = rollout([env, env], params, sampler, x, rng=np.random.default_rng(9))
        return policy_loss(logp, adv).data.item(), states

    with Tape() as tape:
        states, logp = rollout([env, env], p, sampler, x, rng=np.random.default_rng(9))
        loss = policy_loss(logp, adv)
    tape.backward(loss)
    picks = [s.selected for s in states]
    eps = 1e-6
    for name in ("policy.W2", "W_in", "layer0.W_K"):
        t = p[name]
        for idx in list(np.ndindex(t.shape))[:4]:
            old = t.data[idx]
            t.data[idx] = old + eps
            up, s_up = loss_value(p)
            t.data[idx] = old - eps
            down, s_down = loss_value(p)
            t.data[idx] = old
            assert [s.selected for s in s_up] == picks == [s.selected for s in s_down]
            assert t.grad[idx] == pytest.approx((up - down) / (2 * eps), abs=1e-6)


def test_inference_is_deterministic(rng):
    g, x, env, _ = tree_env(rng, answers=[3])
    p = model()
    sampler = SamplerConfig(expand=(2, 2), caps=(2, 3), mode="stochastic")
    a = run_inference_batch([env], p, sampler, x, topk=5)
    b = run_inference_batch([env], p, sampler, x, topk=5)
    assert a == b
    ranked, final = a[0]
    assert {u for u, _ in ranked} <= final
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)


def test_stochastic_inference_varies_with_rng(rng):
    g, x, env, _ = tree_env(rng)
    p = model()
    for t in p:
        t.data[...] *= 0.01
    sampler = SamplerConfig(expand=(1, 2), caps=None, mode="stochastic", temperature=5.0)
    finals = {frozenset(run_inference_batch([env], p, sampler, x, rng=np.random.default_rng(s))[0][1])
              for s in range(20)}
    assert len(finals) > 1
