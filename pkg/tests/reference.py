"""Slow, loop-based re-implementations used as test oracles."""

import numpy as np


def reference_layer_stack(x, zq, edges, p, layers):
    """Scalar-loop re-implementation of the encoder for a tiny graph."""
    P = {k: t.data.astype(np.float64) for k, t in p.items()}
    d = P["b_in"].shape[0]
    h = np.array([(xi + zq @ P["W_q"]) @ P["W_in"] + P["b_in"] for xi in x])
    for l in range(layers):
        L = lambda k: P[f"layer{l}.{k}"]  # noqa: E731
        e = np.maximum(P["rel_emb"] @ L("edge_W1") + L("edge_b1"), 0) @ L("edge_W2") + L("edge_b2")
        new = h.copy()
        for i in range(len(h)):
            inc = [(s, r) for s, r, t in edges if t == i]
            if not inc:
                continue
            scores = []
            for s, r in inc:
                q, k = h[i] @ L("W_Q"), h[s] @ L("W_K")
                scores.append(sum(q[c] * k[c] * e[r][c] for c in range(d)) / np.sqrt(d))
            w = np.exp(np.array(scores) - max(scores))
            w /= w.sum()
            for (s, r), a in zip(inc, w):
                new[i] = new[i] + a * (h[s] @ L("W_V") + e[r][d:])
        out = []
        for row in new:
            mu, var = row.mean(), row.var()
            z = (row - mu) / np.sqrt(var + 1e-5) * L("norm_scale") + L("norm_shift")
            out.append(np.maximum(z @ L("ffn_W1") + L("ffn_b1"), 0) @ L("ffn_W2") + L("ffn_b2"))
        h = np.array(out)
    return h


def reference_head(h_row, zq, p, head):
    P = {k: t.data.astype(np.float64) for k, t in p.items()}
    x = np.concatenate([h_row, zq @ P["W_q"]])
    hid = np.maximum(x @ P[f"{head}.W1"] + P[f"{head}.b1"], 0)
    return hid @ P[f"{head}.W2"] + P[f"{head}.b2"]


def brute_force_metrics(ranked, full_set, answers):
    """Metric values recomputed from position arrays, independent of the package code."""
    ranked = np.asarray(list(ranked), dtype=np.int64)
    is_ans = np.isin(ranked, np.asarray(sorted(answers), dtype=np.int64))
    pos = np.flatnonzero(is_ans)
    n_ans = len(answers)
    found = len(set(full_set) & set(answers))
    return {
        "hit@1": float(is_ans[:1].sum() > 0),
        "hit@5": float(is_ans[:5].sum() > 0),
        "mrr": 1.0 / (pos[0] + 1) if len(pos) else 0.0,
        "recall@20": is_ans[:20].sum() / n_ans,
        "hit@any": float(found > 0),
        "recall@any": found / n_ans,
    }


def random_metric_instance(rng, nodes=50, answers=5):
    full = rng.choice(nodes * 2, size=nodes, replace=False)
    ranked = rng.permutation(full)[: rng.integers(1, nodes + 1)]
    pool = np.concatenate([full, rng.choice(np.arange(nodes * 2, nodes * 3), size=answers)])
    ans = set(rng.choice(pool, size=answers, replace=False).tolist())
    return ranked.tolist(), set(full.tolist()), ans
