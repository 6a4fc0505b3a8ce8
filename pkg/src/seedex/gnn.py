"""Query-conditioned sparse graph transformer with expansion and scoring heads.

Per layer, for every edge ``j -> i`` of the (sub)graph::

    a_ij  = Q_i . (K_j * EK_ij) / sqrt(d)
    alpha = softmax of a_ij over the in-neighbors of i
    m_ij  = alpha_ij * (V_j + EV_ij)
    h_i'  = FFN(Norm(h_i + sum_j m_ij))

where ``(EK_ij, EV_ij)`` come from a small MLP over a learned relation-type
embedding. The query reaches the nodes only through the injected input
features; there is no extra query node.

Many small graphs (one per rollout) are encoded at once as a disjoint union,
see :class:`GraphBatch`.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .errors import ConfigError, FormatError, ShapeError
from .graph import SubgraphView

INJECTION_MODES = ("add", "concat")
CKPT_MAGIC = b"SDR1"


@dataclass
class ModelConfig:
    in_dim: int
    num_relations: int
    hidden: int = 16
    layers: int = 3
    injection: str = "add"
    dropout: float = 0.1
    reverse_edges: bool = False
    edge_dim: int | None = None
    head_hidden: int | None = None

    def __post_init__(self):
        if self.injection not in INJECTION_MODES:
            raise ConfigError(f"unknown injection mode {self.injection!r}; expected one of {INJECTION_MODES}")
        if self.in_dim < 1 or self.hidden < 1 or self.layers < 0 or self.num_relations < 1:
            raise ConfigError("model dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def d_edge(self) -> int:
        return self.edge_dim or self.hidden

    @property
    def d_head(self) -> int:
        return self.head_hidden or self.hidden

    @property
    def edge_types(self) -> int:
        return self.num_relations * (2 if self.reverse_edges else 1)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, D = self.hidden, self.in_dim
        feat_in = D if self.injection == "add" else 2 * D + 1
        shapes = {
            "W_q": (D, D),
            "W_in": (feat_in, d),
            "b_in": (d,),
            "rel_emb": (self.edge_types, self.d_edge),
        }
        for l in range(self.layers):
            p = f"layer{l}."
            shapes.update({
                p + "W_Q": (d, d), p + "W_K": (d, d), p + "W_V": (d, d),
                p + "edge_W1": (self.d_edge, d), p + "edge_b1": (d,),
                p + "edge_W2": (d, 2 * d), p + "edge_b2": (2 * d,),
                p + "norm_scale": (d,), p + "norm_shift": (d,),
                p + "ffn_W1": (d, 2 * d), p + "ffn_b1": (2 * d,),
                p + "ffn_W2": (2 * d, d), p + "ffn_b2": (d,),
            })
        for head, out in (("policy", 1), ("score", 2)):
            shapes.update({
                f"{head}.W1": (d + D, self.d_head), f"{head}.b1": (self.d_head,),
                f"{head}.W2": (self.d_head, out), f"{head}.b2": (out,),
            })
        return shapes


class ModelParams:
    """Named learnable tensors; iteration order is the config's shape order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        shapes = config.param_shapes()
        missing = set(shapes) - set(tensors)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"parameter {name}: shape {tensors[name].shape} != expected {shape}")
            if not np.isfinite(tensors[name].data).all():
                raise ConfigError(f"parameter {name} has non-finite values")
        self.tensors = {name: tensors[name] for name in shapes}

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in config.param_shapes().items():
            if name.endswith("norm_scale"):
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            elif name == "rel_emb":
                arr = rng.standard_normal(shape)
            else:
                arr = rng.standard_normal(shape) * math.sqrt(1.0 / shape[0])
            tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        for l in range(config.layers):
            # start the key modulation at one so early attention is plain dot-product
            tensors[f"layer{l}.edge_b2"].data[: config.hidden] = 1.0
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self["W_in"].dtype

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self))

    def zero_grad(self) -> None:
        for t in self:
            t.grad = None

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.astype(dtype), requires_grad=True, name=n)
                                         for n, t in self.items()})

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}


# ---------------------------------------------------------------------------
# batched graphs
# ---------------------------------------------------------------------------

@dataclass
class GraphBatch:
    """Disjoint union of member sets, each paired with one query vector.

    Row ``i`` holds KG node ``node_ids[i]`` of graph ``graph_index[i]``; edges
    are given in row indices.
    """

    node_ids: np.ndarray
    graph_index: np.ndarray
    feats: np.ndarray
    queries: np.ndarray
    src: np.ndarray
    rel: np.ndarray
    dst: np.ndarray
    offsets: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_graphs(self) -> int:
        return len(self.queries)

    def rows_of(self, g: int) -> slice:
        return slice(int(self.offsets[g]), int(self.offsets[g + 1]))

    @classmethod
    def build(cls, views: Sequence[SubgraphView], queries, node_feats) -> "GraphBatch":
        queries = np.asarray(queries)
        node_feats = np.asarray(node_feats)
        if queries.ndim != 2 or len(queries) != len(views):
            raise ShapeError("need one query vector per view")
        ids, gidx, src, rel, dst = [], [], [], [], []
        offsets = [0]
        for g, view in enumerate(views):
            base = offsets[-1]
            s, r, d = view.local_edges()
            ids.append(view.members)
            gidx.append(np.full(len(view), g, dtype=np.int64))
            src.append(s + base); rel.append(r); dst.append(d + base)
            offsets.append(base + len(view))
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, np.int64)  # noqa: E731
        node_ids = cat(ids).astype(np.int64)
        return cls(node_ids, cat(gidx), node_feats[node_ids], queries,
                   cat(src), cat(rel), cat(dst), np.asarray(offsets, dtype=np.int64))

    @classmethod
    def from_arrays(cls, node_ids, graph_index, feats, queries, src, rel, dst) -> "GraphBatch":
        graph_index = np.asarray(graph_index, dtype=np.int64)
        counts = np.bincount(graph_index, minlength=len(queries))
        offsets = np.r_[0, np.cumsum(counts)].astype(np.int64)
        return cls(np.asarray(node_ids, np.int64), graph_index, np.asarray(feats), np.asarray(queries),
                   np.asarray(src, np.int64), np.asarray(rel, np.int64), np.asarray(dst, np.int64), offsets)


@dataclass
class EncodedBatch:
    batch: GraphBatch
    h: Tensor              # num_nodes x hidden
    query_proj: Tensor     # num_graphs x in_dim  (W_q z_q per graph)
    attention: list[np.ndarray]

    @property
    def node_ids(self) -> np.ndarray:
        return self.batch.node_ids


@dataclass
class EncodedSubgraph:
    node_order: list[int]
    h: np.ndarray
    _encoded: EncodedBatch = field(repr=False)


def inject_query(z_v, z_q, params: ModelParams, mode: str | None = None):
    """Query-conditioned input features (before the input projection).

    ``add``: ``z_v + W_q z_q``. ``concat``: ``[z_v | W_q z_q | cos(z_v, z_q)]``.
    Accepts single vectors or row-stacked matrices of node features.
    """
    mode = mode or params.config.injection
    if mode not in INJECTION_MODES:
        raise ValueError(f"unknown injection mode {mode!r}")
    zv = np.atleast_2d(np.asarray(z_v, dtype=params.dtype))
    zq = np.atleast_2d(np.asarray(z_q, dtype=params.dtype))
    qp = zq @ params["W_q"].data
    if mode == "add":
        out = zv + qp
    else:
        nv = np.linalg.norm(zv, axis=1, keepdims=True)
        nq = np.linalg.norm(zq, axis=1, keepdims=True)
        cos = (zv * zq).sum(axis=1, keepdims=True) / np.maximum(nv * nq, 1e-12)
        out = np.concatenate([zv, np.broadcast_to(qp, (len(zv), qp.shape[1])), cos], axis=1)
    return out[0] if np.ndim(z_v) == 1 else out


def _mlp2(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, params[prefix + ".W1"]), params[prefix + ".b1"]))
    return ad.add(ad.matmul(hidden, params[prefix + ".W2"]), params[prefix + ".b2"])


def encode_batch(batch: GraphBatch, params: ModelParams, train: bool = False,
                 rng: np.random.Generator | None = None) -> EncodedBatch:
    cfg = params.config
    dt = params.dtype
    if len(batch.rel) and (batch.rel.min() < 0 or batch.rel.max() >= cfg.num_relations):
        raise ConfigError("edge relation type has no learned feature")
    if batch.feats.shape[1] != cfg.in_dim or batch.queries.shape[1] != cfg.in_dim:
        raise ShapeError(f"features must have dim {cfg.in_dim}")
    d = cfg.hidden
    feats = Tensor(batch.feats.astype(dt, copy=False))
    queries = Tensor(batch.queries.astype(dt, copy=False))
    qproj = ad.matmul(queries, params["W_q"])
    qrows = ad.gather_rows(qproj, batch.graph_index)
    if cfg.injection == "add":
        x = ad.add(feats, qrows)
    else:
        zq_rows = batch.queries[batch.graph_index].astype(dt, copy=False)
        fv = batch.feats.astype(dt, copy=False)
        cos = (fv * zq_rows).sum(axis=1) / np.maximum(
            np.linalg.norm(fv, axis=1) * np.linalg.norm(zq_rows, axis=1), 1e-12)
        x = ad.concat([feats, qrows, Tensor(cos[:, None].astype(dt))], axis=1)
    h = ad.add(ad.matmul(x, params["W_in"]), params["b_in"])

    src, rel, dst = batch.src, batch.rel, batch.dst
    if cfg.reverse_edges:
        src, dst, rel = np.r_[src, dst], np.r_[dst, src], np.r_[rel, rel + cfg.num_relations]
    seg = Segments(dst, batch.num_nodes)
    inv_sqrt_d = 1.0 / math.sqrt(d)
    attention = []
    drop = cfg.dropout if train else 0.0
    if drop > 0 and rng is None:
        rng = np.random.default_rng(0)
    for l in range(cfg.layers):
        p = f"layer{l}."
        if len(src):
            q = ad.matmul(h, params[p + "W_Q"])
            k = ad.matmul(h, params[p + "W_K"])
            v = ad.matmul(h, params[p + "W_V"])
            e_hidden = ad.relu(ad.add(ad.matmul(params["rel_emb"], params[p + "edge_W1"]), params[p + "edge_b1"]))
            e_out = ad.add(ad.matmul(e_hidden, params[p + "edge_W2"]), params[p + "edge_b2"])
            ek = ad.gather_rows(ad.slice_cols(e_out, 0, d), rel)
            ev = ad.gather_rows(ad.slice_cols(e_out, d, 2 * d), rel)
            qi = ad.gather_rows(q, dst)
            kj = ad.gather_rows(k, src)
            scores = ad.scale(ad.sum(ad.mul(qi, ad.mul(kj, ek)), axis=1), inv_sqrt_d)
            alpha = ad.segment_softmax(scores, seg)
            attention.append(alpha.data)
            msg = ad.mul(ad.reshape(alpha, (-1, 1)), ad.add(ad.gather_rows(v, src), ev))
            agg = ad.segment_sum(msg, seg)
            h = ad.add(h, agg)
        else:
            attention.append(np.zeros(0, dtype=dt))
        h = ad.layer_norm(h, params[p + "norm_scale"], params[p + "norm_shift"])
        inner = ad.relu(ad.add(ad.matmul(h, params[p + "ffn_W1"]), params[p + "ffn_b1"]))
        if drop > 0:
            inner = ad.dropout(inner, ad.dropout_mask(inner.shape, drop, rng, dt))
        h = ad.add(ad.matmul(inner, params[p + "ffn_W2"]), params[p + "ffn_b2"])
    return EncodedBatch(batch, h, qproj, attention)


def _head_input(enc: EncodedBatch, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    return ad.concat([ad.gather_rows(enc.h, rows),
                      ad.gather_rows(enc.query_proj, enc.batch.graph_index[rows])], axis=1)


def policy_logits_rows(enc: EncodedBatch, rows, params: ModelParams) -> Tensor:
    """Expansion logits for the given batch rows (1-D tensor)."""
    out = _mlp2(_head_input(enc, rows), params, "policy")
    return ad.reshape(out, (-1,))


def score_logits_rows(enc: EncodedBatch, rows, params: ModelParams) -> Tensor:
    """Two-class logits (irrelevant, relevant) for the given rows."""
    return _mlp2(_head_input(enc, rows), params, "score")


def node_scores_rows(enc: EncodedBatch, rows, params: ModelParams) -> Tensor:
    """Logit difference ``logit(relevant) - logit(irrelevant)`` per row."""
    logits = score_logits_rows(enc, rows, params)
    return ad.reshape(ad.sub(ad.slice_cols(logits, 1, 2), ad.slice_cols(logits, 0, 1)), (-1,))


# ---------------------------------------------------------------------------
# single-subgraph convenience API
# ---------------------------------------------------------------------------

def encode(g_t: SubgraphView, z_q, node_feats, params: ModelParams) -> EncodedSubgraph:
    batch = GraphBatch.build([g_t], np.atleast_2d(z_q), node_feats)
    enc = encode_batch(batch, params)
    return EncodedSubgraph([int(v) for v in batch.node_ids], enc.h.data, enc)


def _rows_for(enc: EncodedSubgraph, nodes: Iterable[int]) -> tuple[list[int], np.ndarray]:
    pos = {v: i for i, v in enumerate(enc.node_order)}
    nodes = [int(u) for u in nodes]
    missing = [u for u in nodes if u not in pos]
    if missing:
        raise ValueError(f"nodes {missing} are not part of the encoded subgraph")
    return nodes, np.array([pos[u] for u in nodes], dtype=np.int64)


def policy_logits(enc: EncodedSubgraph, z_q, frontier: Iterable[int], params: ModelParams) -> dict[int, float]:
    del z_q  # already injected at encode time
    nodes, rows = _rows_for(enc, frontier)
    vals = policy_logits_rows(enc._encoded, rows, params).data
    return {u: float(x) for u, x in zip(nodes, vals)}


def node_scores(enc: EncodedSubgraph, z_q, params: ModelParams) -> dict[int, float]:
    del z_q
    rows = np.arange(len(enc.node_order))
    vals = node_scores_rows(enc._encoded, rows, params).data
    return {u: float(x) for u, x in zip(enc.node_order, vals)}


def rank_nodes(scores: dict[int, float]) -> list[int]:
    """Descending score, ties by ascending node id."""
    return sorted(scores, key=lambda v: (-scores[v], v))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    cfg = asdict(params.config)
    if extra:
        cfg["extra"] = extra
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)", path)
    pos = 4
    try:
        (n,) = struct.unpack_from("<I", raw, pos); pos += 4
        cfg = json.loads(raw[pos:pos + n].decode("utf-8")); pos += n
        extra = cfg.pop("extra", {})
        config = ModelConfig(**cfg)
        (count,) = struct.unpack_from("<I", raw, pos); pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos); pos += 2
            name = raw[pos:pos + ln].decode("utf-8"); pos += ln
            (ndim,) = struct.unpack_from("<B", raw, pos); pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos); pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
    except (struct.error, ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}", path) from None
    return ModelParams(config, tensors), extra
