"""Command line entry point: ``seedex <command> [flags]``.

stdout carries machine-readable results (JSON lines or TSV); logs go to
stderr. Exit codes: 0 success, 1 usage or config error, 2 data error
(missing or malformed input), 3 numeric failure.

Every command writes a ``run_manifest.json`` (command, arguments, resolved
config, seed, library versions, input digests) next to its outputs, or to
``--manifest`` when given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as M
from .config import RunConfig
from .dataset import FILES, load_dataset, save_dataset
from .errors import ConfigError, DataError, NumericError
from .gnn import load_checkpoint, save_checkpoint
from .pipeline import (METHODS, Experiment, build_envs, build_retriever, coverage_stats, ensure_dir,
                       index_subgraphs, load_subgraph_cache, write_jsonl)
from .policy import run_inference_batch
from .synth import generate_dataset
from .theory import coverage, tracing

logger = logging.getLogger("seedex")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here exit with 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return vals


def float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def data_digests(directory) -> dict:
    if directory is None:
        return {}
    d = Path(directory)
    return {name: file_digest(d / name) for name in sorted(FILES.values()) if (d / name).exists()}


def write_manifest(args, cfg: RunConfig | None, default_dir=None, inputs: dict | None = None) -> Path:
    """Everything needed to rerun a command; deliberately free of timestamps."""
    import scipy
    path = Path(args.manifest) if args.manifest else Path(default_dir or ".") / "run_manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    argv = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "manifest", "verbose")}
    man = {
        "command": args.command if not getattr(args, "theory_command", None) else f"theory {args.theory_command}",
        "arguments": argv,
        "config": cfg.tree if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else getattr(args, "seed", None),
        "versions": {"seedex": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "inputs": inputs or {},
    }
    path.write_text(json.dumps(man, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def load_config(args, base: dict | None = None) -> RunConfig:
    sets = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"seed={args.seed}")
    return RunConfig.load(args.config, sets, base)


def open_dataset(path):
    if path is None:
        raise UsageError("--data is required")
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"dataset directory not found: {p}")
    return load_dataset(p)


def checkpoint_config(path) -> tuple:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    params, extra = load_checkpoint(p)
    return params, extra.get("config")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args)
    ds = generate_dataset(cfg.synth_config())
    out = ensure_dir(args.out)
    save_dataset(ds, out)
    write_manifest(args, cfg, out, {"generated": data_digests(out)})
    emit({"out": str(out), "nodes": ds.graph.num_nodes, "edges": ds.graph.num_edges,
          "relations": len(ds.graph.relations), "queries": len(ds.queries),
          "splits": {k: len(v) for k, v in sorted(ds.splits.items())}, "seed": cfg.seed})
    return EXIT_OK


def cmd_index(args) -> int:
    cfg = load_config(args)
    ds = open_dataset(args.data)
    r = build_retriever(ds, cfg)
    splits = args.split or sorted(ds.splits)
    rows = []
    for s in splits:
        rows.extend(index_subgraphs(r, ds.split(s), cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(rows, out)
    write_manifest(args, cfg, out.parent, {"data": data_digests(args.data)})
    emit({"out": str(out), "queries": len(rows),
          "mean_size": float(np.mean([len(x["members"]) for x in rows])) if rows else 0.0})
    return EXIT_OK


def cmd_khop(args) -> int:
    if args.budgets:
        args.set = list(args.set or []) + [f"retrieval.expand={json.dumps(args.budgets)}",
                                           "retrieval.caps=null"]
    if args.seeds is not None:
        args.set = list(args.set or []) + [f"retrieval.k0={args.seeds}"]
    cfg = load_config(args)
    ds = open_dataset(args.data)
    r = build_retriever(ds, cfg)
    rc = cfg.retrieval_config()
    budget = cfg.khop_budget()
    for q in ds.split(args.split):
        nodes = r.khop(q.embedding, rc, budget)
        emit({"query_id": q.query_id, "nodes": [ds.graph.external_ids[v] for v in nodes]})
    write_manifest(args, cfg, args.out, {"data": data_digests(args.data)})
    return EXIT_OK


def cmd_retrieve(args) -> int:
    params, stored = checkpoint_config(args.checkpoint)
    r_flags = {"k0": args.k0, "env_budgets": args.budgets, "expand": args.expand, "caps": args.caps,
               "topk": args.topk, "temperature": args.temperature}
    args.set = list(args.set or []) + [f"retrieval.{k}={json.dumps(v)}" for k, v in r_flags.items() if v is not None]
    cfg = load_config(args, stored)
    ds = open_dataset(args.data)
    r = build_retriever(ds, cfg)
    queries = ds.split(args.split)
    cache = load_subgraph_cache(args.subgraphs) if args.subgraphs else None
    envs = build_envs(r, queries, cfg, cache)
    rc = cfg.retrieval_config()
    sampler = cfg.sampler(args.mode)
    rng = np.random.default_rng(cfg.seed) if args.mode == "stochastic" else None
    for q, env_chunk in zip(_chunks(queries, 64), _chunks(envs, 64)):
        results = run_inference_batch(env_chunk, params, sampler, r.node_feats, rc.topk, rng=rng)
        for qq, (ranked, _) in zip(q, results):
            emit({"query_id": qq.query_id,
                  "ranked": [[ds.graph.external_ids[v], round(s, 6)] for v, s in ranked]})
    write_manifest(args, cfg, args.out, {"data": data_digests(args.data),
                                         "checkpoint": file_digest(Path(args.checkpoint))})
    return EXIT_OK


def _chunks(xs, n):
    for i in range(0, len(xs), n):
        yield xs[i:i + n]


def cmd_train(args) -> int:
    if args.epochs is not None:
        args.set = list(args.set or []) + [f"train.epochs={args.epochs}"]
    cfg = load_config(args)
    ds = open_dataset(args.data)
    cache = load_subgraph_cache(args.subgraphs) if args.subgraphs else None
    splits = [s for s in ("train", "val", "test") if s in ds.splits]
    if "train" not in splits:
        raise DataError(f"{args.data}: dataset has no train split")
    exp = Experiment.prepare(ds, cfg, splits, cache)
    for s in splits:
        logger.info("%s subgraphs: %s", s, json.dumps(coverage_stats(exp.envs[s], ds.split(s))))
    out = ensure_dir(args.out)
    eval_splits = [s for s in args.eval_splits.split(",") if s in ds.splits] if args.eval_splits else []
    log_path = out / "train_log.jsonl"
    log_path.write_text("", encoding="utf-8")
    params, history = exp.train(args.mode, cfg.seed, eval_splits, log_path, out)
    for rec in history:
        emit(rec)
    save_checkpoint(params, out / "model.ckpt", {"config": cfg.tree, "mode": args.mode})
    write_manifest(args, cfg, out, {"data": data_digests(args.data)})
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.method in ("seeder", "rerank"):
        if not args.checkpoint:
            raise UsageError(f"--checkpoint is required for method {args.method}")
        params, stored = checkpoint_config(args.checkpoint)
    else:
        params, stored = None, None
    cfg = load_config(args, stored)
    ds = open_dataset(args.data)
    cache = load_subgraph_cache(args.subgraphs) if args.subgraphs else None
    splits = [args.split] if args.method in ("seeder", "rerank") else []
    exp = Experiment.prepare(ds, cfg, splits, cache)
    res = exp.evaluate(args.method, args.split, params)
    sys.stdout.write(res.tsv(args.method))
    if args.per_query:
        rows = [{"query_id": q, **m} for q, m in res.per_query.items()]
        write_jsonl(rows, args.per_query)
    inputs = {"data": data_digests(args.data)}
    if args.checkpoint:
        inputs["checkpoint"] = file_digest(Path(args.checkpoint))
    write_manifest(args, cfg, args.out, inputs)
    return EXIT_OK


def cmd_stability(args) -> int:
    metrics = tuple(args.metrics.split(","))
    if args.logs:
        streams = []
        for path in args.logs:
            p = Path(path)
            if not p.exists():
                raise DataError(f"training log not found: {p}")
            streams.append([json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()])
        cfg = None
    else:
        args.set = list(args.set or []) + [f"train.epochs={args.epochs}"]
        cfg = load_config(args)
        ds = open_dataset(args.data)
        exp = Experiment.prepare(ds, cfg, ("train", "val", "test"))
        out = ensure_dir(args.out) if args.out else None
        streams = []
        for i in range(args.seeds):
            seed = cfg.seed + i
            log_path = out / f"seed{seed}.jsonl" if out else None
            if log_path:
                log_path.write_text("", encoding="utf-8")
            _, hist = exp.train(args.mode, seed, ("val", "test"), log_path, out)
            streams.append(hist)
    try:
        report = M.stability_report(streams, metrics)
    except (KeyError, ValueError) as exc:
        raise DataError(f"cannot build stability report: {exc}") from None
    emit(report)
    write_manifest(args, cfg, args.out, {"logs": {p: file_digest(Path(p)) for p in args.logs or []}})
    return EXIT_OK


def cmd_theory(args) -> int:
    name = args.theory_command
    if name == "trace":
        rep = tracing.tracing_accuracy(args.n, args.k, args.L, args.queries, args.seed)
        rep["passed"] = rep["exact"] == rep["queries"]
    elif name == "compose-errors":
        eps = args.eps if len(args.eps) == args.k else args.eps * args.k if len(args.eps) == 1 else None
        if eps is None:
            raise UsageError("--eps takes one value or one per relation")
        g = tracing.gen_relation_tracing(args.n, args.k, args.seed)
        rep = tracing.corrupted_trace_rate(g, tracing.LinearTracer.build(args.n, args.k), eps, args.L,
                                           args.trials, args.seed + 1)
        rep.update({"n": args.n, "k": args.k, "epsilons": list(eps), "passed": rep["holds"]})
    elif name == "frontier-growth":
        rep = tracing.frontier_growth_mc(args.n, args.k, args.L, args.trials, args.seed)
        rep["passed"] = rep["holds"]
    elif name == "greedy-gap":
        rep = coverage.greedy_gap(args.B, args.L, args.M)
        rep["passed"] = rep["greedy"] < rep["optimal"]
    elif name == "coverage-bound":
        rep = coverage.coverage_bound_check(args.instances, args.seed, args.alpha, args.max_nodes)
        rep["passed"] = rep["holds"]
    else:   # pragma: no cover - argparse restricts the choices
        raise UsageError(f"unknown theory command {name!r}")
    rep["command"] = name
    emit(rep)
    write_manifest(args, None, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="JSON config file (see seedex.config.DEFAULTS)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value, e.g. --set train.lr=0.0005 (repeatable, last wins)")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    if data:
        p.add_argument("--data", help="dataset directory")
    p.add_argument("--manifest", help="where to write run_manifest.json")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="seedex", description="Seed-and-expand retrieval over typed knowledge graphs.")
    ap.add_argument("--version", action="version", version=f"seedex {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more stderr logging")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    _common(p, data=False)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="precompute bounded query subgraphs")
    _common(p)
    p.add_argument("--out", required=True, help="subgraph cache (JSON lines)")
    p.add_argument("--split", action="append", help="split to index (repeatable; default all)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("khop", help="K-hop-with-filtering retrieval")
    _common(p)
    p.add_argument("--budgets", type=int_list, help="per-hop budgets, e.g. 7,10")
    p.add_argument("--seeds", type=int, help="number of dense seeds k0")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="directory for the run manifest")
    p.set_defaults(func=cmd_khop)

    p = sub.add_parser("retrieve", help="learned expansion and final ranking")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k0", type=int)
    p.add_argument("--budgets", type=int_list, help="bounded-subgraph hop budgets, e.g. 60,120,120")
    p.add_argument("--expand", type=int_list, help="nodes added per step, e.g. 7,10")
    p.add_argument("--caps", type=int_list, help="frontier caps per step, e.g. 20,50")
    p.add_argument("--topk", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--mode", choices=("greedy", "stochastic"), default="greedy")
    p.add_argument("--split", default="test")
    p.add_argument("--subgraphs", help="subgraph cache from `seedex index`")
    p.add_argument("--out", help="directory for the run manifest")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", help="train the expansion policy and scoring head")
    _common(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--mode", choices=("seeder", "rerank"), default="seeder",
                   help="seeder: full objective; rerank: score the whole bounded subgraph (ablation)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-splits", default="val", help="comma-separated splits evaluated after each epoch")
    p.add_argument("--subgraphs", help="subgraph cache from `seedex index`")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a retrieval method (TSV)")
    _common(p)
    p.add_argument("--method", choices=METHODS, default="seeder")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--per-query", help="also write per-query metrics (JSON lines)")
    p.add_argument("--subgraphs", help="subgraph cache from `seedex index`")
    p.add_argument("--out", help="directory for the run manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stability", help="validation-test correlation across seeds and epochs")
    _common(p)
    p.add_argument("--logs", nargs="+", help="existing per-epoch training logs (skips training)")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--mode", choices=("seeder", "rerank"), default="seeder")
    p.add_argument("--metrics", default="recall@20", help="comma-separated metric names")
    p.add_argument("--out", help="directory for per-seed logs and the manifest")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("theory", help="theory lab experiments (JSON reports)")
    tsub = p.add_subparsers(dest="theory_command", metavar="experiment", parser_class=_Parser)
    tsub.required = True

    def theory_parser(name, help_text, **defaults):
        tp = tsub.add_parser(name, help=help_text)
        tp.add_argument("--seed", type=int, default=0)
        tp.add_argument("--manifest")
        tp.add_argument("--out", help="directory for the run manifest")
        tp.set_defaults(func=cmd_theory, **defaults)
        return tp

    tp = theory_parser("trace", "exact multi-hop tracing with linear classifiers")
    tp.add_argument("--n", type=int, default=1024)
    tp.add_argument("--k", type=int, default=3)
    tp.add_argument("--L", type=int, default=5)
    tp.add_argument("--queries", type=int, default=1000)

    tp = theory_parser("compose-errors", "failure rate of tracing with noisy classifiers")
    tp.add_argument("--n", type=int, default=1024)
    tp.add_argument("--k", type=int, default=3)
    tp.add_argument("--L", type=int, default=4)
    tp.add_argument("--eps", type=float_list, default=[0.05], help="one rate, or one per relation")
    tp.add_argument("--trials", type=int, default=10000)

    tp = theory_parser("frontier-growth", "Monte Carlo size of new inverse-image frontiers")
    tp.add_argument("--n", type=int, default=4096)
    tp.add_argument("--k", type=int, default=3)
    tp.add_argument("--L", type=int, default=5)
    tp.add_argument("--trials", type=int, default=1000)

    tp = theory_parser("greedy-gap", "frontier-greedy on the bad coverage instance")
    tp.add_argument("--B", type=int, default=5)
    tp.add_argument("--L", type=int, default=3)
    tp.add_argument("--M", type=int, default=100)

    tp = theory_parser("coverage-bound", "greedy vs (1 - exp(-alpha beta)) optimum on random instances")
    tp.add_argument("--instances", type=int, default=200)
    tp.add_argument("--alpha", type=float, default=1.0)
    tp.add_argument("--max-nodes", type=int, default=12)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"seedex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"seedex: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"seedex: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"seedex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
