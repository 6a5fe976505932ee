"""Command-line entry points.

Settings resolve in this order, later wins: built-in defaults, the JSON
``--config`` file, ``SEMRANK_*`` environment variables, command-line flags.
Every output carries ``{seed, config_hash, versions}`` so a run can be
replayed; failures print a JSON error record to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SemrankError, SpecError

SCALAR_KEYS = ("seed", "mode", "depth", "topk", "out", "corpus", "queries", "labels", "logs", "qrels",
               "weights", "calibration", "rar_weights", "candidates", "run")
SECTIONS = ("data", "model", "service", "sim", "bench", "rar", "calibrate", "eval")
DEFAULTS = {"seed": 0, "mode": "ibpc", "depth": None, "topk": 100, "out": "out",
            **{s: {} for s in SECTIONS}}


# -- configuration --------------------------------------------------------

def substream(root: int, name: str) -> int:
    """Independent, reproducible seed for a named component."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(args, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = json.loads(json.dumps(DEFAULTS))
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise SpecError(f"config file {args.config!r} not found") from None
        except json.JSONDecodeError as exc:
            raise SpecError(f"config file is not valid JSON: {exc}") from None
        for k, v in loaded.items():
            if k in SECTIONS:
                cfg[k].update(v)
            elif k in SCALAR_KEYS:
                cfg[k] = v
            else:
                raise SpecError(f"unknown config key {k!r}")
    for k in SCALAR_KEYS:
        env = environ.get(f"SEMRANK_{k.upper()}")
        if env is not None:
            cfg[k] = _env_value(env)
    for k in SCALAR_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def config_hash(cfg: dict) -> str:
    canon = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(canon, sort_keys=True, default=str).encode()).hexdigest()[:16]


def make_meta(cfg: dict, artifacts: dict | None = None) -> dict:
    versions = {"semrank": __version__, "numpy": np.__version__}
    versions.update(artifacts or {})
    return {"seed": cfg["seed"], "config_hash": config_hash(cfg), "versions": versions}


def _require(cfg, *keys):
    for k in keys:
        if not cfg.get(k):
            raise SpecError(f"missing required setting {k!r} (flag --{k.replace('_', '-')})")
        if k not in ("mode",) and not Path(cfg[k]).exists():
            raise SpecError(f"{k} file {cfg[k]!r} does not exist")


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_jsonl(path, rows, meta) -> str:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps({**r, "meta": meta}, sort_keys=True) + "\n")
    return str(path)


def write_csv(path, rows, columns, meta) -> str:
    with open(path, "w", newline="") as fh:
        fh.write(f"# meta: {json.dumps(meta, sort_keys=True)}\n")
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return str(path)


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- shared loaders -------------------------------------------------------

def _model_config(cfg):
    from .model import ModelConfig
    return ModelConfig.from_dict(cfg["model"]) if cfg["model"] else ModelConfig()


def load_or_init_weights(cfg):
    from .model import init_model, load_weights
    if cfg.get("weights"):
        _require(cfg, "weights")
        return load_weights(cfg["weights"])
    return init_model(_model_config(cfg), substream(cfg["seed"], "init"))


def load_rar(cfg):
    from .retrieval import RARWeights
    if cfg.get("rar_weights"):
        _require(cfg, "rar_weights")
        d = json.loads(Path(cfg["rar_weights"]).read_text())
        return RARWeights(d["w0"], d["feature_weights"], d["lam"])
    return RARWeights(1.0, {}, 1.0)


def load_calibrator(cfg):
    from .calibration import load_position_calibrator
    if not cfg.get("calibration"):
        return None
    _require(cfg, "calibration")
    return load_position_calibrator(cfg["calibration"])


def _depth(cfg):
    from .midtier import PIDState
    return int(cfg["depth"]) if cfg.get("depth") is not None else PIDState().d_max


# -- subcommands ----------------------------------------------------------

def cmd_gen_data(cfg):
    from .data import GenConfig, generate, write_dataset
    from .model import init_model, save_weights
    gen = GenConfig.from_dict(cfg["data"])
    out = _out_dir(cfg)
    paths = write_dataset(generate(gen, substream(cfg["seed"], "data")), out)
    weights = init_model(_model_config(cfg), substream(cfg["seed"], "init"))
    save_weights(weights, out / "weights.bin")
    paths["weights.bin"] = str(out / "weights.bin")
    meta = make_meta(cfg, {"weights": weights.checksum()})
    (out / "manifest.json").write_text(json.dumps({"files": sorted(paths), "meta": meta}, sort_keys=True, indent=1) + "\n")
    return {"files": paths, "meta": meta}


def _ad_hoc_queries(cfg, args, corpus):
    from .retrieval import load_queries
    from .service import embed_query, query_index
    fixture = load_queries(cfg["queries"]) if cfg.get("queries") else []
    if getattr(args, "query", None):
        emb, source = embed_query(args.query, query_index(fixture), corpus.embeddings.shape[1])
        filters = json.loads(args.filters) if args.filters else {}
        return [("adhoc", args.query, emb, filters, source)]
    if not fixture:
        raise SpecError("retrieve needs --queries or --query")
    return [(q.query_id, q.text, q.embedding, q.filters, "fixture") for q in fixture]


def cmd_retrieve(cfg, args):
    from .retrieval import Corpus
    from .service import retrieve_stage
    _require(cfg, "corpus")
    corpus = Corpus.load(cfg["corpus"])
    rar = load_rar(cfg)
    rows = []
    for qid, text, emb, filters, source in _ad_hoc_queries(cfg, args, corpus):
        top = retrieve_stage(corpus, emb, filters, int(cfg["topk"]), rar, qid)
        rows.append({"query_id": qid, "query": text, "filters": filters, "embedding_source": source,
                     "results": [{"doc_id": d, "score": s, "rank": r} for r, (d, s) in enumerate(top, 1)]})
    meta = make_meta(cfg)
    path = write_jsonl(_out_dir(cfg) / "candidates.jsonl", rows, meta)
    return {"candidates": path, "queries": len(rows), "meta": meta}


def cmd_score(cfg, args):
    from dataclasses import asdict

    from .engine import ScoringEngine, normalize_mode
    from .retrieval import Corpus
    from .service import calibrate_stage, rank_stage, score_stage
    _require(cfg, "corpus", "candidates")
    corpus = Corpus.load(cfg["corpus"])
    weights = load_or_init_weights(cfg)
    engine = ScoringEngine(weights)
    calibrator = load_calibrator(cfg)
    mode = normalize_mode(cfg["mode"])
    depth = _depth(cfg)
    blend = tuple(tuple(x) for x in cfg["service"].get("blend", ()))
    rows, total_flops = [], 0
    for q in read_jsonl(cfg["candidates"]):
        ids = [r["doc_id"] for r in q["results"][:depth]]
        raw, fl = score_stage(engine, corpus, q["query"], ids, mode)
        if fl is not None:
            total_flops += fl.attention_units + fl.linear_units
        cal = calibrate_stage(raw, calibrator)
        ranked = rank_stage(raw, cal, blend)
        rows.append({"query_id": q["query_id"], "query": q["query"], "depth": depth, "mode": mode,
                     "flops": fl.to_dict() if fl else {"attention": 0, "linear": 0},
                     "results": [asdict(r) for r in ranked]})
    meta = make_meta(cfg, {"weights": weights.checksum()})
    path = write_jsonl(_out_dir(cfg) / "scores.jsonl", rows, meta)
    return {"scores": path, "queries": len(rows), "flops": total_flops, "meta": meta}


def cmd_train_rar(cfg, args):
    from .data import load_labels
    from .plots import loss_figure
    from .retrieval import (Corpus, RARDataset, RARWeights, load_queries, rar_accuracy, separable_rar_set,
                            train_rar)
    opts = {"lam": 0.5, "lr": 0.1, "epochs": 500, **cfg["rar"]}
    if args.synthetic:
        data = separable_rar_set(substream(cfg["seed"], "sampling"))
    else:
        _require(cfg, "corpus", "queries", "labels")
        corpus = Corpus.load(cfg["corpus"])
        queries = {q.query_id: q for q in load_queries(cfg["queries"])}
        data = RARDataset.from_pairs(corpus, queries, load_labels(cfg["labels"]))
    init = RARWeights(1.0, {n: 0.0 for n in data.feature_names}, float(opts["lam"]))
    history: list = []
    w = train_rar(init, data, lr=float(opts["lr"]), epochs=int(opts["epochs"]), history=history)
    out = _out_dir(cfg)
    meta = make_meta(cfg)
    rec = {**w.to_json(), "initial_loss": history[0], "final_loss": history[-1],
           "train_accuracy": rar_accuracy(w, data), "meta": meta}
    (out / "rar_weights.json").write_text(json.dumps(rec, sort_keys=True, indent=1) + "\n")
    write_csv(out / "rar_loss.csv", [{"epoch": i, "loss": v} for i, v in enumerate(history)],
              ["epoch", "loss"], meta)
    loss_figure(history, out / "rar_loss.png", meta)
    return {"rar_weights": str(out / "rar_weights.json"), "initial_loss": history[0],
            "final_loss": history[-1], "train_accuracy": rec["train_accuracy"], "meta": meta}


def calibration_rows(engine, corpus, queries, logs, action: str) -> list:
    """``(raw relevance score, outcome, position)`` for every logged impression."""
    from .model import RELEVANCE_TASK
    from .service import score_stage
    text = {q.query_id: q.text for q in queries}
    shown: dict = {}
    for row in logs:
        shown.setdefault(row["query_id"], []).append(row)
    out = []
    for qid in sorted(shown):
        ids = sorted({r["doc_id"] for r in shown[qid]})
        raw, _ = score_stage(engine, corpus, text[qid], ids, "ibpc", f"calibrate-{qid}")
        out += [(raw[r["doc_id"]][RELEVANCE_TASK], r["actions"][action], r["position"]) for r in shown[qid]]
    return out


def cmd_calibrate(cfg, args):
    from .calibration import fit_position_conditional, observed_expected_ratio, save_heads
    from .data import load_logs
    from .engine import ScoringEngine
    from .plots import reliability_figure
    from .retrieval import Corpus, load_queries
    _require(cfg, "corpus", "queries", "logs")
    action = cfg["calibrate"].get("action", "click")
    weights = load_or_init_weights(cfg)
    corpus = Corpus.load(cfg["corpus"])
    rows = calibration_rows(ScoringEngine(weights), corpus, load_queries(cfg["queries"]),
                            load_logs(cfg["logs"]), action)
    cal = fit_position_conditional(rows)
    out = _out_dir(cfg)
    meta = make_meta(cfg, {"weights": weights.checksum()})
    save_heads(cal.all_heads(), out / "calibration.jsonl")
    pairs = [(s, y) for s, y, _ in rows]
    pred = [cal.calibrate(s, r) for s, _, r in rows]
    oe = observed_expected_ratio(pred, [y for _, y, _ in rows])
    reliability_figure(cal.global_head, pairs, out / "calibration.png", meta)
    write_csv(out / "calibration.csv",
              [{"head": h.head_id, "blocks": len(h.values), "min": float(h.values.min()),
                "max": float(h.values.max()), "rows": int(h.counts.sum())} for h in cal.all_heads()],
              ["head", "blocks", "min", "max", "rows"], meta)
    return {"calibration": str(out / "calibration.jsonl"), "rows": len(rows), "oe_train": oe,
            "action": action, "meta": meta}


def cmd_eval(cfg, args):
    from .data import load_logs, load_qrels
    from .evaluate import evaluate_run
    from .plots import metric_figure
    _require(cfg, "run", "qrels")
    ks = tuple(cfg["eval"].get("ks", (10,)))
    logs = load_logs(cfg["logs"]) if cfg.get("logs") else []
    table = evaluate_run(read_jsonl(cfg["run"]), load_qrels(cfg["qrels"]), ks, logs,
                         cfg["eval"].get("action", "click"))
    out = _out_dir(cfg)
    meta = make_meta(cfg)
    write_jsonl(out / "eval.jsonl", table, meta)
    write_csv(out / "eval.csv", table, ["metric", "k", "value", "gain_convention"], meta)
    metric_figure(table, out / "eval.png", meta)
    names = [r["metric"] if r["k"] is None else f"{r['metric']}@{r['k']}" for r in table]
    for name, r in zip(names, table):
        print(f"{name:<24}{r['value']:.6f}", file=sys.stderr)
    return {"eval": str(out / "eval.jsonl"), "metrics": dict(zip(names, (r["value"] for r in table))),
            "meta": meta}


def run_bench(weights, T_q: int, T_i: int, N_i: int, repeats: int, seed: int) -> list:
    """Median wall clock and flops per mode on one random request."""
    from .engine import IBPC, MIXED, MULTI_ITEM, NAIVE, ScoreItem, ScoreRequest, ScoringEngine, substitute_embeddings
    rng = np.random.default_rng(seed)
    prefix = tuple(int(t) for t in rng.integers(0, 256, T_q))
    toks = [tuple(int(t) for t in rng.integers(0, 256, T_i)) for _ in range(N_i)]
    engine = ScoringEngine(weights)
    results, ref = [], None
    for mode in (NAIVE, IBPC, MULTI_ITEM, MIXED):
        if mode == MIXED:
            items = [ScoreItem(i, embeds=substitute_embeddings(weights, t)) for i, t in enumerate(toks)]
        else:
            items = [ScoreItem(i, tokens=t) for i, t in enumerate(toks)]
        req = ScoreRequest("bench", prefix, items, mode)
        times, res = [], None
        for _ in range(repeats):
            t0 = time.perf_counter()
            res = engine.score(req)
            times.append(time.perf_counter() - t0)
        rel = res.task_matrix()
        if ref is None:
            ref = rel
        wall = float(np.median(times))
        results.append({"mode": mode, "wall_s": wall, "items_per_s": N_i / wall,
                        "attention_flops": res.flops.attention_units, "linear_flops": res.flops.linear_units,
                        "max_dev_vs_naive": float(np.max(np.abs(rel - ref))),
                        "T_q": T_q, "T_i": T_i, "N_i": N_i, "repeats": repeats})
    base = results[0]["items_per_s"]
    for r in results:
        r["speedup_vs_naive"] = r["items_per_s"] / base
    return results


def cmd_bench(cfg, args):
    from .plots import bench_figure
    opts = {"T_q": 500, "T_i": 50, "N_i": 100, "repeats": 20, **cfg["bench"]}
    weights = load_or_init_weights(cfg)
    rows = run_bench(weights, int(opts["T_q"]), int(opts["T_i"]), int(opts["N_i"]), int(opts["repeats"]),
                     substream(cfg["seed"], "sampling"))
    out = _out_dir(cfg)
    meta = make_meta(cfg, {"weights": weights.checksum()})
    write_jsonl(out / "bench.jsonl", rows, meta)
    write_csv(out / "bench.csv", rows, list(rows[0]), meta)
    bench_figure(rows, out / "bench.png", meta)
    return {"bench": str(out / "bench.jsonl"), "rows": rows, "meta": meta}


def cmd_simulate(cfg, args):
    from dataclasses import asdict

    from .plots import simulation_figure
    from .simulation import SimConfig, Toggles, run_simulation
    sim_opts = dict(cfg["sim"])
    sim_opts.setdefault("seed", substream(cfg["seed"], "sampling"))
    toggles = Toggles(**{k: bool(v) for k, v in sim_opts.pop("toggles", {}).items()})
    for name in ("cache", "pid", "retry", "shaping"):
        if getattr(args, name, False) or getattr(args, "all", False):
            toggles = Toggles(**{**asdict(toggles), name: True})
    sc = SimConfig.from_dict(sim_opts)
    metrics = run_simulation(sc, toggles)
    out = _out_dir(cfg)
    meta = make_meta(cfg)
    write_jsonl(out / "sim.jsonl", metrics.records, meta)
    write_csv(out / "sim.csv", metrics.records,
              ["t", "class", "p50", "p99", "hit_rate", "mean_depth", "deferred", "flops"], meta)
    simulation_figure(metrics, out / "sim.png", meta)
    summary = metrics.summary()
    (out / "sim_summary.json").write_text(json.dumps({**summary, "toggles": asdict(toggles), "meta": meta},
                                                     sort_keys=True, indent=1) + "\n")
    return {"summary": summary, "toggles": asdict(toggles), "meta": meta}


def build_service(cfg):
    from .retrieval import Corpus, load_queries
    from .service import SearchService, ServiceConfig
    _require(cfg, "corpus")
    opts = dict(cfg["service"])
    opts.setdefault("mode", cfg["mode"])
    if cfg.get("depth") is not None:
        opts["fixed_depth"] = int(cfg["depth"])
    queries = load_queries(cfg["queries"]) if cfg.get("queries") else []
    return SearchService(Corpus.load(cfg["corpus"]), load_or_init_weights(cfg), load_rar(cfg),
                         load_calibrator(cfg), queries, ServiceConfig(**opts))


def cmd_serve(cfg, args):
    from .service import make_server
    server = make_server(build_service(cfg), args.host, args.port)
    print(json.dumps({"listening": f"http://{args.host}:{server.server_address[1]}"}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return None


COMMANDS = {"gen-data": cmd_gen_data, "retrieve": cmd_retrieve, "score": cmd_score,
            "train-rar": cmd_train_rar, "calibrate": cmd_calibrate, "eval": cmd_eval,
            "bench": cmd_bench, "simulate": cmd_simulate, "serve": cmd_serve}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=["naive", "ibpc", "multi-item", "mixed"])
    common.add_argument("--depth", type=int, help="scoring depth (candidates sent to the ranker)")
    common.add_argument("--topk", type=int, help="retrieval result count")
    common.add_argument("--out", help="output directory")
    for name in ("corpus", "queries", "labels", "logs", "qrels", "weights", "calibration",
                 "rar-weights", "candidates", "run"):
        common.add_argument(f"--{name}", dest=name.replace("-", "_"))

    p = argparse.ArgumentParser(prog="semrank", description="Semantic search ranking toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "retrieve":
            sp.add_argument("--query", help="ad hoc query text instead of --queries")
            sp.add_argument("--filters", help="JSON filter map for --query")
        if name == "train-rar":
            sp.add_argument("--synthetic", action="store_true", help="use the separable synthetic set")
        if name == "simulate":
            for t in ("cache", "pid", "retry", "shaping", "all"):
                sp.add_argument(f"--{t}", action="store_true")
        if name == "serve":
            sp.add_argument("--host", default="127.0.0.1")
            sp.add_argument("--port", type=int, default=8080)
    return p


def _error_record(exc) -> dict:
    if isinstance(exc, SemrankError):
        return exc.to_record()
    return {"error": type(exc).__name__.lower(), "type": type(exc).__name__, "message": str(exc)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        fn = COMMANDS[args.command]
        result = fn(cfg) if args.command == "gen-data" else fn(cfg, args)
    except (SemrankError, ValueError, OSError, KeyError) as exc:
        print(json.dumps(_error_record(exc), sort_keys=True, default=str), file=sys.stderr)
        return 2
    if result is not None:
        print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
