"""``kgnn`` command line: prepare, train, eval, sweep-hops, sweep-workers, serve.

Exit codes: 0 success, 1 any other failure, 2 invalid config, 3 training
aborted on a non-finite value, 4 unreadable or mismatched checkpoint.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from typing import Optional

import numpy as np

from .config import RunConfig, describe
from .errors import CheckpointError, ConfigError, ContractError, KGNNError, TrainingAborted
from .evaluation import (Model, SweepPoint, link_prediction, sweep, triplet_classification,
                         write_classification_csv, write_ranking_csv)
from .kgstore import KnowledgeGraph, build_graph, load_dataset
from .params import ParameterStore
from .ps.protocol import load_checkpoint_into
from .synthetic import generate, write_dataset
from .trainer import train

log = logging.getLogger("kgnn")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NAN, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
CACHE_NAME = "graph.cache"
STAMP_NAME = "graph.cache.sha256"
INPUT_FILES = ("train.txt", "train.tsv", "valid.txt", "valid.tsv", "test.txt", "test.tsv",
               "entity2id.txt", "relation2id.txt", "attributes.tsv")


# data ----------------------------------------------------------------------------

def input_digest(data_dir: str) -> str:
    h = hashlib.sha256()
    for name in INPUT_FILES:
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            h.update(name.encode() + b"\0")
            with open(path, "rb") as fh:
                h.update(hashlib.sha256(fh.read()).digest())
    return h.hexdigest()


def cache_is_fresh(data_dir: str) -> bool:
    stamp = os.path.join(data_dir, STAMP_NAME)
    if not (os.path.exists(stamp) and os.path.exists(os.path.join(data_dir, CACHE_NAME))):
        return False
    with open(stamp) as fh:
        return fh.read().strip() == input_digest(data_dir)


def load_graph(cfg: RunConfig) -> KnowledgeGraph:
    """The configured graph: generated, read from a fresh cache, or parsed from text files."""
    if cfg["data.synthetic"]:
        g = generate(cfg["data.synthetic"], cfg["data.seed"])
    elif cache_is_fresh(cfg["data.dir"]):
        g = KnowledgeGraph.load(os.path.join(cfg["data.dir"], CACHE_NAME))
    else:
        if not os.path.isdir(cfg["data.dir"]):
            raise ConfigError("data.dir", f"{cfg['data.dir']} is not a directory")
        g = load_dataset(cfg["data.dir"], inverse_edges=cfg["data.inverse_edges"],
                         attributes=cfg["data.attributes"])
    attrs = g.attributes if cfg["data.attributes"] else None
    if g.inverse_edges != cfg["data.inverse_edges"] or attrs is not g.attributes:
        g = build_graph(g.split, g.entity_vocab, g.relation_vocab, attributes=attrs,
                        inverse_edges=cfg["data.inverse_edges"])
    return g


def cmd_prepare(args) -> int:
    data_dir = args.data_dir
    if args.synthetic:
        write_dataset(generate(args.synthetic, args.seed), data_dir)
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    if cache_is_fresh(data_dir):
        print(f"{data_dir}: up-to-date")
        return EXIT_OK
    g = load_dataset(data_dir)
    for name, vocab in (("entity2id.txt", g.entity_vocab), ("relation2id.txt", g.relation_vocab)):
        if not os.path.exists(os.path.join(data_dir, name)):
            vocab.save(os.path.join(data_dir, name))
    tmp = os.path.join(data_dir, CACHE_NAME + ".tmp")
    g.save(tmp)
    os.replace(tmp, os.path.join(data_dir, CACHE_NAME))
    with open(os.path.join(data_dir, STAMP_NAME), "w") as fh:
        fh.write(input_digest(data_dir) + "\n")
    s = g.split
    print(f"{data_dir}: {g.n_entities} entities, {g.n_relations} relations, "
          f"{len(s.train)}/{len(s.valid)}/{len(s.test)} train/valid/test triples")
    return EXIT_OK


# config ----------------------------------------------------------------------------

def load_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    if getattr(args, "out", None):
        overrides["output.dir"] = args.out
    if getattr(args, "mode", None):
        overrides["eval.mode"] = args.mode
    if getattr(args, "endpoints", None):
        overrides["runtime.endpoints"] = args.endpoints
    return RunConfig.load(args.config, overrides)


def output_dir(cfg: RunConfig) -> str:
    out = cfg["output.dir"]
    if not out:
        raise ConfigError("output.dir", "required (set it in the config or pass --out)")
    os.makedirs(out, exist_ok=True)
    return out


# train -------------------------------------------------------------------------------

def _print_epoch(report, store=None):
    print(f"epoch {report.epoch} loss {report.loss:.6f} time {report.seconds:.3f}s", flush=True)


def run_training(cfg: RunConfig, g: Optional[KnowledgeGraph] = None, quiet: bool = False):
    """Train under the configured runtime; returns ``(result, graph, spec)``."""
    out = output_dir(cfg)
    cfg.save(os.path.join(out, "config.txt"))
    g = g if g is not None else load_graph(cfg)
    spec = cfg.model_spec(g)
    tc, sc = cfg.train_config(), cfg.sampler_config()
    on_epoch = None if quiet else _print_epoch
    if cfg["runtime.mode"] == "local":
        valid_fn = None
        if tc.patience > 0:
            if len(g.split.valid) == 0:
                raise ConfigError("train.patience", "early stopping needs a non-empty valid split")

            def valid_fn(store):
                model = Model(spec, store, g, sc, cfg["eval.seed"])
                return link_prediction(model, g.split.valid, ks=(10,))[10]
        result = train(g, spec, tc, sc, out_dir=out, on_epoch=on_epoch, valid_fn=valid_fn)
    elif cfg["runtime.endpoints"]:
        from .ps.coordinator import serve_coordinator
        result = serve_coordinator(spec, tc, cfg["runtime.endpoints"], cfg["runtime.workers"], out, on_epoch)
    else:
        from .ps.coordinator import run_distributed
        result = run_distributed(g, spec, tc, sc, workers=cfg["runtime.workers"], shards=cfg.shards,
                                 transport=cfg["runtime.transport"], out_dir=out, on_epoch=on_epoch,
                                 host=cfg["runtime.host"])
    return result, g, spec


def cmd_train(args) -> int:
    cfg = load_config(args)
    result, _, _ = run_training(cfg)
    latest = os.path.join(cfg["output.dir"], "checkpoints", _latest_name(cfg["output.dir"]))
    print(f"trained {len(result.reports)} epochs; checkpoint {latest}")
    return EXIT_OK


# eval -------------------------------------------------------------------------------------

def _latest_name(out: str) -> str:
    path = os.path.join(out, "checkpoints", "latest")
    try:
        with open(path) as fh:
            return fh.read().strip()
    except OSError:
        raise CheckpointError(f"no checkpoint recorded in {path}") from None


def load_model(cfg: RunConfig, g: KnowledgeGraph, checkpoint: str) -> Model:
    spec = cfg.model_spec(g)
    try:
        with open(checkpoint, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {checkpoint}: {exc.strerror}") from None
    store = load_checkpoint_into(ParameterStore(spec), data)
    return Model(spec, store, g, cfg.sampler_config(), cfg["eval.seed"])


def evaluate(cfg: RunConfig, g: KnowledgeGraph, checkpoint: str, split: str = "test", out: Optional[str] = None):
    """Ranking and classification on one split; writes CSVs when ``out`` is given."""
    model = load_model(cfg, g, checkpoint)
    triples = getattr(g.split, split)
    if len(triples) == 0:
        raise ContractError(f"the {split} split is empty")
    ranking = link_prediction(model, triples, ks=cfg["eval.ks"], mode=cfg["eval.mode"], detailed=True)
    classification = triplet_classification(model, g, triples, seed=cfg["eval.seed"])
    if out:
        write_ranking_csv(os.path.join(out, f"ranking_{split}.csv"), ranking)
        write_classification_csv(os.path.join(out, f"classification_{split}.csv"), classification)
    return ranking, classification


def cmd_eval(args) -> int:
    cfg = load_config(args)
    out = output_dir(cfg)
    checkpoint = args.checkpoint or os.path.join(out, "checkpoints", _latest_name(out))
    g = load_graph(cfg)
    ranking, cls = evaluate(cfg, g, checkpoint, args.split, out)
    for r in ranking:
        hits = " ".join(f"HR@{k} {v:.4f}" for k, v in sorted(r.hits.items()))
        print(f"{r.mode} {r.side}: {hits} mean_rank {r.mean_rank:.2f}")
    print(f"AUC {cls.auc:.4f} ({cls.positives} positives, {cls.negatives} negatives)")
    return EXIT_OK


# sweeps ---------------------------------------------------------------------------------------

def _hop_changes(cfg: RunConfig, k: int) -> dict:
    changes = {"encoder.hops": k}
    if cfg["sampler.fanout"]:
        base = cfg["sampler.fanout"]
        changes["sampler.fanout"] = (base + (base[-1],) * k)[:k]
    return changes


def run_sweep(cfg: RunConfig, axis: str, values, quiet: bool = True):
    """Train and evaluate one derived config per setting; each lands in ``<out>/<axis>_<v>``."""
    out = output_dir(cfg)
    g = load_graph(cfg)

    def point(v):
        changes = _hop_changes(cfg, v) if axis == "hops" else {"runtime.mode": "distributed",
                                                                "runtime.workers": v}
        sub = cfg.derive({**changes, "output.dir": os.path.join(out, f"{axis}_{v}")})
        result, _, _ = run_training(sub, g, quiet=True)
        ckpt = os.path.join(sub["output.dir"], "checkpoints", _latest_name(sub["output.dir"]))
        ranking, _ = evaluate(sub, g, ckpt, "test", sub["output.dir"])
        both = ranking[-1]
        secs = float(np.mean([r.seconds for r in result.reports])) if result.reports else 0.0
        if not quiet:
            print(f"{axis}={v} HR@10 {both.hits.get(10, float('nan')):.4f} epoch_seconds {secs:.3f}", flush=True)
        return SweepPoint(v, both.hits.get(10, float("nan")), secs, {"mean_rank": both.mean_rank})

    report = sweep(axis, values, point)
    report.write_csv(os.path.join(out, f"sweep_{axis}.csv"))
    report.write_plot_data(os.path.join(out, "plot"))
    return report


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    if 10 not in cfg["eval.ks"]:
        cfg = cfg.derive({"eval.ks": tuple(cfg["eval.ks"]) + (10,)})
    run_sweep(cfg, args.axis, args.values, quiet=False)
    print(f"wrote {os.path.join(cfg['output.dir'], f'sweep_{args.axis}.csv')}")
    return EXIT_OK


# serve --------------------------------------------------------------------------------------------

def cmd_serve(args) -> int:
    from .ps.coordinator import serve_worker
    from .ps.server import ShardServer, TcpShardServer

    cfg = load_config(args)
    g = load_graph(cfg)
    spec = cfg.model_spec(g)
    tc = cfg.train_config()
    if args.role == "shard":
        shards = args.shards or cfg.shards
        if not 0 <= args.shard_id < shards:
            raise ConfigError("--shard-id", f"must lie in [0, {shards})")
        server = TcpShardServer(ShardServer(args.shard_id, shards, spec, tc.seed, tc.adam), args.host, args.port)
        if args.port_file:
            tmp = args.port_file + ".tmp"
            with open(tmp, "w") as fh:
                fh.write(server.endpoint + "\n")
            os.replace(tmp, args.port_file)
        print(f"shard {args.shard_id}/{shards} listening on {server.endpoint}", flush=True)
        try:
            server.serve_forever()
        finally:
            server.stop()
        return EXIT_OK
    if not cfg["runtime.endpoints"]:
        raise ConfigError("runtime.endpoints", f"the {args.role} needs the shard endpoints")
    if args.role == "coordinator":
        cfg = cfg.derive({"runtime.mode": "distributed"})
        result, _, _ = run_training(cfg, g)
        print(f"trained {len(result.reports)} epochs; checkpoint "
              f"{os.path.join(cfg['output.dir'], 'checkpoints', _latest_name(cfg['output.dir']))}")
        return EXIT_OK

    def report(msg):
        if msg[0] == "stats":
            _, wid, epoch, total, pairs, _ = msg
            print(f"worker {wid} epoch {epoch} loss {total / max(pairs, 1):.6f}", flush=True)

    serve_worker(args.worker_id, cfg["runtime.workers"], g, spec, tc, cfg.sampler_config(),
                 cfg["runtime.endpoints"], report)
    return EXIT_OK


def cmd_config(args) -> int:
    if args.config:
        sys.stdout.write(load_config(args).to_text())
    else:
        print(describe())
    return EXIT_OK


# entry point ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgnn", description="Graph neural knowledge representation learning.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, out=True, mode=False):
        sp.add_argument("--config", required=True, metavar="PATH", help="key=value config file")
        if out:
            sp.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
        if seed:
            sp.add_argument("--seed", type=int, metavar="N", help="overrides train.seed")
        if mode:
            sp.add_argument("--mode", choices=("raw", "filtered"), help="ranking protocol (overrides eval.mode)")

    sp = sub.add_parser("prepare", help="parse a dataset directory and cache the graph")
    sp.add_argument("data_dir")
    sp.add_argument("--synthetic", choices=("tiny", "compositional", "context", "typed", "attribute"),
                    help="first write a generated dataset into DATA_DIR")
    sp.add_argument("--seed", type=int, default=0, help="generator seed for --synthetic")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="rank and classify a split with a checkpoint")
    common(sp, mode=True)
    sp.add_argument("--checkpoint", metavar="PATH", help="defaults to the latest one under the output dir")
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    for axis, default in (("hops", "1,2,3,4"), ("workers", "1,2,4,8")):
        sp = sub.add_parser(f"sweep-{axis}", help=f"train and evaluate across {axis} settings")
        common(sp, mode=True)
        sp.add_argument("--values", type=_int_list, default=_int_list(default), metavar="LIST")
        sp.set_defaults(func=cmd_sweep, axis=axis)

    sp = sub.add_parser("serve", help="run one shard, the coordinator or one worker over TCP")
    sp.add_argument("role", choices=("shard", "coordinator", "worker"))
    common(sp)
    sp.add_argument("--endpoints", metavar="LIST", help="shard host:port list (overrides runtime.endpoints)")
    sp.add_argument("--shard-id", type=int, default=0)
    sp.add_argument("--shards", type=int, default=0, help="total shards (defaults to the config)")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=0, help="0 picks a free port")
    sp.add_argument("--port-file", metavar="PATH", help="write the bound host:port here")
    sp.add_argument("--worker-id", type=int, default=0)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("config", help="list config keys, or print the effective config")
    sp.add_argument("--config", metavar="PATH")
    sp.add_argument("--out", metavar="DIR")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_config)
    return p


def _setup_logging():
    name = os.environ.get("KGNN_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise ConfigError("KGNN_LOG", f"expected one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (KGNNError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
