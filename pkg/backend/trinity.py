#!/usr/bin/env python3
"""
Trinity command-line tool
train / assign / retrieve-m / retrieve-lt / retrieve-l / rerank / simulate / eval / pipeline
"""

import argparse
import logging
import os
import sys

import numpy as np

# Avoid Windows console Unicode crashes (emoji logs)
try:
    if hasattr(sys.stdout, "reconfigure"):
        sys.stdout.reconfigure(encoding="utf-8", errors="replace")
    if hasattr(sys.stderr, "reconfigure"):
        sys.stderr.reconfigure(encoding="utf-8", errors="replace")
except Exception:
    pass

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from codebook import assign_batch, AssignmentStore, load_assignments, load_codebook, persist_assignments, save_codebook
from config import PipelineConfig, load_config
from errors import ConfigError, TrinityError
from event_log import events_by_user, read_event_log, summarize, write_event_log
from excel_exporter import excel_exporter
from histogram import BehaviorSequence, build_histogram
from pipeline import (
    TrainedModel,
    UserRetriever,
    run_pipeline,
    run_retrieval,
    run_stage,
    train_model,
    train_reranker,
    write_loss_curves,
)
from rerank import StayTimeReranker
from retriever_l import retrieve_long_term
from retriever_lt import load_sketch, longtail_set, save_sketch, select_longtail, sketch_from_stream
from retriever_m import select_multi_interest
from run_manifest import manifest_writer
from simharness import evaluate, generate_world, load_world, simulate_stream
from trainer import TwoTowerScorer, load_embeddings, save_embeddings

logger = logging.getLogger("trinity")

# CLI flag -> dotted config field
FLAG_FIELDS = {
    "tp": "multi.t_p",
    "ts": "multi.t_s",
    "nm": "multi.n_m",
    "nc": "longtail.n_c",
    "nlt": "longtail.n_lt",
    "alpha": "longtail.alpha_smp",
    "beta": "longtail.beta_smp",
    "tc": "longterm.t_c",
    "ns": "longterm.n_s",
    "nl": "longterm.n_l",
    "knn": "longterm.k_nn",
    "budget": "rerank.budget",
    "horizon": "world.horizon",
}


def _path(args, name, default):
    value = getattr(args, name, None)
    return value if value else os.path.join(args.out_dir, default)


def _load_pipeline_config(args):
    overrides = {}
    for flag, field in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    cfg = load_config(args.config, PipelineConfig, overrides)
    if args.seed is not None:
        cfg = cfg.reseeded(args.seed)
    return cfg


def _print_ids(ids):
    """One id per line on stdout"""
    for item in ids:
        print(item)


def _user_rng(stage_cfg, user_id):
    return np.random.default_rng([stage_cfg.seed, user_id])


def _user_sequence(args, cfg):
    events = read_event_log(_path(args, "events", "events.jsonl"))
    grouped = events_by_user(events)
    if args.user not in grouped:
        logger.warning(f"⚠️ User {args.user} has no events")
    return BehaviorSequence.from_events(args.user, grouped.get(args.user, []), cfg.train.window), events


def _events_for_training(args, cfg):
    """Explicit event log if one is given, otherwise simulate a fresh world"""
    events_path = getattr(args, "events", None) or cfg.train.events_path
    if events_path:
        return read_event_log(events_path), {"events": events_path}
    world = run_stage("generate", generate_world, cfg.world)
    events = run_stage("simulate", simulate_stream, world)
    world.save(os.path.join(args.out_dir, "world.json"))
    write_event_log(events, os.path.join(args.out_dir, "events.jsonl"))
    return events, {}


def cmd_train(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    events, inputs = _events_for_training(args, cfg)
    summary = summarize(events)
    logger.info(f"📦 Training on {summary['total_events']} events from {summary['users']} users")
    item_ids = sorted({e.item_id for e in events})
    # only a named or freshly simulated world is known to match the event log
    if args.world or not inputs:
        item_ids = load_world(_path(args, "world", "world.json")).item_ids
    model = run_stage("train", train_model, events, item_ids, cfg.train)
    outputs = {
        "embeddings": os.path.join(args.out_dir, "embeddings.tsv"),
        "codebook": os.path.join(args.out_dir, "codebook.tsv"),
        "assignments": os.path.join(args.out_dir, "assignments.tsv"),
        "loss_curve": os.path.join(args.out_dir, "loss_curve.csv"),
    }
    save_embeddings(model.table, outputs["embeddings"])
    save_codebook(model.codebook, outputs["codebook"])
    persist_assignments(model.store, outputs["assignments"])
    write_loss_curves({"trinity": model.loss_curve}, outputs["loss_curve"])
    manifest_writer.record("train", cfg, args.out_dir, inputs=inputs, outputs=outputs)
    return 0


def cmd_assign(args, cfg):
    embeddings_path = _path(args, "embeddings", "embeddings.tsv")
    codebook_path = _path(args, "codebook", "codebook.tsv")
    table = load_embeddings(embeddings_path)
    codebook = load_codebook(codebook_path)
    primary, secondary = assign_batch(table.matrix, codebook)
    store = AssignmentStore.from_arrays(table.item_ids, primary, secondary, codebook.n_primary, codebook.n_secondary)
    out = os.path.join(args.out_dir, "assignments.tsv")
    persist_assignments(store, out)
    manifest_writer.record(
        "assign", cfg, args.out_dir, inputs={"embeddings": embeddings_path, "codebook": codebook_path}, outputs={"assignments": out}
    )
    return 0


def _user_histogram(args, cfg):
    seq, events = _user_sequence(args, cfg)
    store = load_assignments(_path(args, "assignments", "assignments.tsv"))
    return seq, events, store, build_histogram(seq, store)


def cmd_retrieve_m(args, cfg):
    _, _, _, hist = _user_histogram(args, cfg)
    _print_ids(select_multi_interest(hist.tree, cfg.multi, _user_rng(cfg.multi, args.user)))
    return 0


def cmd_retrieve_lt(args, cfg):
    _, events, store, hist = _user_histogram(args, cfg)
    sketch_path = getattr(args, "sketch", None)
    if sketch_path:
        sketch = load_sketch(sketch_path)
    else:
        sketch = sketch_from_stream(events, store, cfg.longtail)
        save_sketch(sketch, os.path.join(args.out_dir, "sketch.tsv"))
    candidates = longtail_set(sketch, store.items_per_secondary(), cfg.longtail)
    exclude = select_multi_interest(hist.tree, cfg.multi, _user_rng(cfg.multi, args.user))
    _print_ids(select_longtail(hist.h2, candidates, exclude, cfg.longtail, _user_rng(cfg.longtail, args.user)))
    return 0


def cmd_retrieve_l(args, cfg):
    seq, _, store, _ = _user_histogram(args, cfg)
    embeddings = load_embeddings(_path(args, "embeddings", "embeddings.tsv"))
    prerank_path = _path(args, "prerank", "prerank.tsv")
    prerank = load_embeddings(prerank_path) if os.path.isfile(prerank_path) else embeddings
    seeds, result = retrieve_long_term(
        seq, TwoTowerScorer(prerank), store, embeddings, embeddings.item_ids.tolist(), cfg.longterm,
        _user_rng(cfg.longterm, args.user),
    )
    logger.info(f"🌱 Seeds: {seeds}")
    _print_ids(result.item_ids)
    return 0


def cmd_rerank(args, cfg):
    seq, events = _user_sequence(args, cfg)
    rerank_path = _path(args, "rerank_embeddings", "rerank.tsv")
    if os.path.isfile(rerank_path):
        reranker = StayTimeReranker(load_embeddings(rerank_path), cfg.rerank)
    else:
        logger.info("🧠 No re-rank embeddings found, training from the event log")
        reranker = train_reranker(events, sorted({e.item_id for e in events}), cfg.rerank)
        save_embeddings(reranker.table, rerank_path)
    try:
        candidates = [int(c) for c in args.candidates.split(",") if c.strip()]
    except ValueError:
        raise ConfigError("candidates", f"not a comma-separated id list: {args.candidates!r}") from None
    _print_ids(reranker.rerank(seq.item_ids(), candidates, cfg.rerank.budget))
    return 0


def cmd_simulate(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    world = run_stage("generate", generate_world, cfg.world)
    events = run_stage("simulate", simulate_stream, world)
    outputs = {"world": os.path.join(args.out_dir, "world.json"), "events": os.path.join(args.out_dir, "events.jsonl")}
    world.save(outputs["world"])
    write_event_log(events, outputs["events"])
    manifest_writer.record("simulate", cfg, args.out_dir, outputs=outputs)
    return 0


def _load_or_train(path, events, item_ids, train_cfg, use_cluster_terms):
    if os.path.isfile(path):
        return load_embeddings(path)
    logger.info(f"🧠 {os.path.basename(path)} missing, training it from the event log")
    table = train_model(events, item_ids, train_cfg, use_cluster_terms).table
    save_embeddings(table, path)
    return table


def cmd_eval(args, cfg):
    world = load_world(_path(args, "world", "world.json"))
    events = read_event_log(_path(args, "events", "events.jsonl"))
    paths = {
        "embeddings": _path(args, "embeddings", "embeddings.tsv"),
        "codebook": _path(args, "codebook", "codebook.tsv"),
        "assignments": _path(args, "assignments", "assignments.tsv"),
    }
    model = TrainedModel(
        load_embeddings(paths["embeddings"]), load_codebook(paths["codebook"]), load_assignments(paths["assignments"])
    )
    prerank = _load_or_train(_path(args, "prerank", "prerank.tsv"), events, world.item_ids, cfg.prerank, False)
    rerank_path = _path(args, "rerank_embeddings", "rerank.tsv")
    if os.path.isfile(rerank_path):
        reranker = StayTimeReranker(load_embeddings(rerank_path), cfg.rerank)
    else:
        reranker = run_stage("train-rerank", train_reranker, events, world.item_ids, cfg.rerank)
        save_embeddings(reranker.table, rerank_path)

    sketch = run_stage("sketch", sketch_from_stream, events, model.store, cfg.longtail)
    longtail = longtail_set(sketch, model.store.items_per_secondary(), cfg.longtail)
    retriever = UserRetriever(cfg, model, TwoTowerScorer(prerank), reranker, longtail, world)
    outputs, baseline = run_stage("retrieve", run_retrieval, retriever, world, events)

    report = run_stage("evaluate", evaluate, world, outputs, baseline, model.store, cfg.impression_quota)
    report_path = os.path.join(args.out_dir, "report.json")
    report.save(report_path)
    written = {"report": report_path}
    if args.xlsx:
        written["xlsx"] = excel_exporter.export_report(report, args.xlsx)
    manifest_writer.record("eval", cfg, args.out_dir, inputs=paths, outputs=written)
    print(report.to_json(), end="")
    return 0


def cmd_pipeline(args, cfg):
    result = run_pipeline(cfg, args.out_dir)
    if args.xlsx:
        excel_exporter.export_report(result.report, args.xlsx, result.loss_curves)
    print(result.report.to_json(), end="")
    return 0


COMMANDS = {
    "train": cmd_train,
    "assign": cmd_assign,
    "retrieve-m": cmd_retrieve_m,
    "retrieve-lt": cmd_retrieve_lt,
    "retrieve-l": cmd_retrieve_l,
    "rerank": cmd_rerank,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="global seed; every stage seed is derived from it")
    common.add_argument("--out-dir", default="trinity-out", help="artifact directory (default: trinity-out)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    artifacts = argparse.ArgumentParser(add_help=False)
    artifacts.add_argument("--events", help="event log (JSONL)")
    artifacts.add_argument("--world", help="world dump (JSON)")
    artifacts.add_argument("--embeddings", help="item embedding dump")
    artifacts.add_argument("--codebook", help="codebook dump")
    artifacts.add_argument("--assignments", help="assignment store dump")
    artifacts.add_argument("--prerank", help="pre-rank embedding dump")
    artifacts.add_argument("--rerank-embeddings", dest="rerank_embeddings", help="re-rank embedding dump")

    parser = argparse.ArgumentParser(prog="trinity", description="Trinity multi-interest retrieval at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common, artifacts], help="train embeddings and codebook")
    sub.add_parser("assign", parents=[common, artifacts], help="assign items to clusters")

    p = sub.add_parser("retrieve-m", parents=[common, artifacts], help="multi-interest clusters for a user")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--tp", type=int)
    p.add_argument("--ts", type=int)
    p.add_argument("--nm", type=int)

    p = sub.add_parser("retrieve-lt", parents=[common, artifacts], help="long-tail clusters for a user")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--sketch", help="sketch snapshot; rebuilt from the event log when omitted")
    for flag in ("tp", "ts", "nm", "nc", "nlt"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)

    p = sub.add_parser("retrieve-l", parents=[common, artifacts], help="long-term candidates for a user")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--tc", help="per-cluster seed cap (an integer, or 'inf')")
    for flag in ("ns", "nl", "knn"):
        p.add_argument(f"--{flag}", type=int)

    p = sub.add_parser("rerank", parents=[common, artifacts], help="re-rank candidate ids for a user")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--candidates", required=True, help="comma-separated item ids")
    p.add_argument("--budget", type=int)

    p = sub.add_parser("simulate", parents=[common], help="generate a world and its event stream")
    p.add_argument("--horizon", type=int)

    p = sub.add_parser("eval", parents=[common, artifacts], help="evaluate trained artifacts on a world")
    p.add_argument("--xlsx", help="also export the report as an Excel workbook")

    p = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    p.add_argument("--horizon", type=int)
    p.add_argument("--xlsx", help="also export the report as an Excel workbook")
    return parser


def configure_logging(verbose):
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        force=True,
    )


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        cfg = _load_pipeline_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"trinity {args.command}: error: {e}", file=sys.stderr)
        return 2
    except TrinityError as e:
        logger.error(f"❌ {e}")
        return 1
    except OSError as e:
        logger.error(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
