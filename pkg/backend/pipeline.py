"""
Trinity Pipeline
generate -> simulate -> train -> retrieve (M, LT, L, baseline) -> rerank -> evaluate
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from codebook import AssignmentStore, persist_assignments, save_codebook
from errors import StageError, TrinityError
from event_log import events_by_user, write_event_log
from histogram import BehaviorSequence, build_histogram
from rerank import StayTimeReranker, make_rerank_samples
from retriever_l import disperse_and_sample, i2i_search, prerank_seeds, recency_seeds
from retriever_lt import longtail_set, save_sketch, select_longtail, sketch_from_stream
from retriever_m import select_multi_interest
from run_manifest import manifest_writer
from simharness import RetrievalOutput, evaluate, event_age_days, generate_world, simulate_stream
from trainer import TwoTowerScorer, TwoTowerTrainer, make_training_samples, save_embeddings

logger = logging.getLogger(__name__)


@dataclass
class TrainedModel:
    table: object
    codebook: object
    store: object
    loss_curve: list = field(default_factory=list)


@dataclass
class PipelineResult:
    world: object
    events: list
    outputs: dict
    baseline: dict
    report: object
    model: TrainedModel = None
    sketch: object = None
    loss_curves: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)


def run_stage(name, fn, *args, **kwargs):
    """Run one stage, tagging any failure with the stage name"""
    logger.info(f"▶️ Stage: {name}")
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (TrinityError, ValueError, OSError) as e:
        raise StageError(name, e) from e


def train_model(events, item_ids, cfg, use_cluster_terms=True):
    rng = np.random.default_rng([cfg.seed, 0x5A])
    samples = make_training_samples(events, cfg, rng)
    trainer = TwoTowerTrainer.fresh(item_ids, cfg, use_cluster_terms)
    if samples:
        trainer.fit(samples)
    else:
        logger.warning("⚠️ No training samples: keeping the initial embeddings")
    store = trainer.store if trainer.store is not None else trainer.assignment_store()
    return TrainedModel(trainer.table, trainer.codebook, store, list(trainer.loss_curve))


def train_reranker(events, item_ids, cfg):
    rng = np.random.default_rng([cfg.seed, 0x2E])
    reranker = StayTimeReranker.fresh(item_ids, cfg)
    samples = make_rerank_samples(events, cfg, rng)
    if len(samples) < 2:
        logger.warning("⚠️ Too few re-rank samples: keeping the initial embeddings")
        return reranker
    return reranker.fit(samples)


def baseline_topk(seq, scorer, corpus_ids, k):
    """Unitary u2i retriever: pooled user vector against the whole corpus"""
    user_vec = scorer.user_vector(seq.item_ids())
    if user_vec is None:
        return []
    scores = scorer.score(user_vec, corpus_ids)
    order = np.lexsort((corpus_ids, -scores))[:k]
    return [int(corpus_ids[i]) for i in order]


def cluster_candidates(store, clusters):
    return [item for c in clusters for item in store.members_of_secondary(c)]


class UserRetriever:
    """Everything needed to run the three Trinity retrievers plus the baseline for one user"""

    def __init__(self, cfg, model, scorer, reranker, longtail_clusters, world=None):
        self.cfg = cfg
        self.model = model
        self.scorer = scorer
        self.reranker = reranker
        self.longtail_clusters = longtail_clusters
        self.world = world
        self.corpus_ids = np.asarray(model.table.item_ids, dtype=np.int64)
        self.trinity_scorer = TwoTowerScorer(model.table)

    def _rng(self, stage_cfg, user_id):
        return np.random.default_rng([stage_cfg.seed, user_id])

    def multi(self, hist, user_id):
        return select_multi_interest(hist.tree, self.cfg.multi, self._rng(self.cfg.multi, user_id))

    def longtail(self, hist, exclude, user_id):
        return select_longtail(
            hist.h2, self.longtail_clusters, exclude, self.cfg.longtail, self._rng(self.cfg.longtail, user_id)
        )

    def longterm_seeds(self, seq):
        ranked = prerank_seeds(seq, self.scorer)
        return disperse_and_sample(ranked, self.model.store, self.cfg.longterm, self._rng(self.cfg.longterm, seq.user_id))

    def retrieve(self, seq):
        user_id = seq.user_id
        store = self.model.store
        hist = build_histogram(seq, store)
        clusters_m = self.multi(hist, user_id)
        clusters_lt = self.longtail(hist, clusters_m, user_id) if self.cfg.enable_lt else []
        seeds = self.longterm_seeds(seq)
        i2i = i2i_search(
            seeds,
            self.model.table,
            self.corpus_ids.tolist(),
            self.cfg.longterm.k_nn,
            exclude=seq.item_ids(),
            max_workers=self.cfg.longterm.max_workers,
        )
        behaviors = seq.item_ids()
        budget = self.cfg.rerank.budget
        items = {
            "multi": self.reranker.rerank(behaviors, cluster_candidates(store, clusters_m), budget),
            "longtail": self.reranker.rerank(behaviors, cluster_candidates(store, clusters_lt), budget),
            "longterm": self.reranker.rerank(behaviors, i2i.item_ids, budget),
        }
        output = RetrievalOutput(user_id=user_id, clusters_m=clusters_m, clusters_lt=clusters_lt, items=items)
        if self.world is not None:
            latest = {item: idx for item, idx in seq}
            now = self.world.config.horizon
            output.seed_ages_days = [event_age_days(self.world, latest[s], now) for s in seeds]
            output.recency_seed_ages_days = [
                event_age_days(self.world, latest[s], now) for s in recency_seeds(seq, self.cfg.longterm.n_l)
            ]
        baseline = baseline_topk(seq, self.trinity_scorer, self.corpus_ids, self.cfg.baseline_k)
        return output, baseline


def run_retrieval(retriever, world, events):
    grouped = events_by_user(events)
    outputs, baseline = {}, {}
    for profile in world.users:
        seq = BehaviorSequence.from_events(profile.user_id, grouped.get(profile.user_id, []), retriever.cfg.train.window)
        outputs[profile.user_id], baseline[profile.user_id] = retriever.retrieve(seq)
    return outputs, baseline


def _empty_run(world, events):
    outputs = {u.user_id: RetrievalOutput(user_id=u.user_id) for u in world.users}
    baseline = {u.user_id: [] for u in world.users}
    return outputs, baseline, AssignmentStore()


def run_pipeline(cfg, out_dir=None):
    world = run_stage("generate", generate_world, cfg.world)
    events = run_stage("simulate", simulate_stream, world)
    item_ids = world.item_ids

    if not events:
        logger.warning("⚠️ Empty event stream: skipping training and retrieval")
        outputs, baseline, store = _empty_run(world, events)
        report = run_stage("evaluate", evaluate, world, outputs, baseline, store, cfg.impression_quota)
        result = PipelineResult(world, events, outputs, baseline, report)
    else:
        model = run_stage("train", train_model, events, item_ids, cfg.train)
        prerank = run_stage("train-prerank", train_model, events, item_ids, cfg.prerank, use_cluster_terms=False)
        reranker = run_stage("train-rerank", train_reranker, events, item_ids, cfg.rerank)
        sketch = run_stage("sketch", sketch_from_stream, events, model.store, cfg.longtail)
        longtail = longtail_set(sketch, model.store.items_per_secondary(), cfg.longtail)
        retriever = UserRetriever(cfg, model, TwoTowerScorer(prerank.table), reranker, longtail, world)
        outputs, baseline = run_stage("retrieve", run_retrieval, retriever, world, events)
        report = run_stage("evaluate", evaluate, world, outputs, baseline, model.store, cfg.impression_quota)
        result = PipelineResult(
            world,
            events,
            outputs,
            baseline,
            report,
            model=model,
            sketch=sketch,
            loss_curves={
                "trinity": model.loss_curve,
                "prerank": prerank.loss_curve,
                "rerank": list(reranker.loss_curve),
            },
        )
        result.artifacts["prerank"] = prerank
        result.artifacts["reranker"] = reranker

    if out_dir:
        run_stage("write", write_outputs, result, cfg, out_dir)
    return result


def write_loss_curves(curves, path):
    names = list(curves)
    longest = max((len(c) for c in curves.values()), default=0)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["batch"] + names)
        for i in range(longest):
            writer.writerow([i] + [repr(float(curves[n][i])) if i < len(curves[n]) else "" for n in names])


def write_outputs(result, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "world": os.path.join(out_dir, "world.json"),
        "events": os.path.join(out_dir, "events.jsonl"),
        "report": os.path.join(out_dir, "report.json"),
        "retrievals": os.path.join(out_dir, "retrievals.jsonl"),
    }
    result.world.save(paths["world"])
    write_event_log(result.events, paths["events"])

    if result.model is not None:
        paths.update(
            embeddings=os.path.join(out_dir, "embeddings.tsv"),
            codebook=os.path.join(out_dir, "codebook.tsv"),
            assignments=os.path.join(out_dir, "assignments.tsv"),
            sketch=os.path.join(out_dir, "sketch.tsv"),
            prerank=os.path.join(out_dir, "prerank.tsv"),
            rerank=os.path.join(out_dir, "rerank.tsv"),
            loss_curve=os.path.join(out_dir, "loss_curve.csv"),
        )
        save_embeddings(result.model.table, paths["embeddings"])
        save_codebook(result.model.codebook, paths["codebook"])
        persist_assignments(result.model.store, paths["assignments"])
        save_sketch(result.sketch, paths["sketch"])
        save_embeddings(result.artifacts["prerank"].table, paths["prerank"])
        save_embeddings(result.artifacts["reranker"].table, paths["rerank"])
        write_loss_curves(result.loss_curves, paths["loss_curve"])

    lines = [json.dumps(result.outputs[u].model_dump(mode="json"), sort_keys=True) for u in sorted(result.outputs)]
    with open(paths["retrievals"], "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(line + "\n" for line in lines))

    result.report.save(paths["report"])
    manifest_writer.record("pipeline", cfg, out_dir, outputs=paths)
    return paths
