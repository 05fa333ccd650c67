"""Benchmark drivers: full trials, ablations, shot sweeps, and probes.

A harness generates one synthetic corpus, ingests it once, and replays
trials against the shared on-disk database, so every configuration of a
comparison sees identical data.
"""

from __future__ import annotations

import math
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..contextualize import agentic_filter, initial_candidates, noise_report, structural_align
from ..core import Query
from ..embed import HardwareStatus, ResourcePreference, default_zoo, match_embedding_models
from ..errors import SchemaError
from ..icl import DEFAULT_SHOT_COUNT, assemble_icl_prompt, run_icl
from ..ogg import Op, build_default_graph
from ..orchestrator import (
    Engine,
    EngineConfig,
    EpisodeState,
    PolicyBundle,
    mock_backend_factory,
)
from ..planner import Memory, PlanConstraints, Timestep, plan_toolchain
from ..policy import MalformedPolicy
from ..prompts import PromptTemplates
from ..vecdb import RetrievalMode, load, read_manifest
from .metrics import AlignmentAnalysis, TrialMetrics, TrialRecord, aggregate, write_csv
from .oracles import (
    make_align_policy,
    make_downstream_policy,
    make_filter_policy,
    make_planner_policy,
)
from .synth import BenchQuery, SyntheticSpec, generate_corpus

# Sync pass: refresh the database from the corpus, then a throwaway lookup.
_INGEST_CHAIN = (
    Op.START,
    Op.GET_QUERY,
    Op.CHECK_UPDATING,
    Op.GET_HARDWARE_STATUS,
    Op.MATCHING_EMBEDDING_MODELS,
    Op.MULTIMODAL_EMBEDDING,
    Op.LOAD_VECTOR_DATABASE,
    Op.TEXTUAL_SIMILARITY_RETRIEVAL,
    Op.END,
)

_RETRIEVAL_OPS = frozenset(
    {Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.VISUAL_SIMILARITY_RETRIEVAL}
)


def _ops_from(ablation) -> frozenset[Op]:
    ops = set()
    for item in ablation:
        if isinstance(item, Op):
            ops.add(item)
            continue
        try:
            ops.add(Op(item))
        except ValueError:
            raise SchemaError(f"unknown operation {item!r} in ablation")
    return frozenset(ops)


def _retrieval_route(forbidden: frozenset[Op]) -> tuple[RetrievalMode, bool, bool]:
    text_ok = Op.TEXTUAL_SIMILARITY_RETRIEVAL not in forbidden
    vision_ok = Op.VISUAL_SIMILARITY_RETRIEVAL not in forbidden
    if text_ok and vision_ok:
        return RetrievalMode.CASCADED_TEXT_THEN_VISUAL, True, True
    if text_ok:
        return RetrievalMode.TEXTUAL, True, False
    if vision_ok:
        return RetrievalMode.VISUAL, False, True
    raise SchemaError("ablation removes every retrieval route")


@dataclass(frozen=True)
class BenchmarkResult:
    metrics: TrialMetrics
    records: tuple[TrialRecord, ...]

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics.to_dict(),
            "records": [r.to_dict() for r in self.records],
        }


class Harness:
    """One corpus, one database, many trials."""

    def __init__(
        self,
        spec: SyntheticSpec,
        workdir: str | Path | None = None,
        max_workers: int = 4,
    ):
        self.spec = spec
        self.root = Path(workdir) if workdir is not None else Path(
            tempfile.mkdtemp(prefix="icx-bench-run-")
        )
        self.root.mkdir(parents=True, exist_ok=True)
        self.db_path = self.root / "db"
        self.corpus, self.queries = generate_corpus(spec, self.root / "corpus")
        self.meta = self.queries.meta
        self.templates = PromptTemplates()
        self.policies = PolicyBundle(
            downstream=make_downstream_policy(self.meta),
            filter=make_filter_policy(self.meta),
            align=make_align_policy(self.meta),
        )
        self.max_workers = max(1, max_workers)
        self._ingested = False
        self._baseline: dict[str, bool] | None = None

    def engine(self, config: EngineConfig | None = None) -> Engine:
        return Engine(
            self.corpus,
            self.db_path,
            self.policies,
            templates=self.templates,
            hardware_probe=lambda: HardwareStatus(32.0, 100.0),
            config=config or EngineConfig(),
        )

    def ensure_ingested(self) -> None:
        if self._ingested:
            return
        state = EpisodeState(query=self.queries[0].query)
        self.engine().execute_chain(_INGEST_CHAIN, state)
        self._ingested = True

    def backend(self):
        manifest = read_manifest(self.db_path)
        specs = match_embedding_models(
            default_zoo(),
            HardwareStatus(32.0, 100.0),
            ResourcePreference.BALANCED,
            manifest=manifest,
        )
        return mock_backend_factory(*specs)

    def baseline_correct(self) -> dict[str, bool]:
        """Zero-shot accuracy per query; cached, independent of trial config."""
        if self._baseline is None:

            def one(bq: BenchQuery) -> tuple[str, bool]:
                prompt = assemble_icl_prompt(
                    initial_candidates([]), bq.query, k=0, templates=self.templates
                )
                outcome = run_icl(self.policies.downstream, prompt)
                return bq.serial, outcome.answer == bq.gold

            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                self._baseline = dict(pool.map(one, self.queries))
        return self._baseline

    def _noise_probe(
        self, db, backend, bq: BenchQuery, config: EngineConfig, forbidden: frozenset[Op]
    ) -> dict:
        mode, need_text, need_vision = _retrieval_route(forbidden)
        text_vec = backend.embed_texts([bq.query.text])[0] if need_text else None
        vision_vec = None
        if need_vision:
            if bq.query.image is None:
                raise SchemaError("visual retrieval needs a query image")
            vision_vec = backend.embed_images([bq.query.image.read_bytes()])[0]
        agentic_on = Op.AGENTIC_RETRIEVAL not in forbidden
        align_on = Op.STRUCTURAL_ALIGNMENT not in forbidden
        pool_k = (
            math.ceil(config.agentic_pool_factor * config.k) if agentic_on else config.k
        )
        style_fn = self.meta.style_from_text
        cs = db.topk(
            text_vec, vision_vec, pool_k, mode, overfetch_factor=config.overfetch_factor
        )
        pre = noise_report(cs, bq.query, style_of=style_fn)
        if agentic_on:
            cs = agentic_filter(
                bq.query,
                cs,
                self.policies.filter,
                templates=self.templates,
                max_concurrency=config.max_concurrency,
            )
        effective = noise_report(cs, bq.query, style_of=style_fn).effective_rate
        if align_on:
            cs = structural_align(
                bq.query.text,
                cs,
                self.policies.align,
                templates=self.templates,
                max_concurrency=config.max_concurrency,
            )
        post = noise_report(cs.truncated(config.k), bq.query, style_of=style_fn)
        return {
            "semantic_noise_pre": pre.semantic_noise,
            "structural_noise_pre": pre.structural_noise,
            "semantic_noise_post": post.semantic_noise,
            "structural_noise_post": post.structural_noise,
            "effective_rate": effective,
        }

    def run_trial(
        self,
        config: EngineConfig | None = None,
        ablation=(),
        limit: int | None = None,
    ) -> BenchmarkResult:
        config = config or EngineConfig()
        forbidden = _ops_from(ablation)
        if _RETRIEVAL_OPS <= forbidden:
            raise SchemaError("ablation removes every retrieval route")
        constraints = PlanConstraints(forbidden_ops=forbidden) if forbidden else None

        self.ensure_ingested()
        engine = self.engine(config)
        db = load(self.db_path)
        backend = self.backend()
        baseline = self.baseline_correct()
        queries = list(self.queries)[: limit if limit is not None else len(self.queries)]
        if not queries:
            raise SchemaError("trial needs at least one query")

        def one(bq: BenchQuery) -> TrialRecord:
            report = engine.run_episode(bq.query, constraints=constraints)
            probe = self._noise_probe(db, backend, bq, config, forbidden)
            first = sum(
                1
                for t in report.timesteps
                if t.plan_attempts and t.plan_attempts[0]["valid"]
            )
            within5 = sum(
                1
                for t in report.timesteps
                if any(a["valid"] for a in t.plan_attempts[:5])
            )
            return TrialRecord(
                query_serial=bq.serial,
                baseline_correct=baseline[bq.serial],
                icl_correct=report.final_answer == bq.gold,
                timesteps=len(report.timesteps),
                converged=report.converged,
                plan_events=len(report.timesteps),
                plan_first_valid=first,
                plan_valid_within_5=within5,
                **probe,
            )

        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            records = tuple(pool.map(one, queries))
        return BenchmarkResult(metrics=aggregate(list(records)), records=records)


def run_benchmark(
    spec: SyntheticSpec,
    config: EngineConfig | None = None,
    ablation=(),
    workdir: str | Path | None = None,
    max_workers: int = 4,
    limit: int | None = None,
) -> BenchmarkResult:
    """One trial end to end: generate, ingest, run episodes, aggregate."""
    harness = Harness(spec, workdir=workdir, max_workers=max_workers)
    return harness.run_trial(config=config, ablation=ablation, limit=limit)


@dataclass(frozen=True)
class SweepRow:
    shots: int
    baseline_accuracy: float
    icl_accuracy: float
    icl_gain_percent: float


def shot_sweep(
    spec: SyntheticSpec,
    shots=(1, 2, 4, 8, 16),
    config: EngineConfig | None = None,
    workdir: str | Path | None = None,
    max_workers: int = 4,
    csv_path: str | Path | None = None,
) -> list[SweepRow]:
    """Accuracy as a function of shot count, on one shared corpus.

    The default shot count is always swept alongside the requested ones.
    Episodes run single-step unless the caller supplies a config.
    """
    ks = sorted({int(s) for s in shots} | {DEFAULT_SHOT_COUNT})
    if ks and ks[0] < 0:
        raise SchemaError("shot counts must be non-negative")
    base = config or EngineConfig(max_steps=1)
    harness = Harness(spec, workdir=workdir, max_workers=max_workers)
    rows = []
    for k in ks:
        metrics = harness.run_trial(config=replace(base, k=k)).metrics
        rows.append(
            SweepRow(
                shots=k,
                baseline_accuracy=metrics.baseline_accuracy,
                icl_accuracy=metrics.icl_accuracy,
                icl_gain_percent=metrics.icl_gain_percent,
            )
        )
    if csv_path is not None:
        write_csv(
            csv_path,
            ["shots", "baseline_accuracy", "icl_accuracy", "icl_gain_percent"],
            [(r.shots, r.baseline_accuracy, r.icl_accuracy, r.icl_gain_percent) for r in rows],
        )
    return rows


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def alignment_similarity_analysis(queries, candidate_sets, backend) -> AlignmentAnalysis:
    """Query similarity of each context shot before and after alignment."""
    pairs: list[tuple[float, float]] = []
    for query, cs in zip(queries, candidate_sets):
        if not cs.items:
            continue
        batch = [query.text]
        for item in cs.items:
            batch.append(item.sample.question)
            batch.append(item.effective_question())
        vecs = np.asarray(backend.embed_texts(batch), dtype=np.float64)
        qv = vecs[0]
        for j in range(len(cs.items)):
            orig = _cosine(qv, vecs[1 + 2 * j])
            aligned = _cosine(qv, vecs[2 + 2 * j])
            pairs.append((orig, aligned))
    return AlignmentAnalysis(pairs=tuple(pairs))


def alignment_study(
    spec: SyntheticSpec | None = None,
    shots: int = DEFAULT_SHOT_COUNT,
    workdir: str | Path | None = None,
    max_workers: int = 4,
) -> AlignmentAnalysis:
    """Retrieve, align, and compare similarities over a style-skewed corpus."""
    spec = spec or SyntheticSpec(
        task_count=5,
        samples_per_task=40,
        style_count=2,
        semantic_noise_rate=0.0,
        structural_mix=1.0,
        seed=11,
        query_count=50,
    )
    harness = Harness(spec, workdir=workdir, max_workers=max_workers)
    harness.ensure_ingested()
    db = load(harness.db_path)
    backend = harness.backend()
    queries: list[Query] = []
    sets = []
    for bq in harness.queries:
        tv = backend.embed_texts([bq.query.text])[0]
        vv = backend.embed_images([bq.query.image.read_bytes()])[0]
        cs = db.topk(tv, vv, shots, RetrievalMode.CASCADED_TEXT_THEN_VISUAL)
        sets.append(
            structural_align(
                bq.query.text, cs, harness.policies.align, templates=harness.templates
            )
        )
        queries.append(bq.query)
    return alignment_similarity_analysis(queries, sets, backend)


def tsr_probe(
    rate: float = 0.01,
    episodes: int = 1000,
    seed: int = 0,
    mode: str = "model",
) -> tuple[float, float]:
    """Task-success rate of planning at one and at five attempts.

    Model mode wraps the oracle planner in a garbling layer at the given
    rate; rule mode measures the deterministic planner directly.
    """
    graph = build_default_graph()
    templates = PromptTemplates()
    policy = None
    if mode == "model":
        policy = MalformedPolicy(make_planner_policy(), rate=rate, seed=seed)
    at_1 = 0
    at_5 = 0
    for _ in range(episodes):
        result = plan_toolchain(
            graph,
            Memory(),
            Timestep(0),
            mode=mode,
            policy=policy,
            templates=templates,
        )
        at_1 += result.first_attempt_valid()
        at_5 += result.valid_within(5)
    return at_1 / episodes, at_5 / episodes


@dataclass(frozen=True)
class ReplanningOutcome:
    spec: SyntheticSpec
    query: BenchQuery
    report: object


def visual_discriminative_spec(seed: int = 0, query_count: int = 40) -> SyntheticSpec:
    """Corpus whose text modality carries no task signal at all: every
    question shares one topic word, while images stay task-specific."""
    return SyntheticSpec(
        task_count=10,
        samples_per_task=40,
        style_count=1,
        semantic_noise_rate=0.0,
        structural_mix=0.0,
        seed=seed,
        query_count=query_count,
        text_topic_mode="shared",
    )


def replanning_fixture(
    workdir: str | Path | None = None, max_workers: int = 4
) -> ReplanningOutcome:
    """An episode that recovers through feedback-driven replanning.

    Finds a query where the cascaded first pass lands too few on-task shots,
    a text-only second pass misleads the answerer into blaming the reference
    images, and the visual third pass converges.
    """
    spec = visual_discriminative_spec()
    harness = Harness(spec, workdir=workdir, max_workers=max_workers)
    harness.ensure_ingested()
    engine = harness.engine()
    for bq in harness.queries:
        report = engine.run_episode(bq.query)
        ts = report.timesteps
        if (
            report.converged
            and len(ts) == 3
            and ts[0].hint == "insufficient-shots"
            and ts[1].hint == "image"
        ):
            return ReplanningOutcome(spec=spec, query=bq, report=report)
    raise SchemaError("no query exhibited the image-hint replanning pattern")
