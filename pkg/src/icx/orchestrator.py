"""Chain execution and the closed planning loop.

Each planned operation sequence is dispatched op by op over shared episode
state; the ICL outcome feeds the planner's memory, which steers the next
timestep.  Database writes persist across timesteps; retrieval state is
rebuilt fresh on every chain.
"""

from __future__ import annotations

import logging
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from .contextualize import (
    CandidateSet,
    agentic_filter,
    initial_candidates,
    structural_align,
)
from .core import Corpus, Query, Sample, Timestep, content_hash
from .embed import (
    EmbeddingSet,
    HardwareStatus,
    MockEmbeddingBackend,
    ModelSpec,
    ModelZoo,
    ResourcePreference,
    default_zoo,
    detect_delta,
    embed_samples,
    match_embedding_models,
    select_models_via_policy,
)
from .errors import IcxError, PlanningImpossible, SchemaError
from .icl import Placement, assemble_icl_prompt, run_icl
from .ogg import GrammarGraph, Op, OperationSequence, build_default_graph, validate_sequence
from .planner import (
    FeedbackRecord,
    Judgement,
    Memory,
    MismatchHint,
    PlanConstraints,
    PlanResult,
    plan_toolchain,
    update_memory,
)
from .policy import ModelPolicy
from .prompts import PromptTemplates
from .vecdb import Record, RetrievalMode, VectorDatabase, load, persist, read_manifest

logger = logging.getLogger(__name__)

_RETRIEVAL_MODES = {
    (Op.TEXTUAL_SIMILARITY_RETRIEVAL,): RetrievalMode.TEXTUAL,
    (Op.VISUAL_SIMILARITY_RETRIEVAL,): RetrievalMode.VISUAL,
    (Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.VISUAL_SIMILARITY_RETRIEVAL): RetrievalMode.CASCADED_TEXT_THEN_VISUAL,
    (Op.VISUAL_SIMILARITY_RETRIEVAL, Op.TEXTUAL_SIMILARITY_RETRIEVAL): RetrievalMode.CASCADED_VISUAL_THEN_TEXT,
}


def default_hardware_probe() -> HardwareStatus:
    """Free disk from the filesystem; GPU from ICX_FREE_GPU_GB (assume 32 when unset)."""
    disk = shutil.disk_usage(".").free / 2**30
    gpu_env = os.environ.get("ICX_FREE_GPU_GB")
    gpu = float(gpu_env) if gpu_env else 32.0
    if not gpu_env:
        logger.info("no GPU probe available; assuming 32 GB free")
    return HardwareStatus(free_gpu_gb=gpu, free_disk_gb=disk)


def mock_backend_factory(text: ModelSpec, vision: ModelSpec) -> MockEmbeddingBackend:
    return MockEmbeddingBackend(
        text_model_id=text.model_id,
        vision_model_id=vision.model_id,
        dim=text.vector_dim,
    )


@dataclass
class PolicyBundle:
    """One policy per model role; planner and selector fall back to rules."""

    downstream: ModelPolicy
    filter: ModelPolicy
    align: ModelPolicy
    planner: ModelPolicy | None = None
    selector: ModelPolicy | None = None


@dataclass
class EngineConfig:
    k: int = 8
    max_steps: int = 5
    overfetch_factor: int = 4
    agentic_pool_factor: float = 1.5
    preference: ResourcePreference = ResourcePreference.BALANCED
    planner_mode: str = "rule"
    placement: Placement = Placement.INTERLEAVED
    max_concurrency: int = 4


@dataclass
class EpisodeState:
    query: Query
    timestep: int = 0
    hw: HardwareStatus | None = None
    backbones: tuple[ModelSpec, ModelSpec] | None = None
    delta: list[Sample] | None = None
    fresh: EmbeddingSet | None = None
    db: VectorDatabase | None = None
    candidates: CandidateSet | None = None
    deviations: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class TimestepTrace:
    index: int
    chain: tuple[str, ...]
    plan_attempts: tuple[dict, ...]
    answer: str
    judgement: str
    hint: str
    feedback_text: str
    initial_pool: int
    kept: int
    token_count: int
    latency_ms: float
    deviations: tuple[str, ...]
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "timestep": self.index,
            "chain": list(self.chain),
            "plan_attempts": [dict(a) for a in self.plan_attempts],
            "answer": self.answer,
            "judgement": self.judgement,
            "hint": self.hint,
            "feedback_text": self.feedback_text,
            "initial_pool": self.initial_pool,
            "kept": self.kept,
            "token_count": self.token_count,
            "latency_ms": self.latency_ms,
            "deviations": list(self.deviations),
            "error": self.error,
        }


@dataclass(frozen=True)
class EpisodeReport:
    final_answer: str
    converged: bool
    timesteps: tuple[TimestepTrace, ...]
    memory: Memory

    def to_dict(self) -> dict:
        return {
            "final_answer": self.final_answer,
            "converged": self.converged,
            "timesteps": [t.to_dict() for t in self.timesteps],
        }

    def first_plan_valid(self) -> bool:
        first = self.timesteps[0]
        return bool(first.plan_attempts and first.plan_attempts[0]["valid"])


class Engine:
    """Wires every operation id to its module and drives the episode loop."""

    def __init__(
        self,
        corpus: Corpus,
        db_path: str | Path,
        policies: PolicyBundle,
        backend_factory=mock_backend_factory,
        zoo: ModelZoo | None = None,
        templates: PromptTemplates | None = None,
        hardware_probe=default_hardware_probe,
        config: EngineConfig | None = None,
        graph: GrammarGraph | None = None,
    ):
        self.corpus = corpus
        self.db_path = Path(db_path)
        self.policies = policies
        self.backend_factory = backend_factory
        self.zoo = zoo or default_zoo()
        self.templates = templates or PromptTemplates()
        self.hardware_probe = hardware_probe
        self.config = config or EngineConfig()
        self.graph = graph or build_default_graph()

    # --- op plumbing -------------------------------------------------------

    def _ensure_hw(self, state: EpisodeState) -> HardwareStatus:
        if state.hw is None:
            state.hw = self.hardware_probe()
        return state.hw

    def _ensure_backbones(self, state: EpisodeState) -> tuple[ModelSpec, ModelSpec]:
        if state.backbones is None:
            manifest = read_manifest(self.db_path)
            state.backbones = match_embedding_models(
                self.zoo, self._ensure_hw(state), self.config.preference, manifest=manifest
            )
        return state.backbones

    def _backend(self, state: EpisodeState):
        text, vision = self._ensure_backbones(state)
        return self.backend_factory(text, vision)

    def _records_from(self, embeddings: EmbeddingSet, samples: list[Sample]) -> list[Record]:
        by_id = {s.id: s for s in samples}
        out = []
        for sid in sorted(embeddings.entries):
            tvec, vvec = embeddings.entries[sid]
            sample = by_id[sid]
            out.append(
                Record(sample=sample, text_vector=tvec, vision_vector=vvec, digest=content_hash(sample))
            )
        return out

    def _new_db(self, state: EpisodeState) -> VectorDatabase:
        text, vision = self._ensure_backbones(state)
        return VectorDatabase(
            text_backbone_id=text.model_id,
            vision_backbone_id=vision.model_id,
            text_dim=text.vector_dim,
            vision_dim=vision.vector_dim,
        )

    def _bootstrap_db(self, state: EpisodeState, reason: str) -> None:
        """Cold-start build: embed the whole corpus and persist before retrieving."""
        state.deviations.append(reason)
        logger.warning("cold-start database build: %s", reason)
        backend = self._backend(state)
        embeddings = embed_samples(
            list(self.corpus.samples), backend, max_concurrency=self.config.max_concurrency
        )
        db = self._new_db(state).upsert(
            self._records_from(embeddings, list(self.corpus.samples))
        )
        persist(db, self.db_path)
        state.db = db

    def _run_retrieval(self, ops: tuple[Op, ...], state: EpisodeState, chain: OperationSequence) -> None:
        if state.db is None:
            if self.db_path.exists():
                state.db = load(self.db_path)
            else:
                self._bootstrap_db(state, "retrieval requested before any database existed")
        if len(state.db) == 0:
            if len(self.corpus.samples) > 0:
                self._bootstrap_db(state, "database on disk was empty while the corpus was not")
            else:
                state.candidates = initial_candidates([])
                return
        backend = self._backend(state)
        mode = _RETRIEVAL_MODES[ops]
        text_vec = vision_vec = None
        if mode != RetrievalMode.VISUAL:
            text_vec = backend.embed_texts([state.query.text])[0]
        if mode != RetrievalMode.TEXTUAL:
            if state.query.image is None:
                raise SchemaError("visual retrieval needs a query image")
            vision_vec = backend.embed_images([state.query.image.read_bytes()])[0]
        pool_k = self.config.k
        if Op.AGENTIC_RETRIEVAL in chain:
            pool_k = math.ceil(self.config.agentic_pool_factor * self.config.k)
        state.candidates = state.db.topk(
            text_vec, vision_vec, pool_k, mode, overfetch_factor=self.config.overfetch_factor
        )

    def execute_chain(self, chain: OperationSequence, state: EpisodeState) -> EpisodeState:
        """Dispatch each operation in order; see the op-to-module table in docs."""
        verdict = validate_sequence(self.graph, chain)
        if not verdict.valid:
            raise SchemaError(f"chain fails validation: {verdict.reason}")

        ops = [op for op in chain if op not in (Op.START, Op.END)]
        i = 0
        while i < len(ops):
            op = ops[i]
            if op == Op.GET_QUERY:
                pass  # the query is bound into the state at episode start
            elif op == Op.GET_HARDWARE_STATUS:
                state.hw = self.hardware_probe()
            elif op == Op.CHECK_UPDATING:
                manifest = read_manifest(self.db_path)
                digests = manifest.digests if manifest else {}
                state.delta = detect_delta(self.corpus, digests)
            elif op == Op.MATCHING_EMBEDDING_MODELS:
                manifest = read_manifest(self.db_path)
                if self.policies.selector is not None:
                    state.backbones = select_models_via_policy(
                        self.zoo,
                        self._ensure_hw(state),
                        self.config.preference,
                        self.policies.selector,
                        templates=self.templates,
                        manifest=manifest,
                    )
                else:
                    state.backbones = match_embedding_models(
                        self.zoo, self._ensure_hw(state), self.config.preference, manifest=manifest
                    )
            elif op == Op.MULTIMODAL_EMBEDDING:
                if state.delta is None:
                    manifest = read_manifest(self.db_path)
                    digests = manifest.digests if manifest else {}
                    state.delta = detect_delta(self.corpus, digests)
                backend = self._backend(state)
                state.fresh = embed_samples(
                    state.delta, backend, max_concurrency=self.config.max_concurrency
                )
            elif op == Op.LOAD_VECTOR_DATABASE:
                state.db = load(self.db_path) if self.db_path.exists() else None
                if state.fresh is not None and state.fresh.entries:
                    base = state.db if state.db is not None else self._new_db(state)
                    db = base.upsert(self._records_from(state.fresh, state.delta or []))
                    persist(db, self.db_path)
                    state.db = db
                    state.fresh = None
                elif state.db is None:
                    state.db = self._new_db(state) if state.backbones else None
            elif op in (Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.VISUAL_SIMILARITY_RETRIEVAL):
                run = [op]
                while (
                    i + 1 < len(ops)
                    and ops[i + 1] in (Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.VISUAL_SIMILARITY_RETRIEVAL)
                ):
                    i += 1
                    run.append(ops[i])
                self._run_retrieval(tuple(run), state, chain)
            elif op == Op.AGENTIC_RETRIEVAL:
                if state.candidates is None:
                    raise SchemaError("semantic filtering before any retrieval ran")
                state.candidates = agentic_filter(
                    state.query,
                    state.candidates,
                    self.policies.filter,
                    templates=self.templates,
                    max_concurrency=self.config.max_concurrency,
                )
            elif op == Op.STRUCTURAL_ALIGNMENT:
                if state.candidates is None:
                    raise SchemaError("structural alignment before any retrieval ran")
                state.candidates = structural_align(
                    state.query.text,
                    state.candidates,
                    self.policies.align,
                    templates=self.templates,
                    max_concurrency=self.config.max_concurrency,
                )
            else:  # pragma: no cover - the op set is closed
                raise SchemaError(f"no dispatch for operation {op}")
            i += 1

        if state.candidates is not None:
            state.candidates = state.candidates.truncated(self.config.k)
        return state

    # --- the loop ----------------------------------------------------------

    def run_episode(
        self,
        query: Query,
        max_steps: int | None = None,
        memory: Memory | None = None,
        constraints: PlanConstraints | None = None,
    ) -> EpisodeReport:
        steps = self.config.max_steps if max_steps is None else max_steps
        memory = memory or Memory()
        traces: list[TimestepTrace] = []
        final_answer = ""
        converged = False

        for t in range(steps):
            plan = plan_toolchain(
                self.graph,
                memory,
                Timestep(t),
                constraints=constraints,
                mode=self.config.planner_mode,
                policy=self.policies.planner,
                templates=self.templates,
            )
            chain = plan.chain
            state = EpisodeState(query=query, timestep=t)
            answer = ""
            token_count = 0
            latency_ms = 0.0
            error: str | None = None
            try:
                state = self.execute_chain(chain, state)
                context = state.candidates if state.candidates is not None else initial_candidates([])
                prompt = assemble_icl_prompt(
                    context,
                    query,
                    k=self.config.k,
                    placement=self.config.placement,
                    templates=self.templates,
                )
                outcome = run_icl(self.policies.downstream, prompt)
                answer = outcome.answer
                feedback = outcome.feedback
                token_count = outcome.token_count
                latency_ms = outcome.latency_ms
            except PlanningImpossible:
                raise
            except IcxError as exc:
                error = str(exc)
                logger.warning("timestep %d aborted: %s", t, exc)
                feedback = FeedbackRecord(Judgement.NO, MismatchHint.NONE, f"stage failure: {exc}")

            if answer:
                final_answer = answer
            memory = update_memory(memory, chain, feedback)
            traces.append(
                TimestepTrace(
                    index=t,
                    chain=tuple(op.value for op in chain),
                    plan_attempts=tuple(
                        {"source": a.source, "valid": a.valid, "raw": a.raw, "error": a.error}
                        for a in plan.attempts
                    ),
                    answer=answer,
                    judgement=feedback.judgement.value,
                    hint=feedback.hint.value,
                    feedback_text=feedback.text,
                    initial_pool=state.candidates.initial_size if state.candidates else 0,
                    kept=len(state.candidates) if state.candidates else 0,
                    token_count=token_count,
                    latency_ms=latency_ms,
                    deviations=tuple(state.deviations),
                    error=error,
                )
            )
            if feedback.judgement == Judgement.YES:
                converged = True
                break

        return EpisodeReport(
            final_answer=final_answer,
            converged=converged,
            timesteps=tuple(traces),
            memory=memory,
        )
