from __future__ import annotations

import json
import re

import pytest

from icx.contextualize import Stage
from icx.core import Corpus, Query, Sample
from icx.embed import HardwareStatus, MockEmbeddingBackend
from icx.errors import PlanningImpossible, SchemaError
from icx.ogg import Op
from icx.orchestrator import Engine, EngineConfig, EpisodeState, PolicyBundle
from icx.planner import PlanConstraints
from icx.policy import ChatResponse
from icx.prompts import AGENTIC_YES
from icx.vecdb import VectorDatabase, persist

_REWRITE_RE = re.compile(r"Rewrite this question:\s*(.*)")

BOOTSTRAP = (
    Op.START,
    Op.GET_QUERY,
    Op.CHECK_UPDATING,
    Op.GET_HARDWARE_STATUS,
    Op.MATCHING_EMBEDDING_MODELS,
    Op.MULTIMODAL_EMBEDDING,
    Op.LOAD_VECTOR_DATABASE,
)
FULL_CHAIN = BOOTSTRAP + (
    Op.TEXTUAL_SIMILARITY_RETRIEVAL,
    Op.VISUAL_SIMILARITY_RETRIEVAL,
    Op.AGENTIC_RETRIEVAL,
    Op.STRUCTURAL_ALIGNMENT,
    Op.END,
)
SYNC_CHAIN = (
    Op.START,
    Op.GET_QUERY,
    Op.CHECK_UPDATING,
    Op.MULTIMODAL_EMBEDDING,
    Op.LOAD_VECTOR_DATABASE,
    Op.TEXTUAL_SIMILARITY_RETRIEVAL,
    Op.END,
)
LEAN_CHAIN = (
    Op.START,
    Op.GET_QUERY,
    Op.LOAD_VECTOR_DATABASE,
    Op.TEXTUAL_SIMILARITY_RETRIEVAL,
    Op.END,
)

YES_OUTPUT = "four\nJudgement-Yes"
NO_OUTPUT = "unsure\nJudgement-No Feedback: mismatch somewhere"


def fixed_probe() -> HardwareStatus:
    return HardwareStatus(free_gpu_gb=32.0, free_disk_gb=100.0)


class FnPolicy:
    """Deterministic stand-in model driven by a text -> text function."""

    def __init__(self, fn):
        self.fn = fn
        self.prompts = []

    def complete(self, request):
        text = request.text()
        self.prompts.append(text)
        out = self.fn(text)
        return ChatResponse(out, total_tokens=max(1, (len(text) + len(out)) // 4))


class Scripted:
    """Plays back canned outputs in order; the last one repeats forever."""

    def __init__(self, *outputs: str, errors_first: int = 0):
        self.outputs = list(outputs)
        self.errors_left = errors_first
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        if self.errors_left > 0:
            self.errors_left -= 1
            raise RuntimeError("socket down")
        out = self.outputs.pop(0) if len(self.outputs) > 1 else self.outputs[0]
        return ChatResponse(out, total_tokens=64)


def echo_rewrite(prompt: str) -> str:
    m = _REWRITE_RE.search(prompt)
    assert m, "structural prompt lost its reference question"
    return m.group(1).strip()


def make_bundle(downstream) -> PolicyBundle:
    return PolicyBundle(
        downstream=downstream,
        filter=FnPolicy(lambda _: AGENTIC_YES),
        align=FnPolicy(echo_rewrite),
    )


def make_engine(corpus, db_path, downstream, backend_factory=None, **cfg) -> Engine:
    kwargs = {"hardware_probe": fixed_probe}
    if backend_factory is not None:
        kwargs["backend_factory"] = backend_factory
    if cfg:
        kwargs["config"] = EngineConfig(**cfg)
    return Engine(corpus, db_path, make_bundle(downstream), **kwargs)


@pytest.fixture()
def rivet_query(image_factory) -> Query:
    return Query(text="How many rivets does panel 2 hold?", image=image_factory(b"panel 2"))


@pytest.fixture()
def trio_corpus(image_factory) -> Corpus:
    rows = [
        ("t0000", "grommet", b"sprocket sprocket lid"),
        ("t0001", "washer", b"dynamo dynamo lid"),
        ("t0002", "spacer", b"flange flange lid"),
    ]
    samples = [
        Sample(
            id=sid,
            question=f"Count the {w} row on the {w} plate.",
            answer=w,
            image=image_factory(img),
            style_tag="imperative",
            task_tag="counting",
        )
        for sid, w, img in rows
    ]
    return Corpus(samples=samples)


class RecordingBackend(MockEmbeddingBackend):
    def __init__(self, log, **kw):
        super().__init__(**kw)
        self.log = log

    def embed_texts(self, texts):
        self.log.extend(texts)
        return super().embed_texts(texts)


def recording_factory(log):
    def make(text, vision):
        return RecordingBackend(
            log,
            text_model_id=text.model_id,
            vision_model_id=vision.model_id,
            dim=text.vector_dim,
        )

    return make


class TestExecuteChain:
    def test_full_chain_builds_db_filters_and_aligns(self, small_corpus, rivet_query, tmp_path):
        db_path = tmp_path / "db"
        engine = make_engine(small_corpus, db_path, Scripted(YES_OUTPUT), k=4)
        state = engine.execute_chain(FULL_CHAIN, EpisodeState(query=rivet_query))

        assert (db_path / "manifest.json").exists()
        assert len(state.db) == 6
        assert state.candidates.stage == Stage.ALIGNED
        assert len(state.candidates) == 4
        assert state.candidates.initial_size == 6  # ceil(1.5 * 4) clamped to corpus size
        assert state.candidates.filter_observed
        assert all(item.judgement == AGENTIC_YES for item in state.candidates.items)
        assert all(item.rewritten_question for item in state.candidates.items)
        assert state.deviations == []

    def test_invalid_chain_rejected_before_side_effects(self, small_corpus, rivet_query, tmp_path):
        db_path = tmp_path / "db"
        made = []

        def factory(text, vision):
            made.append(text.model_id)
            return MockEmbeddingBackend(
                text_model_id=text.model_id, vision_model_id=vision.model_id, dim=text.vector_dim
            )

        engine = make_engine(small_corpus, db_path, Scripted(YES_OUTPUT), backend_factory=factory)
        bad = (Op.START, Op.GET_QUERY, Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.END)
        with pytest.raises(SchemaError, match="no edge"):
            engine.execute_chain(bad, EpisodeState(query=rivet_query))
        assert not db_path.exists()
        assert made == []

    def test_delta_check_is_noop_when_corpus_unchanged(self, small_corpus, rivet_query, tmp_path):
        db_path = tmp_path / "db"
        engine = make_engine(small_corpus, db_path, Scripted(YES_OUTPUT))
        engine.execute_chain(SYNC_CHAIN, EpisodeState(query=rivet_query))

        with_check = engine.execute_chain(SYNC_CHAIN, EpisodeState(query=rivet_query))
        without = engine.execute_chain(LEAN_CHAIN, EpisodeState(query=rivet_query))
        assert with_check.candidates.sample_ids() == without.candidates.sample_ids()
        scores_a = [item.score for item in with_check.candidates.items]
        scores_b = [item.score for item in without.candidates.items]
        assert scores_a == pytest.approx(scores_b)

    def test_cold_start_builds_db_when_missing(self, small_corpus, rivet_query, tmp_path):
        db_path = tmp_path / "db"
        engine = make_engine(small_corpus, db_path, Scripted(YES_OUTPUT))
        state = engine.execute_chain(LEAN_CHAIN, EpisodeState(query=rivet_query))

        assert state.deviations == ["retrieval requested before any database existed"]
        assert (db_path / "manifest.json").exists()
        assert len(state.db) == 6
        assert len(state.candidates) == 6

    def test_cold_start_refills_empty_db_on_disk(self, small_corpus, rivet_query, tmp_path):
        db_path = tmp_path / "db"
        empty = VectorDatabase(
            text_backbone_id="Qwen/Qwen3-Embedding-4B",
            vision_backbone_id="Qwen/Qwen2.5-VL-3B-Instruct",
            text_dim=64,
            vision_dim=64,
        )
        persist(empty, db_path)
        engine = make_engine(small_corpus, db_path, Scripted(YES_OUTPUT))
        state = engine.execute_chain(LEAN_CHAIN, EpisodeState(query=rivet_query))

        assert state.deviations == ["database on disk was empty while the corpus was not"]
        assert len(state.db) == 6

    def test_cascaded_visual_then_text_is_one_retrieval(self, trio_corpus, image_factory, tmp_path):
        db_path = tmp_path / "db"
        engine = make_engine(trio_corpus, db_path, Scripted(YES_OUTPUT), k=1, overfetch_factor=1)
        query = Query(
            text="Where is the grommet slot on the grommet rail?",
            image=image_factory(b"dynamo dynamo probe"),
        )
        engine.execute_chain(SYNC_CHAIN, EpisodeState(query=query))

        chain = (
            Op.START,
            Op.GET_QUERY,
            Op.LOAD_VECTOR_DATABASE,
            Op.VISUAL_SIMILARITY_RETRIEVAL,
            Op.TEXTUAL_SIMILARITY_RETRIEVAL,
            Op.END,
        )
        state = engine.execute_chain(chain, EpisodeState(query=query))
        # A separate textual pass would have returned the grommet sample; the
        # visual stage must narrow the pool to the dynamo image first.
        assert state.candidates.sample_ids() == ["t0001"]

    def test_cascaded_text_then_visual_is_one_retrieval(self, trio_corpus, image_factory, tmp_path):
        db_path = tmp_path / "db"
        engine = make_engine(trio_corpus, db_path, Scripted(YES_OUTPUT), k=1, overfetch_factor=1)
        query = Query(
            text="Where is the grommet slot on the grommet rail?",
            image=image_factory(b"dynamo dynamo probe"),
        )
        engine.execute_chain(SYNC_CHAIN, EpisodeState(query=query))

        chain = (
            Op.START,
            Op.GET_QUERY,
            Op.LOAD_VECTOR_DATABASE,
            Op.TEXTUAL_SIMILARITY_RETRIEVAL,
            Op.VISUAL_SIMILARITY_RETRIEVAL,
            Op.END,
        )
        state = engine.execute_chain(chain, EpisodeState(query=query))
        assert state.candidates.sample_ids() == ["t0000"]

    def test_unimodal_orders_match_their_spaces(self, trio_corpus, image_factory, tmp_path):
        db_path = tmp_path / "db"
        engine = make_engine(trio_corpus, db_path, Scripted(YES_OUTPUT), k=1)
        query = Query(
            text="Where is the grommet slot on the grommet rail?",
            image=image_factory(b"dynamo dynamo probe"),
        )
        engine.execute_chain(SYNC_CHAIN, EpisodeState(query=query))

        textual = engine.execute_chain(LEAN_CHAIN, EpisodeState(query=query))
        assert textual.candidates.sample_ids() == ["t0000"]
        visual_chain = (
            Op.START,
            Op.GET_QUERY,
            Op.LOAD_VECTOR_DATABASE,
            Op.VISUAL_SIMILARITY_RETRIEVAL,
            Op.END,
        )
        visual = engine.execute_chain(visual_chain, EpisodeState(query=query))
        assert visual.candidates.sample_ids() == ["t0001"]

    def test_visual_retrieval_needs_query_image(self, small_corpus, tmp_path):
        db_path = tmp_path / "db"
        engine = make_engine(small_corpus, db_path, Scripted(YES_OUTPUT))
        bare = Query(text="How many rivets does panel 2 hold?")
        engine.execute_chain(SYNC_CHAIN, EpisodeState(query=bare))

        visual_chain = (
            Op.START,
            Op.GET_QUERY,
            Op.LOAD_VECTOR_DATABASE,
            Op.VISUAL_SIMILARITY_RETRIEVAL,
            Op.END,
        )
        with pytest.raises(SchemaError, match="query image"):
            engine.execute_chain(visual_chain, EpisodeState(query=bare))

    def test_second_sync_embeds_no_corpus_samples(self, small_corpus, rivet_query, tmp_path):
        log = []
        engine = make_engine(
            small_corpus, tmp_path / "db", Scripted(YES_OUTPUT), backend_factory=recording_factory(log)
        )
        engine.execute_chain(SYNC_CHAIN, EpisodeState(query=rivet_query))
        questions = {s.question for s in small_corpus.samples}
        assert questions <= set(log)

        log.clear()
        engine.execute_chain(SYNC_CHAIN, EpisodeState(query=rivet_query))
        assert log == [rivet_query.text]


class TestRunEpisode:
    def test_converges_on_first_timestep(self, small_corpus, rivet_query, tmp_path):
        engine = make_engine(small_corpus, tmp_path / "db", Scripted(YES_OUTPUT))
        report = engine.run_episode(rivet_query)

        assert report.converged
        assert report.final_answer == "four"
        assert len(report.timesteps) == 1
        assert len(report.memory) == 1
        assert report.first_plan_valid()

        trace = report.timesteps[0]
        assert trace.chain == tuple(op.value for op in FULL_CHAIN)
        assert trace.judgement == "Yes"
        assert trace.hint == "none"
        assert trace.error is None
        assert trace.initial_pool == 6
        assert trace.kept == 6
        assert trace.token_count == 64
        assert trace.latency_ms >= 0.0

    def test_report_serializes_to_json(self, small_corpus, rivet_query, tmp_path):
        engine = make_engine(small_corpus, tmp_path / "db", Scripted(YES_OUTPUT))
        report = engine.run_episode(rivet_query)
        blob = json.loads(json.dumps(report.to_dict()))
        assert blob["converged"] is True
        assert blob["timesteps"][0]["chain"][0] == "start"
        assert blob["timesteps"][0]["plan_attempts"][0]["source"] == "rule"

    def test_downstream_failure_records_no_and_continues(self, small_corpus, rivet_query, tmp_path):
        downstream = Scripted("seven\nJudgement-Yes", errors_first=1)
        engine = make_engine(small_corpus, tmp_path / "db", downstream)
        report = engine.run_episode(rivet_query)

        assert len(report.timesteps) == 2
        first, second = report.timesteps
        assert first.error is not None and "downstream model failed" in first.error
        assert first.judgement == "No"
        assert first.hint == "none"
        assert first.answer == ""
        assert second.judgement == "Yes"
        assert report.converged
        assert report.final_answer == "seven"
        assert first.chain != second.chain

    def test_chain_error_is_survivable_and_replanned_around(self, small_corpus, tmp_path):
        bare = Query(text="How many rivets does panel 2 hold?")
        engine = make_engine(small_corpus, tmp_path / "db", Scripted(YES_OUTPUT))
        report = engine.run_episode(bare)

        first, second = report.timesteps
        assert "visual_similarity_retrieval" in first.chain
        assert first.error is not None and "query image" in first.error
        assert first.judgement == "No"
        assert "visual_similarity_retrieval" not in second.chain
        assert second.judgement == "Yes"
        assert report.converged

    def test_exhausts_steps_without_convergence(self, small_corpus, rivet_query, tmp_path):
        engine = make_engine(small_corpus, tmp_path / "db", Scripted(NO_OUTPUT))
        report = engine.run_episode(rivet_query, max_steps=3)

        assert not report.converged
        assert len(report.timesteps) == 3
        assert len(report.memory) == 3
        assert all(t.judgement == "No" for t in report.timesteps)
        assert report.final_answer == "unsure"
        chains = {t.chain for t in report.timesteps}
        assert len(chains) == 3  # fresh toolchain each timestep while any remain

    def test_insufficient_hint_drops_agentic_next_step(self, small_corpus, rivet_query, tmp_path):
        downstream = Scripted(
            "unsure\nJudgement-No Feedback: insufficient shots in the context", "four\nJudgement-Yes"
        )
        engine = make_engine(small_corpus, tmp_path / "db", downstream)
        report = engine.run_episode(rivet_query)

        assert len(report.timesteps) == 2
        second = report.timesteps[1]
        assert "agentic_retrieval" not in second.chain
        assert second.chain == tuple(op.value for op in BOOTSTRAP) + (
            "textual_similarity_retrieval",
            "end",
        )
        assert report.converged

    def test_planning_impossible_propagates(self, small_corpus, rivet_query, tmp_path):
        engine = make_engine(small_corpus, tmp_path / "db", Scripted(YES_OUTPUT))
        ban_retrieval = PlanConstraints(
            forbidden_ops=frozenset({Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.VISUAL_SIMILARITY_RETRIEVAL})
        )
        with pytest.raises(PlanningImpossible):
            engine.run_episode(rivet_query, constraints=ban_retrieval)

    def test_config_defaults(self):
        config = EngineConfig()
        assert config.k == 8
        assert config.max_steps == 5
        assert config.planner_mode == "rule"
