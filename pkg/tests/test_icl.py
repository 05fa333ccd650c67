from __future__ import annotations

import pytest

from icx.contextualize import CandidateItem, CandidateSet, Stage, initial_candidates
from icx.core import Query, Sample
from icx.errors import IclError, TransportError
from icx.icl import (
    DEFAULT_SHOT_COUNT,
    Placement,
    RenderedPrompt,
    assemble_icl_prompt,
    run_icl,
    split_icl_output,
)
from icx.planner import Judgement, MismatchHint, render_feedback, FeedbackRecord
from icx.policy import ChatResponse, ImagePart, OraclePolicy, TextPart
from icx.prompts import FEEDBACK_NO, FEEDBACK_PREFIX, FEEDBACK_YES


@pytest.fixture()
def context(image_factory) -> CandidateSet:
    samples = [
        Sample(
            id=f"ref{i}",
            question=f"How many washers does tray {i} hold?",
            answer=f"answer-{i}",
            image=image_factory(f"tray {i}".encode()),
            style_tag="interrogative",
            task_tag="counting",
        )
        for i in range(4)
    ]
    items = tuple(
        CandidateItem(sample=s, score=0.9 - i * 0.1, rewritten_question=None)
        for i, s in enumerate(samples)
    )
    return CandidateSet(items=items, stage=Stage.INITIAL)


@pytest.fixture()
def query(image_factory) -> Query:
    return Query(
        text="How many washers does the crate hold?",
        image=image_factory(b"crate scene"),
        task_tag="counting",
        style_tag="interrogative",
    )


def test_assemble_counts_blocks(context, query):
    prompt = assemble_icl_prompt(context, query, k=2)
    text = prompt.text()
    assert text.count("Question:") == 2 + text.count("Final Question:")
    assert text.count("Answer:") == 2
    assert text.count("Final Question:") == 1
    assert "answer-0" in text and "answer-1" in text
    assert "answer-2" not in text
    assert prompt.shot_count == 2


def test_assemble_upfront_images_precede_text(context, query):
    prompt = assemble_icl_prompt(context, query, k=3, placement=Placement.UPFRONT)
    kinds = [type(p).__name__ for p in prompt.parts]
    first_text = kinds.index("TextPart")
    assert all(k == "ImagePart" for k in kinds[:first_text])
    assert kinds[first_text:] == ["TextPart"]
    assert prompt.image_count() == 4  # 3 references plus the query image


def test_assemble_interleaved_pairs_images_with_blocks(context, query):
    prompt = assemble_icl_prompt(context, query, k=3, placement=Placement.INTERLEAVED)
    parts = list(prompt.parts)
    # header, then (image, block) pairs, then query image, then final text
    assert isinstance(parts[0], TextPart)
    for i in range(3):
        assert isinstance(parts[1 + 2 * i], ImagePart)
        assert isinstance(parts[2 + 2 * i], TextPart)
        assert f"answer-{i}" in parts[2 + 2 * i].text
    assert isinstance(parts[-2], ImagePart)
    assert isinstance(parts[-1], TextPart)
    assert "Final Question:" in parts[-1].text


def test_assemble_zero_shot(context, query):
    prompt = assemble_icl_prompt(context, query, k=0)
    text = prompt.text()
    assert "Question:" in text  # the final block only
    assert text.count("Answer:") == 0
    assert "Image 1" not in text
    assert "Final Question:" in text
    assert FEEDBACK_YES in text
    assert prompt.image_count() == 1  # just the query image


def test_assemble_without_query_image(context):
    query = Query(text="How many washers?", image=None)
    prompt = assemble_icl_prompt(context, query, k=2, placement=Placement.UPFRONT)
    assert prompt.image_count() == 2


def test_assemble_uses_rewritten_questions(context, query):
    from dataclasses import replace

    items = tuple(
        replace(item, rewritten_question=f"Rewritten form {item.sample.id}?")
        for item in context.items
    )
    aligned = CandidateSet(items=items, stage=Stage.ALIGNED, initial_size=context.initial_size)
    prompt = assemble_icl_prompt(aligned, query, k=2)
    text = prompt.text()
    assert "Rewritten form ref0?" in text
    assert context.items[0].sample.question not in text


def test_assemble_truncates_to_k(context, query):
    prompt = assemble_icl_prompt(context, query, k=2)
    assert prompt.image_count() == 3  # 2 refs + query


def test_assemble_deterministic(context, query):
    a = assemble_icl_prompt(context, query, k=4)
    b = assemble_icl_prompt(context, query, k=4)
    assert a.text() == b.text()
    assert [type(p).__name__ for p in a.parts] == [type(p).__name__ for p in b.parts]


def test_assemble_mentions_preset_shot_count(context, query):
    prompt = assemble_icl_prompt(context, query, k=4)
    assert "4" in prompt.text()
    assert DEFAULT_SHOT_COUNT == 8


# --- output splitting -------------------------------------------------------


def test_split_yes_output():
    raw = f"The tray holds six washers.\n{FEEDBACK_YES}\n"
    answer, feedback, flagged = split_icl_output(raw)
    assert answer == "The tray holds six washers."
    assert feedback.judgement == Judgement.YES
    assert feedback.hint == MismatchHint.NONE
    assert not flagged


def test_split_no_with_hint():
    raw = (
        "unclear\n"
        f"{FEEDBACK_NO}\n{FEEDBACK_PREFIX} the mismatch arose from the image of the reference samples."
    )
    answer, feedback, flagged = split_icl_output(raw)
    assert answer == "unclear"
    assert feedback.judgement == Judgement.NO
    assert feedback.hint == MismatchHint.IMAGE
    assert not flagged


def test_split_missing_token_fails_closed():
    answer, feedback, flagged = split_icl_output("just an answer, no judgement")
    assert answer == "just an answer, no judgement"
    assert feedback.judgement == Judgement.NO
    assert feedback.hint == MismatchHint.NONE
    assert flagged


def test_split_earliest_token_is_the_seam():
    raw = f"answer\n{FEEDBACK_NO}\nbut also {FEEDBACK_YES}"
    answer, feedback, _ = split_icl_output(raw)
    assert feedback.judgement == Judgement.NO


def test_split_round_trips_rendered_feedback():
    for judgement, hint in [
        (Judgement.YES, MismatchHint.NONE),
        (Judgement.NO, MismatchHint.TEXT),
        (Judgement.NO, MismatchHint.IMAGE),
        (Judgement.NO, MismatchHint.INSUFFICIENT_SHOTS),
    ]:
        rendered = render_feedback(FeedbackRecord(judgement, hint, ""))
        raw = "the answer\n" + rendered
        answer, feedback, flagged = split_icl_output(raw)
        assert answer == "the answer"
        assert feedback.judgement == judgement
        assert feedback.hint == hint
        assert not flagged


# --- run_icl ----------------------------------------------------------------


def test_run_icl_parses_oracle_reply(context, query):
    prompt = assemble_icl_prompt(context, query, k=2)
    model = OraclePolicy(lambda req: f"six\n{FEEDBACK_YES}\n")
    outcome = run_icl(model, prompt)
    assert outcome.answer == "six"
    assert outcome.feedback.judgement == Judgement.YES
    assert outcome.raw.startswith("six")
    assert outcome.token_count > 0
    assert outcome.latency_ms >= 0.0
    assert not outcome.flagged


def test_run_icl_reparse_partition(context, query):
    prompt = assemble_icl_prompt(context, query, k=1)
    model = OraclePolicy(
        lambda req: f"some answer\n{FEEDBACK_NO}\n{FEEDBACK_PREFIX} the mismatch arose from the text of the reference samples."
    )
    outcome = run_icl(model, prompt)
    answer, feedback, flagged = split_icl_output(outcome.raw)
    assert answer == outcome.answer
    assert feedback == outcome.feedback
    assert flagged == outcome.flagged
    assert outcome.feedback.hint == MismatchHint.TEXT


def test_run_icl_flags_missing_judgement(context, query):
    prompt = assemble_icl_prompt(context, query, k=1)
    outcome = run_icl(OraclePolicy(lambda req: "bare answer"), prompt)
    assert outcome.flagged
    assert outcome.answer == "bare answer"
    assert outcome.feedback.judgement == Judgement.NO


def test_run_icl_transport_failure_becomes_icl_error(context, query):
    class Dead:
        def complete(self, request):
            raise TransportError("endpoint gone")

    prompt = assemble_icl_prompt(context, query, k=1)
    with pytest.raises(IclError):
        run_icl(Dead(), prompt)


def test_run_icl_accepts_query_only_prompt(query):
    prompt = assemble_icl_prompt(initial_candidates([]), query, k=0)
    outcome = run_icl(OraclePolicy(lambda req: f"guess\n{FEEDBACK_YES}"), prompt)
    assert outcome.answer == "guess"


def test_rendered_prompt_text_matches_request(context, query):
    seen = []

    def rules(req):
        seen.append(req)
        return f"x\n{FEEDBACK_YES}"

    prompt = assemble_icl_prompt(context, query, k=2, placement=Placement.UPFRONT)
    run_icl(OraclePolicy(rules), prompt)
    assert seen[0].text() == prompt.text()
    assert isinstance(prompt, RenderedPrompt)
