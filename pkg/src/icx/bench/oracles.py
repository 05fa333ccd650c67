"""Deterministic stand-ins for every model role.

Each policy answers from the generator's ground-truth tables instead of a
live model, keyed by the serial token every synthetic question carries.
Behavior is a pure function of the prompt text, so whole benchmark runs
replay bit-identically.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

from ..ogg import Op, render_toolchain_line
from ..policy import ChatRequest, ChatResponse
from ..prompts import (
    AGENTIC_NO,
    AGENTIC_YES,
    FEEDBACK_NO,
    FEEDBACK_PREFIX,
    FEEDBACK_YES,
)
from .synth import BenchMeta

_SERIAL_RE = re.compile(r"\b([cq]\d{5})\b")
_QUERY_Q_RE = re.compile(r"^\s*Query question:\s*(.*)$", re.MULTILINE)
_REF_Q_RE = re.compile(r"^\s*Reference question:\s*(.*)$", re.MULTILINE)
_TARGET_RE = re.compile(r"^\s*Target question:\s*(.*)$", re.MULTILINE)
_REWRITE_RE = re.compile(r"^\s*Rewrite this question:\s*(.*)$", re.MULTILINE)
_BLOCK_Q_RE = re.compile(r"^\s*Question:\s*(.*)$", re.MULTILINE)
_FINAL_Q_RE = re.compile(r"^\s*Final Question:\s*(.*)$", re.MULTILINE)
_SHOT_BUDGET_RE = re.compile(r"roughly (\d+) usable")

# Judgement thresholds of the simulated downstream model.
ON_TASK_ADEQUATE = 0.75
ON_TASK_MISLED = 0.5
ON_STYLE_ADEQUATE = 0.5
SHOT_FILL_RATIO = 0.75

UNRESOLVED = "unresolved"

_SHOTS_SENTENCE = "the number of shots fell short."
_STYLE_SENTENCE = "the structure of the texts did not match the query."
_MODALITY_SENTENCE = {
    "image": "the mismatch arose from the images of the reference samples.",
    "text": "the mismatch arose from the texts of the reference samples.",
}


@dataclass(frozen=True)
class FnPolicy:
    """ModelPolicy over a plain prompt-to-text function."""

    fn: Callable[[str], str]

    def complete(self, request: ChatRequest) -> ChatResponse:
        prompt = request.text()
        out = self.fn(prompt)
        return ChatResponse(text=out, total_tokens=(len(prompt) + len(out)) // 4)


def _serial_in(text: str | None) -> str | None:
    if not text:
        return None
    m = _SERIAL_RE.search(text)
    return m.group(1) if m else None


def make_filter_policy(meta: BenchMeta) -> FnPolicy:
    """Coherence judge: YES exactly when query and reference share a task tag."""

    def judge(prompt: str) -> str:
        q_m = _QUERY_Q_RE.search(prompt)
        r_m = _REF_Q_RE.search(prompt)
        q_serial = _serial_in(q_m.group(1) if q_m else None)
        r_serial = _serial_in(r_m.group(1) if r_m else None)
        q_task = meta.task_tags.get(q_serial) if q_serial else None
        r_task = meta.task_tags.get(r_serial) if r_serial else None
        if q_task is not None and q_task == r_task:
            return f"{AGENTIC_YES} shared task material."
        return f"{AGENTIC_NO} off-task reference."

    return FnPolicy(judge)


def make_align_policy(meta: BenchMeta) -> FnPolicy:
    """Structural rewriter: re-renders the reference topic and serial in the
    target question's style frame.  A reference already in that frame maps to
    itself; an unrecognizable reference passes through unchanged."""

    def rewrite(prompt: str) -> str:
        t_m = _TARGET_RE.search(prompt)
        r_m = _REWRITE_RE.search(prompt)
        reference = (r_m.group(1) if r_m else "").strip()
        q_serial = _serial_in(t_m.group(1) if t_m else None)
        r_serial = _serial_in(reference)
        if r_serial is None or r_serial not in meta.topics:
            return reference
        style = meta.style_tags.get(q_serial, meta.query_style) if q_serial else meta.query_style
        frame = meta.frame_of(style)
        return frame.format(t=meta.topics[r_serial], serial=r_serial)

    return FnPolicy(rewrite)


def make_downstream_policy(meta: BenchMeta) -> FnPolicy:
    """Simulated answerer and feedback writer.

    The reply is correct when the context is supportive enough for the
    query's difficulty: a query of difficulty d needs at least d on-task
    shots, a mostly off-task context misleads the model outright, and
    innate (d = 0) queries survive on their own.  The judgement demands an
    adequate context that also fills most of the requested shot budget, and
    a negative judgement blames the dominant defect: the noisy modality,
    then surface-form mismatch, then shot count.
    """

    def respond(prompt: str) -> str:
        final_m = _FINAL_Q_RE.search(prompt)
        q_serial = _serial_in(final_m.group(1) if final_m else None)
        gold = meta.gold.get(q_serial) if q_serial else None
        difficulty = meta.difficulty.get(q_serial, 0) if q_serial else 0
        q_task = meta.task_tags.get(q_serial) if q_serial else None

        budget_m = _SHOT_BUDGET_RE.search(prompt)
        needed = math.ceil(SHOT_FILL_RATIO * int(budget_m.group(1))) if budget_m else 0

        refs = [m.group(1) for m in _BLOCK_Q_RE.finditer(prompt)]
        n = len(refs)
        if n == 0:
            answer = gold if gold is not None and difficulty == 0 else UNRESOLVED
            return f"{answer}\n{FEEDBACK_NO} {FEEDBACK_PREFIX} {_SHOTS_SENTENCE}"

        on_task_count = 0
        on_style_count = 0
        for ref in refs:
            serial = _serial_in(ref)
            tag = meta.task_tags.get(serial) if serial else None
            if tag is not None and tag == q_task:
                on_task_count += 1
            if meta.style_from_text(ref) == meta.query_style:
                on_style_count += 1
        on_task = on_task_count / n
        on_style = on_style_count / n

        misled = on_task < ON_TASK_MISLED
        adequate = on_task >= ON_TASK_ADEQUATE and on_style >= ON_STYLE_ADEQUATE
        supported = difficulty == 0 or (adequate and on_task_count >= difficulty)
        correct = gold is not None and not misled and supported
        answer = gold if correct else UNRESOLVED

        if adequate and n >= needed:
            return f"{answer}\n{FEEDBACK_YES}"
        if on_task < ON_TASK_ADEQUATE:
            sentence = _MODALITY_SENTENCE[meta.modality_hint]
        elif on_style < ON_STYLE_ADEQUATE:
            sentence = _STYLE_SENTENCE
        else:
            sentence = _SHOTS_SENTENCE
        return f"{answer}\n{FEEDBACK_NO} {FEEDBACK_PREFIX} {sentence}"

    return FnPolicy(respond)


_FULL_PASS = (
    Op.START,
    Op.GET_QUERY,
    Op.CHECK_UPDATING,
    Op.GET_HARDWARE_STATUS,
    Op.MATCHING_EMBEDDING_MODELS,
    Op.MULTIMODAL_EMBEDDING,
    Op.LOAD_VECTOR_DATABASE,
    Op.TEXTUAL_SIMILARITY_RETRIEVAL,
    Op.VISUAL_SIMILARITY_RETRIEVAL,
    Op.AGENTIC_RETRIEVAL,
    Op.STRUCTURAL_ALIGNMENT,
    Op.END,
)


def make_planner_policy() -> FnPolicy:
    """Always proposes the full denoising pass.

    Valid whenever that chain is still selectable, which holds on a fresh
    memory; pair with MalformedPolicy to measure format-failure recovery.
    """
    line = render_toolchain_line(_FULL_PASS)

    def plan(prompt: str) -> str:
        return f"The grammar admits one full pass over both modalities.\n{line}"

    return FnPolicy(plan)
