"""Workflow planning over the operation grammar.

Rule mode is a deterministic scorer over the enumerated toolchains; model
mode asks a policy model for a chain and falls back to rule mode when the
model keeps violating the format or the selection criteria.  Feedback from
the downstream model steers both through score_chain.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

from .errors import FormatError, PlanningImpossible, SchemaError, UnknownOperationError
from .ogg import (
    GrammarGraph,
    Op,
    OperationSequence,
    enumerate_toolchains,
    format_arrows,
    parse_toolchain_text,
    render_toolchain_line,
    validate_sequence,
)
from .policy import ChatRequest, ModelPolicy, TextPart
from .prompts import (
    FEEDBACK_NO,
    FEEDBACK_PREFIX,
    FEEDBACK_YES,
    FIRST_STEP_MARKER,
    TOOLCHAIN_MARKER,
    PromptTemplates,
)
from .core import Timestep

logger = logging.getLogger(__name__)


class Judgement(str, Enum):
    YES = "Yes"
    NO = "No"


class MismatchHint(str, Enum):
    TEXT = "text"
    IMAGE = "image"
    INSUFFICIENT_SHOTS = "insufficient-shots"
    NONE = "none"


@dataclass(frozen=True)
class FeedbackRecord:
    judgement: Judgement
    hint: MismatchHint = MismatchHint.NONE
    text: str = ""

    def __post_init__(self) -> None:
        if self.judgement == Judgement.YES and self.hint != MismatchHint.NONE:
            raise SchemaError("a Yes judgement cannot carry a mismatch hint")


@dataclass(frozen=True)
class Memory:
    """Append-only record of (toolchain, feedback) pairs."""

    entries: tuple[tuple[OperationSequence, FeedbackRecord], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def used_chains(self) -> set[OperationSequence]:
        return {chain for chain, _ in self.entries}

    def last_feedback(self) -> FeedbackRecord | None:
        return self.entries[-1][1] if self.entries else None


def update_memory(memory: Memory, chain: OperationSequence, feedback: FeedbackRecord) -> Memory:
    return Memory(entries=memory.entries + ((chain, feedback),))


@dataclass(frozen=True)
class PlanConstraints:
    first_step_required: frozenset[Op] = frozenset(
        {Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.VISUAL_SIMILARITY_RETRIEVAL}
    )
    exhaustion_required: frozenset[Op] = frozenset(
        {
            Op.TEXTUAL_SIMILARITY_RETRIEVAL,
            Op.VISUAL_SIMILARITY_RETRIEVAL,
            Op.AGENTIC_RETRIEVAL,
        }
    )
    forbid_repeats: bool = True
    # Component ablations: chains touching any of these ops are never picked.
    forbidden_ops: frozenset[Op] = frozenset()


_INSUFFICIENT_RE = re.compile(r"number of shots|shots? fell short|insufficient", re.IGNORECASE)
_IMAGE_RE = re.compile(r"\bimages?\b", re.IGNORECASE)
_TEXT_RE = re.compile(r"\btexts?\b", re.IGNORECASE)


def parse_feedback(text: str) -> FeedbackRecord:
    """Extract judgement and mismatch hint from downstream output.

    The earliest judgement token wins.  Hints are only read from the
    substring after the Feedback: marker; absent keywords mean no hint.
    Raises FormatError when no judgement token is present at all.
    """
    pos_yes = text.find(FEEDBACK_YES)
    pos_no = text.find(FEEDBACK_NO)
    if pos_yes < 0 and pos_no < 0:
        raise FormatError("no judgement token in downstream output")
    if pos_no < 0 or (0 <= pos_yes < pos_no):
        return FeedbackRecord(Judgement.YES, MismatchHint.NONE, text)
    seg = text[pos_no + len(FEEDBACK_NO):]
    marker = seg.find(FEEDBACK_PREFIX)
    hint = MismatchHint.NONE
    if marker >= 0:
        seg = seg[marker + len(FEEDBACK_PREFIX):]
        if _INSUFFICIENT_RE.search(seg):
            hint = MismatchHint.INSUFFICIENT_SHOTS
        elif _IMAGE_RE.search(seg):
            hint = MismatchHint.IMAGE
        elif _TEXT_RE.search(seg):
            hint = MismatchHint.TEXT
    return FeedbackRecord(Judgement.NO, hint, text)


_HINT_SENTENCES = {
    MismatchHint.TEXT: "the mismatch arose from the text of the reference samples.",
    MismatchHint.IMAGE: "the mismatch arose from the image of the reference samples.",
    MismatchHint.INSUFFICIENT_SHOTS: "the number of shots fell short of the preset value.",
}


def render_feedback(record: FeedbackRecord) -> str:
    """Canonical textual form; parse_feedback inverts it."""
    if record.judgement == Judgement.YES:
        return FEEDBACK_YES
    if record.hint == MismatchHint.NONE:
        return FEEDBACK_NO
    return f"{FEEDBACK_NO}\n{FEEDBACK_PREFIX} {_HINT_SENTENCES[record.hint]}"


def _visual_before_textual(chain: OperationSequence) -> bool:
    if Op.VISUAL_SIMILARITY_RETRIEVAL not in chain:
        return False
    if Op.TEXTUAL_SIMILARITY_RETRIEVAL not in chain:
        return True
    return chain.index(Op.VISUAL_SIMILARITY_RETRIEVAL) < chain.index(
        Op.TEXTUAL_SIMILARITY_RETRIEVAL
    )


def score_chain(chain: OperationSequence, memory: Memory) -> int:
    """Feedback-driven preference score; higher is better.

    With no feedback yet, denoising coverage is worth one point per op.
    Afterwards the last hint picks the remedial structure worth two.
    """
    last = memory.last_feedback()
    if last is None:
        return sum(1 for op in (Op.AGENTIC_RETRIEVAL, Op.STRUCTURAL_ALIGNMENT) if op in chain)
    score = 0
    if last.hint == MismatchHint.TEXT and Op.STRUCTURAL_ALIGNMENT in chain:
        score += 2
    elif last.hint == MismatchHint.IMAGE and _visual_before_textual(chain):
        score += 2
    elif last.hint == MismatchHint.INSUFFICIENT_SHOTS and Op.AGENTIC_RETRIEVAL not in chain:
        score += 2
    return score


@lru_cache(maxsize=8)
def _all_chains(graph: GrammarGraph) -> tuple[OperationSequence, ...]:
    return tuple(enumerate_toolchains(graph))


def _chain_key(chain: OperationSequence) -> tuple[str, ...]:
    return tuple(op.value for op in chain)


def candidate_chains(
    graph: GrammarGraph,
    memory: Memory,
    timestep: Timestep,
    constraints: PlanConstraints,
) -> list[OperationSequence]:
    """The set of chains the selection criteria allow right now."""
    chains = [
        c
        for c in _all_chains(graph)
        if not (constraints.forbidden_ops & set(c))
    ]
    if not chains:
        raise PlanningImpossible("every toolchain touches a forbidden operation")
    used = memory.used_chains() if constraints.forbid_repeats else set()
    unused = [c for c in chains if c not in used]
    if not unused:
        exhausted = [c for c in chains if constraints.exhaustion_required <= set(c)]
        # Ablations can make the exhaustion set unsatisfiable; degrade to
        # repeating any allowed chain rather than dead-ending.
        return exhausted or chains
    if timestep.value == 0:
        first = [c for c in unused if constraints.first_step_required <= set(c)]
        if first:
            return first
        first_any = [c for c in chains if constraints.first_step_required <= set(c)]
        if first_any:
            return first_any
        raise PlanningImpossible(
            "no toolchain carries the required first-step operations"
        )
    return unused


def select_chain(candidates: list[OperationSequence], memory: Memory) -> OperationSequence:
    return min(candidates, key=lambda c: (-score_chain(c, memory), _chain_key(c)))


@dataclass(frozen=True)
class PlanAttempt:
    source: str  # "model" or "rule"
    valid: bool
    raw: str | None = None
    error: str | None = None


@dataclass(frozen=True)
class PlanResult:
    chain: OperationSequence
    attempts: tuple[PlanAttempt, ...]
    mode: str

    def first_attempt_valid(self) -> bool:
        return bool(self.attempts) and self.attempts[0].valid

    def valid_within(self, n: int) -> bool:
        return any(a.valid for a in self.attempts[:n])


_TOOL_DESCRIPTIONS: dict[Op, str] = {
    Op.START: "entry marker; does nothing",
    Op.GET_QUERY: "load the incoming question and its image",
    Op.GET_HARDWARE_STATUS: "probe free GPU memory and disk space",
    Op.CHECK_UPDATING: "diff the corpus against the stored digests",
    Op.MATCHING_EMBEDDING_MODELS: "pick embedding backbones that fit the machine",
    Op.MULTIMODAL_EMBEDDING: "embed changed samples in both modalities",
    Op.LOAD_VECTOR_DATABASE: "open the vector database, applying fresh vectors",
    Op.TEXTUAL_SIMILARITY_RETRIEVAL: "rank stored samples against the query text",
    Op.VISUAL_SIMILARITY_RETRIEVAL: "rank stored samples against the query image",
    Op.AGENTIC_RETRIEVAL: "screen candidates for semantic fit, one by one",
    Op.STRUCTURAL_ALIGNMENT: "rewrite candidate questions into the query's phrasing",
    Op.END: "exit marker; does nothing",
}


def render_orchestration_prompt(
    templates: PromptTemplates,
    graph: GrammarGraph,
    memory: Memory,
    timestep: Timestep,
    constraints: PlanConstraints,
) -> str:
    library = "\n".join(
        f"- {op.value}: {_TOOL_DESCRIPTIONS.get(op, 'no description')}"
        for op in sorted(graph.nodes, key=lambda o: o.value)
    )
    edges = "\n".join(
        f"{a.value} -> {b.value}"
        for a, b in sorted(graph.edges, key=lambda e: (e[0].value, e[1].value))
    )
    if memory.entries:
        lines = []
        for chain, feedback in memory.entries:
            lines.append(render_toolchain_line(chain))
            lines.append(f"Result: {render_feedback(feedback)}")
        memory_text = "\n".join(lines)
    else:
        memory_text = "(none yet)"
    step_note = f"{FIRST_STEP_MARKER}\n\n" if timestep.value == 0 else ""
    extra = ""
    if constraints.forbidden_ops:
        banned = ", ".join(sorted(op.value for op in constraints.forbidden_ops))
        extra = f"5. Never use these operations: {banned}.\n"
    return templates.orchestration.format(
        tool_library=library,
        tool_graph=edges,
        memory=memory_text,
        step_note=step_note,
        extra_rules=extra,
        toolchain_marker=TOOLCHAIN_MARKER,
    )


_MAX_REPROMPTS = 3


def plan_toolchain(
    graph: GrammarGraph,
    memory: Memory,
    timestep: Timestep,
    constraints: PlanConstraints | None = None,
    mode: str = "rule",
    policy: ModelPolicy | None = None,
    templates: PromptTemplates | None = None,
) -> PlanResult:
    """Choose the next toolchain.

    Rule mode is pure and deterministic.  Model mode prompts the policy,
    re-prompting up to three times on format or criteria violations before
    falling back to the rule decision; every attempt is recorded so task
    success can be measured per iteration.
    """
    constraints = constraints or PlanConstraints()
    candidates = candidate_chains(graph, memory, timestep, constraints)
    rule_choice = select_chain(candidates, memory)
    if mode == "rule":
        return PlanResult(rule_choice, (PlanAttempt("rule", True),), "rule")
    if mode != "model":
        raise SchemaError(f"unknown planner mode {mode!r}")
    if policy is None:
        raise SchemaError("model mode requires a policy")
    templates = templates or PromptTemplates()
    prompt = render_orchestration_prompt(templates, graph, memory, timestep, constraints)
    allowed = set(candidates)
    attempts: list[PlanAttempt] = []
    for _ in range(1 + _MAX_REPROMPTS):
        response = policy.complete(ChatRequest(parts=[TextPart(prompt)]))
        try:
            chain = parse_toolchain_text(response.text)
        except (FormatError, UnknownOperationError) as exc:
            attempts.append(PlanAttempt("model", False, response.text, str(exc)))
            logger.info("planner output rejected: %s", exc)
            continue
        verdict = validate_sequence(graph, chain)
        if not verdict.valid:
            attempts.append(
                PlanAttempt("model", False, response.text, f"invalid chain: {verdict.reason}")
            )
            continue
        if chain not in allowed:
            attempts.append(
                PlanAttempt(
                    "model",
                    False,
                    response.text,
                    f"criteria violation: {format_arrows(chain)} not selectable now",
                )
            )
            continue
        attempts.append(PlanAttempt("model", True, response.text))
        return PlanResult(chain, tuple(attempts), "model")
    attempts.append(PlanAttempt("rule", True, None, "fallback after re-prompts"))
    logger.warning("planner fell back to rule mode after %d attempts", len(attempts) - 1)
    return PlanResult(rule_choice, tuple(attempts), "model")
