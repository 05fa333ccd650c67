"""Candidate denoising: semantic filtering and structural alignment.

Retrieval hands over a scored candidate pool; this module trims items the
judge rejects and rewrites the survivors' questions into the query's
surface form.  Noise accounting works only on tagged benchmark data.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

from .core import Query, Sample
from .errors import FormatError, ReportUnavailable, SchemaError
from .policy import ChatRequest, ImagePart, ModelPolicy, TextPart
from .prompts import AGENTIC_NO, AGENTIC_YES, PromptTemplates

logger = logging.getLogger(__name__)


class Stage(str, Enum):
    INITIAL = "initial"
    SEMANTIC_FILTERED = "semantic-filtered"
    ALIGNED = "aligned"


@dataclass(frozen=True)
class CandidateItem:
    sample: Sample
    score: float
    rewritten_question: str | None = None
    judgement: str | None = None
    flagged: bool = False

    def effective_question(self) -> str:
        return self.rewritten_question if self.rewritten_question is not None else self.sample.question


@dataclass(frozen=True)
class CandidateSet:
    items: tuple[CandidateItem, ...]
    stage: Stage = Stage.INITIAL
    initial_size: int = field(default=-1)
    filter_observed: bool = False

    def __post_init__(self) -> None:
        if self.initial_size < 0:
            object.__setattr__(self, "initial_size", len(self.items))
        if self.stage == Stage.ALIGNED:
            for item in self.items:
                if item.rewritten_question is None:
                    raise SchemaError("aligned candidate missing its rewrite")

    def __len__(self) -> int:
        return len(self.items)

    def sample_ids(self) -> list[str]:
        return [item.sample.id for item in self.items]

    def truncated(self, k: int) -> "CandidateSet":
        return replace(self, items=self.items[: max(k, 0)])


def initial_candidates(scored: list[tuple[Sample, float]]) -> CandidateSet:
    return CandidateSet(
        items=tuple(CandidateItem(sample=s, score=sc) for s, sc in scored),
        stage=Stage.INITIAL,
    )


def _judgement_from(text: str) -> str:
    """Earliest exact judgement token wins; no token is a parse failure."""
    yes_at = text.find(AGENTIC_YES)
    no_at = text.find(AGENTIC_NO)
    if yes_at < 0 and no_at < 0:
        raise FormatError(f"no judgement token in {text!r}")
    if yes_at < 0:
        return AGENTIC_NO
    if no_at < 0:
        return AGENTIC_YES
    return AGENTIC_YES if yes_at < no_at else AGENTIC_NO


def render_coherence_prompt(
    templates: PromptTemplates, query: Query, candidate: Sample
) -> str:
    return templates.coherence.format(
        query_question=query.text,
        reference_question=candidate.question,
        yes_token=AGENTIC_YES,
        no_token=AGENTIC_NO,
    )


def agentic_filter(
    query: Query,
    candidates: CandidateSet,
    policy: ModelPolicy,
    templates: PromptTemplates | None = None,
    max_concurrency: int = 4,
) -> CandidateSet:
    """Keep candidates the judge marks coherent with the query.

    Order is preserved; an unparseable verdict gets one retry and then the
    item is retained with a flag, since dropping a usable shot hurts more
    than keeping a noisy one.
    """
    if candidates.stage != Stage.INITIAL:
        raise SchemaError(f"agentic_filter expects the initial stage, got {candidates.stage.value}")
    templates = templates or PromptTemplates()

    def judge(item: CandidateItem) -> CandidateItem:
        prompt = render_coherence_prompt(templates, query, item.sample)
        parts: list[TextPart | ImagePart] = [TextPart(prompt)]
        if query.image is not None:
            parts.append(ImagePart(query.image))
        parts.append(ImagePart(item.sample.image))
        request = ChatRequest(parts=parts)
        for attempt in range(2):
            response = policy.complete(request)
            try:
                verdict = _judgement_from(response.text)
            except FormatError:
                logger.info("unparseable judgement for %s (attempt %d)", item.sample.id, attempt)
                continue
            return replace(item, judgement=verdict)
        return replace(item, judgement=AGENTIC_YES, flagged=True)

    with ThreadPoolExecutor(max_workers=max(1, max_concurrency)) as pool:
        judged = list(pool.map(judge, candidates.items))
    kept = tuple(item for item in judged if item.judgement == AGENTIC_YES)
    return CandidateSet(
        items=kept,
        stage=Stage.SEMANTIC_FILTERED,
        initial_size=candidates.initial_size,
        filter_observed=True,
    )


def render_structural_prompt(
    templates: PromptTemplates, query_text: str, candidate_question: str
) -> str:
    return templates.structural.format(
        query_question=query_text,
        reference_question=candidate_question,
    )


def structural_align(
    query_text: str,
    candidates: CandidateSet,
    policy: ModelPolicy,
    templates: PromptTemplates | None = None,
    max_concurrency: int = 4,
) -> CandidateSet:
    """Rewrite each candidate question into the query's surface form.

    Answers are never touched and the original question stays on the item.
    An empty rewrite keeps the original text and flags the item.
    """
    if candidates.stage == Stage.ALIGNED:
        raise SchemaError("candidate set is already aligned")
    templates = templates or PromptTemplates()

    def rewrite(item: CandidateItem) -> CandidateItem:
        prompt = render_structural_prompt(templates, query_text, item.sample.question)
        response = policy.complete(ChatRequest(parts=[TextPart(prompt)]))
        text = response.text.strip()
        if not text:
            logger.info("empty rewrite for %s; keeping original", item.sample.id)
            return replace(item, rewritten_question=item.sample.question, flagged=True)
        return replace(item, rewritten_question=text)

    with ThreadPoolExecutor(max_workers=max(1, max_concurrency)) as pool:
        rewritten = tuple(pool.map(rewrite, candidates.items))
    return CandidateSet(
        items=rewritten,
        stage=Stage.ALIGNED,
        initial_size=candidates.initial_size,
        filter_observed=candidates.filter_observed,
    )


@dataclass(frozen=True)
class NoiseReport:
    semantic_noise: float
    structural_noise: float
    effective_rate: float

    def __post_init__(self) -> None:
        for name in ("semantic_noise", "structural_noise", "effective_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SchemaError(f"{name} out of range: {v}")


def noise_report(
    candidates: CandidateSet,
    query: Query,
    style_of=None,
) -> NoiseReport:
    """Tag-based noise accounting for benchmark corpora.

    `style_of` classifies a question text into a style tag; without it a
    rewritten question cannot be scored, and untagged data cannot be scored
    at all.
    """
    if query.task_tag is None or query.style_tag is None:
        raise ReportUnavailable("query carries no ground-truth tags")
    n = len(candidates.items)
    if n == 0:
        rate = 0.0 if candidates.filter_observed and candidates.initial_size > 0 else 1.0
        return NoiseReport(semantic_noise=0.0, structural_noise=0.0, effective_rate=rate)

    off_task = 0
    off_style = 0
    for item in candidates.items:
        if item.sample.task_tag is None or item.sample.style_tag is None:
            raise ReportUnavailable(f"sample {item.sample.id} carries no ground-truth tags")
        if item.sample.task_tag != query.task_tag:
            off_task += 1
        if style_of is not None:
            style = style_of(item.effective_question())
        elif item.rewritten_question is None or item.rewritten_question == item.sample.question:
            style = item.sample.style_tag
        else:
            raise ReportUnavailable(
                f"sample {item.sample.id} was rewritten; a style classifier is required"
            )
        if style != query.style_tag:
            off_style += 1

    if candidates.filter_observed and candidates.initial_size > 0:
        rate = len(candidates.items) / candidates.initial_size
    else:
        rate = 1.0
    return NoiseReport(
        semantic_noise=off_task / n,
        structural_noise=off_style / n,
        effective_rate=rate,
    )
