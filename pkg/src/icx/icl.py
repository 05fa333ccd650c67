"""In-context prompt assembly and the downstream call.

The context set becomes numbered reference blocks followed by the query
block and a feedback request.  The downstream reply is split at the first
judgement token: everything before it is the answer, everything from it on
is the feedback record.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum

from .contextualize import CandidateSet
from .core import Query
from .errors import IclError
from .planner import FeedbackRecord, Judgement, MismatchHint, parse_feedback
from .policy import ChatRequest, ImagePart, ModelPolicy, TextPart
from .prompts import FEEDBACK_NO, FEEDBACK_PREFIX, FEEDBACK_YES, PromptTemplates

DEFAULT_SHOT_COUNT = 8


class Placement(str, Enum):
    UPFRONT = "upfront"
    INTERLEAVED = "interleaved"


@dataclass(frozen=True)
class RenderedPrompt:
    parts: tuple
    shot_count: int

    def text(self) -> str:
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))

    def image_count(self) -> int:
        return sum(1 for p in self.parts if isinstance(p, ImagePart))


def assemble_icl_prompt(
    context: CandidateSet,
    query: Query,
    k: int = DEFAULT_SHOT_COUNT,
    placement: Placement = Placement.INTERLEAVED,
    templates: PromptTemplates | None = None,
) -> RenderedPrompt:
    """Render the reference blocks, the query block, and the feedback request.

    Rewritten questions take the place of originals.  With k = 0 the prompt
    is the zero-shot query plus the feedback request.  Upfront placement
    puts every image attachment ahead of the text; interleaved placement
    keeps each image adjacent to its block.
    """
    templates = templates or PromptTemplates()
    items = list(context.items[: max(k, 0)])

    blocks: list[str] = []
    images: list = []
    for index, item in enumerate(items, start=1):
        blocks.append(
            templates.icl_reference_block.format(
                index=index,
                question=item.effective_question(),
                answer=item.sample.answer,
            )
        )
        images.append(item.sample.image)

    query_text = templates.icl_query_block.format(question=query.text)
    feedback_text = templates.feedback_request.format(
        shot_count=k,
        yes_token=FEEDBACK_YES,
        no_token=FEEDBACK_NO,
        feedback_prefix=FEEDBACK_PREFIX,
    )

    parts: list = []
    if placement == Placement.UPFRONT:
        parts.extend(ImagePart(img) for img in images)
        if query.image is not None:
            parts.append(ImagePart(query.image))
        text = ""
        if items:
            text += templates.icl_header + "\n"
        text += "".join(blocks)
        text += query_text
        text += "\n" + feedback_text
        parts.append(TextPart(text))
    else:
        if items:
            parts.append(TextPart(templates.icl_header + "\n"))
        for img, block in zip(images, blocks):
            parts.append(ImagePart(img))
            parts.append(TextPart(block))
        if query.image is not None:
            parts.append(ImagePart(query.image))
        parts.append(TextPart(query_text + "\n" + feedback_text))

    return RenderedPrompt(parts=tuple(parts), shot_count=k)


@dataclass(frozen=True)
class IclOutcome:
    answer: str
    feedback: FeedbackRecord
    raw: str
    token_count: int
    latency_ms: float
    flagged: bool = False


def split_icl_output(raw: str) -> tuple[str, FeedbackRecord, bool]:
    """(answer, feedback, flagged); the first judgement token is the seam."""
    positions = [p for p in (raw.find(FEEDBACK_YES), raw.find(FEEDBACK_NO)) if p >= 0]
    if not positions:
        return raw.strip(), FeedbackRecord(Judgement.NO, MismatchHint.NONE, raw), True
    seam = min(positions)
    answer = raw[:seam].strip()
    feedback = parse_feedback(raw[seam:])
    return answer, feedback, False


def run_icl(model: ModelPolicy, prompt: RenderedPrompt) -> IclOutcome:
    """One downstream call; transport failures surface as IclError."""
    request = ChatRequest(parts=list(prompt.parts))
    started = time.perf_counter()
    try:
        response = model.complete(request)
    except IclError:
        raise
    except Exception as exc:  # noqa: BLE001 - transport layer already retried
        raise IclError(f"downstream model failed: {exc}") from exc
    latency_ms = (time.perf_counter() - started) * 1000.0
    answer, feedback, flagged = split_icl_output(response.text)
    return IclOutcome(
        answer=answer,
        feedback=feedback,
        raw=response.text,
        token_count=response.total_tokens,
        latency_ms=latency_ms,
        flagged=flagged,
    )
