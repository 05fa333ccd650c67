"""Prompt templates and wire-format constants.

Every string a model is expected to echo back verbatim lives here as a
constant; parsers elsewhere import them instead of retyping literals.  The
template bodies are defaults and can be overridden wholesale from config,
as long as replacements keep the same format markers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# Verdict tokens for per-candidate semantic screening (upper case)...
AGENTIC_YES = "Judgement-YES"
AGENTIC_NO = "Judgement-NO"
# ...and for downstream feedback (mixed case).  The two families are
# distinct on purpose; parsers are case-sensitive.
FEEDBACK_YES = "Judgement-Yes"
FEEDBACK_NO = "Judgement-No"
FEEDBACK_PREFIX = "Feedback:"

TOOLCHAIN_MARKER = "Toolchain:"
FIRST_STEP_MARKER = "This is your first step."
MODEL_SELECTION_MARKER = "Text Embedding:"


EMBEDDING_SELECTION_TEMPLATE = """\
You pick one text embedding model and one image embedding model for a
retrieval database, staying inside the machine's free resources.

Candidate models:
{zoo_listing}

Machine state:
Free GPU memory: {free_gpu_gb} GB
Free disk: {free_disk_gb} GB
Preference: {preference} (usable budget fraction {budget_fraction})

Pick the largest models whose requirements fit within the usable budget.
Reply with exactly one line of the form:
Text Embedding: text_model_id; Image Embedding: visual_model_id
Do not generate any additional symbols (e.g., **).
"""


COHERENCE_TEMPLATE = """\
You screen retrieved reference material for a visual question answering
system.  Decide whether the reference below is about the same kind of
problem as the query and would help answer it.  Both images are attached.

Query question: {query_question}
Reference question: {reference_question}

Reply with {yes_token} if the reference is relevant and semantically
consistent with the query, otherwise reply with {no_token}.  You may add a
short reason after the verdict.
"""


STRUCTURAL_TEMPLATE = """\
Rewrite the reference question below so its phrasing and structure follow
the target question, without changing what the reference question asks
about.

Target question: {query_question}
Rewrite this question: {reference_question}

Output only the rewritten question and nothing else.
"""


ORCHESTRATION_TEMPLATE = """\
You drive a retrieval pipeline by choosing which operations to run, in
order.  An operation may only follow another when the grammar below has an
edge between them.

Available operations:
{tool_library}

Grammar edges (a -> b means b may follow a):
{tool_graph}

Earlier attempts and the feedback they earned:
{memory}

{step_note}Selection criteria:
1. On your first step the toolchain must include both
   textual_similarity_retrieval and visual_similarity_retrieval.
2. On later steps any grammar-valid toolchain is allowed.
3. Never select a toolchain you already used in an earlier attempt.
4. Once every toolchain has been used, ignore the rules above and pick a
   toolchain containing textual_similarity_retrieval,
   visual_similarity_retrieval and agentic_retrieval.
{extra_rules}
Think through the feedback first, then finish with exactly one line of the
form:
{toolchain_marker} tool_a -> tool_b -> tool_c.
The trailing period ends the toolchain and must not be omitted.
"""


ICL_REFERENCE_BLOCK = """\
Image {index}: [reference image {index} attached]
Question: {question}
Answer: {answer}
"""

ICL_QUERY_BLOCK = """\
Final Image: [query image attached]
Final Question: {question}
"""

ICL_HEADER = """\
Use the worked reference examples below to answer the final question about
the final image.
"""

FEEDBACK_REQUEST_TEMPLATE = """\
After your answer, judge the reference context you were given: it should be
relevant to the final question and hold roughly {shot_count} usable
examples.  If it measures up, add a line reading {yes_token}.  Otherwise
add a line reading {no_token}, then a line starting with "{feedback_prefix}"
explaining whether the mismatch arose from the text or the image of the
reference samples, or that the number of shots fell short.
"""


@dataclass
class PromptTemplates:
    """Template bundle; fields default to the compiled-in formats."""

    embedding_selection: str = EMBEDDING_SELECTION_TEMPLATE
    coherence: str = COHERENCE_TEMPLATE
    structural: str = STRUCTURAL_TEMPLATE
    orchestration: str = ORCHESTRATION_TEMPLATE
    icl_header: str = ICL_HEADER
    icl_reference_block: str = ICL_REFERENCE_BLOCK
    icl_query_block: str = ICL_QUERY_BLOCK
    feedback_request: str = FEEDBACK_REQUEST_TEMPLATE
    extra: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_config(cls, overrides: dict[str, str] | None) -> "PromptTemplates":
        t = cls()
        for key, value in (overrides or {}).items():
            if not hasattr(t, key) or key == "extra":
                t.extra[key] = value
            else:
                setattr(t, key, value)
        return t
