"""Operational grammar graph over the retrieval tool library.

The graph fixes which operation may follow which; a toolchain is any simple
start->end path.  Text in and out of planning models uses the arrow wire
format ("Toolchain: a -> b -> c.") parsed and rendered here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterable

from .errors import FormatError, UnknownOperationError


class Op(str, Enum):
    START = "start"
    GET_QUERY = "get_query"
    GET_HARDWARE_STATUS = "get_hardware_status"
    CHECK_UPDATING = "check_updating"
    MATCHING_EMBEDDING_MODELS = "matching_embedding_models"
    MULTIMODAL_EMBEDDING = "multimodal_embedding"
    LOAD_VECTOR_DATABASE = "load_vector_database"
    TEXTUAL_SIMILARITY_RETRIEVAL = "textual_similarity_retrieval"
    VISUAL_SIMILARITY_RETRIEVAL = "visual_similarity_retrieval"
    AGENTIC_RETRIEVAL = "agentic_retrieval"
    STRUCTURAL_ALIGNMENT = "structural_alignment"
    END = "end"

    def __str__(self) -> str:  # keep f-strings printing the bare name
        return self.value


OperationSequence = tuple[Op, ...]

_BY_NAME = {op.value: op for op in Op}

RETRIEVAL_OPS = (Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.VISUAL_SIMILARITY_RETRIEVAL)
DENOISING_OPS = (Op.AGENTIC_RETRIEVAL, Op.STRUCTURAL_ALIGNMENT)

# Adjacency of the default operation grammar: 12 nodes, 23 directed edges.
DEFAULT_EDGES: tuple[tuple[Op, Op], ...] = (
    (Op.START, Op.GET_QUERY),
    (Op.GET_QUERY, Op.GET_HARDWARE_STATUS),
    (Op.GET_QUERY, Op.CHECK_UPDATING),
    (Op.GET_QUERY, Op.LOAD_VECTOR_DATABASE),
    (Op.CHECK_UPDATING, Op.GET_HARDWARE_STATUS),
    (Op.CHECK_UPDATING, Op.MULTIMODAL_EMBEDDING),
    (Op.CHECK_UPDATING, Op.LOAD_VECTOR_DATABASE),
    (Op.GET_HARDWARE_STATUS, Op.MATCHING_EMBEDDING_MODELS),
    (Op.MATCHING_EMBEDDING_MODELS, Op.MULTIMODAL_EMBEDDING),
    (Op.MULTIMODAL_EMBEDDING, Op.LOAD_VECTOR_DATABASE),
    (Op.LOAD_VECTOR_DATABASE, Op.TEXTUAL_SIMILARITY_RETRIEVAL),
    (Op.LOAD_VECTOR_DATABASE, Op.VISUAL_SIMILARITY_RETRIEVAL),
    (Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.VISUAL_SIMILARITY_RETRIEVAL),
    (Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.AGENTIC_RETRIEVAL),
    (Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.STRUCTURAL_ALIGNMENT),
    (Op.TEXTUAL_SIMILARITY_RETRIEVAL, Op.END),
    (Op.VISUAL_SIMILARITY_RETRIEVAL, Op.TEXTUAL_SIMILARITY_RETRIEVAL),
    (Op.VISUAL_SIMILARITY_RETRIEVAL, Op.AGENTIC_RETRIEVAL),
    (Op.VISUAL_SIMILARITY_RETRIEVAL, Op.STRUCTURAL_ALIGNMENT),
    (Op.VISUAL_SIMILARITY_RETRIEVAL, Op.END),
    (Op.AGENTIC_RETRIEVAL, Op.STRUCTURAL_ALIGNMENT),
    (Op.AGENTIC_RETRIEVAL, Op.END),
    (Op.STRUCTURAL_ALIGNMENT, Op.END),
)


@dataclass(frozen=True)
class GrammarGraph:
    nodes: frozenset[Op]
    edges: frozenset[tuple[Op, Op]]

    def __post_init__(self) -> None:
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"edge ({a}, {b}) references unknown node")

    def successors(self, op: Op) -> tuple[Op, ...]:
        return tuple(sorted((b for a, b in self.edges if a == op), key=lambda o: o.value))

    def has_edge(self, a: Op, b: Op) -> bool:
        return (a, b) in self.edges


@lru_cache(maxsize=1)
def build_default_graph() -> GrammarGraph:
    return GrammarGraph(nodes=frozenset(Op), edges=frozenset(DEFAULT_EDGES))


@dataclass(frozen=True)
class ValidationResult:
    valid: bool
    # Index of the first bad transition (pair seq[i] -> seq[i+1]); None when
    # the failure is an endpoint problem rather than a transition.
    error_index: int | None = None
    reason: str | None = None


def validate_sequence(graph: GrammarGraph, seq: OperationSequence) -> ValidationResult:
    """Check that seq is a simple start->end path through graph.

    Never raises; any malformed input comes back as an invalid result.
    """
    if not seq:
        return ValidationResult(False, None, "empty sequence")
    if seq[0] != Op.START:
        return ValidationResult(False, None, f"must begin with {Op.START}, got {seq[0]}")
    seen = {seq[0]}
    for i in range(len(seq) - 1):
        a, b = seq[i], seq[i + 1]
        if not graph.has_edge(a, b):
            return ValidationResult(False, i, f"no edge {a} -> {b}")
        if b in seen:
            return ValidationResult(False, i, f"operation {b} revisited")
        seen.add(b)
    if seq[-1] != Op.END:
        return ValidationResult(False, None, f"must finish with {Op.END}, got {seq[-1]}")
    return ValidationResult(True)


def enumerate_toolchains(
    graph: GrammarGraph, must_include: Iterable[Op] = ()
) -> list[OperationSequence]:
    """All simple start->end paths containing every op in must_include.

    Sorted lexicographically by operation-name sequence; this ordering is the
    canonical one everywhere (planner tie-breaks, CLI output).
    """
    required = frozenset(must_include)
    found: list[OperationSequence] = []
    path: list[Op] = [Op.START]
    on_path = {Op.START}

    def walk() -> None:
        node = path[-1]
        if node == Op.END:
            if required <= on_path:
                found.append(tuple(path))
            return
        for succ in graph.successors(node):
            if succ in on_path:
                continue
            path.append(succ)
            on_path.add(succ)
            walk()
            on_path.discard(succ)
            path.pop()

    walk()
    found.sort(key=lambda s: tuple(op.value for op in s))
    return found


_TOOLCHAIN_LINE = re.compile(r"Toolchain\s*:\s*(.*)$")


def _parse_arrow_body(body: str) -> OperationSequence:
    tokens = [t.strip() for t in body.split("->")]
    if any(not t for t in tokens):
        raise FormatError(f"empty operation name in toolchain {body!r}")
    ops: list[Op] = []
    for tok in tokens:
        if tok not in _BY_NAME:
            raise UnknownOperationError(tok)
        ops.append(_BY_NAME[tok])
    if ops[0] != Op.START:
        ops.insert(0, Op.START)
    return tuple(ops)


def parse_toolchain_text(text: str) -> OperationSequence:
    """Extract the toolchain from model output.

    The last line carrying a "Toolchain:" marker wins; its body must end with
    a period and holds arrow-separated operation names.  A missing leading
    "start" is implied.
    """
    match = None
    for line in text.splitlines():
        m = _TOOLCHAIN_LINE.search(line)
        if m:
            match = m
    if match is None:
        raise FormatError("no 'Toolchain:' line in model output")
    body = match.group(1).strip()
    if not body.endswith("."):
        raise FormatError(f"toolchain line lacks terminating period: {body!r}")
    body = body[:-1].strip()
    if not body:
        raise FormatError("toolchain line names no operations")
    return _parse_arrow_body(body)


def parse_arrow_chain(chain: str) -> OperationSequence:
    """Parse a bare arrow chain ("a -> b -> c"), tolerant of a trailing period."""
    body = chain.strip()
    if body.endswith("."):
        body = body[:-1].strip()
    if not body:
        raise FormatError("empty toolchain")
    return _parse_arrow_body(body)


def format_arrows(seq: OperationSequence, include_start: bool = True) -> str:
    ops = list(seq)
    if not include_start and ops and ops[0] == Op.START:
        ops = ops[1:]
    return " -> ".join(op.value for op in ops)


def render_toolchain_line(seq: OperationSequence) -> str:
    """Inverse of parse_toolchain_text for sequences beginning with start."""
    if not seq:
        raise FormatError("cannot render an empty sequence")
    return f"Toolchain: {format_arrows(seq, include_start=False)}."
