"""Core value types: samples, corpora, queries, and content digests.

A corpus is an ordered collection of multimodal samples loaded from JSON
lines.  Sample identity for change detection is the content digest, which
covers the question, the answer, and the raw image bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import MediaReadError, SchemaError

_DIGEST_FIELD_SEP = b"\x00icx\x00"


def stable_hash(text: str, salt: str = "") -> int:
    """Platform-independent 64-bit hash of a string."""
    h = hashlib.sha256((salt + "|" + text).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")


@dataclass(frozen=True)
class MediaRef:
    """Reference to an on-disk media object."""

    kind: str  # only "image" for now
    path: str

    def __post_init__(self) -> None:
        if self.kind != "image":
            raise SchemaError(f"unsupported media kind {self.kind!r}")
        if not self.path:
            raise SchemaError("media path must be non-empty")

    def read_bytes(self) -> bytes:
        try:
            return Path(self.path).read_bytes()
        except OSError as exc:
            raise MediaReadError(self.path, str(exc)) from exc


@dataclass(frozen=True)
class Sample:
    """One corpus entry: a question/answer pair plus its image.

    style_tag and task_tag are benchmark ground truth; real corpora may
    leave them unset.
    """

    id: str
    question: str
    answer: str
    image: MediaRef
    style_tag: str | None = None
    task_tag: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise SchemaError("sample id must be non-empty")
        if not self.question:
            raise SchemaError(f"sample {self.id}: question must be non-empty")


@dataclass(frozen=True)
class Query:
    """The downstream request being contextualized.

    Tags mirror Sample's and exist only so benchmark harnesses can carry
    ground truth next to the query; production queries leave them unset.
    """

    text: str
    image: MediaRef | None = None
    task_tag: str | None = None
    style_tag: str | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise SchemaError("query text must be non-empty")


@dataclass(frozen=True)
class Timestep:
    value: int

    def __post_init__(self) -> None:
        if self.value < 0:
            raise SchemaError("timestep must be >= 0")

    def next(self) -> "Timestep":
        return Timestep(self.value + 1)


def content_hash(sample: Sample) -> str:
    """SHA-256 digest over question, answer, and image bytes.

    Fields are length-prefixed so no two distinct samples can collide by
    sliding bytes between fields.
    """
    h = hashlib.sha256()
    for part in (sample.question.encode("utf-8"), sample.answer.encode("utf-8")):
        h.update(len(part).to_bytes(8, "little"))
        h.update(part)
        h.update(_DIGEST_FIELD_SEP)
    img = sample.image.read_bytes()
    h.update(len(img).to_bytes(8, "little"))
    h.update(img)
    return h.hexdigest()


@dataclass
class Corpus:
    """Ordered sample collection with a monotonically increasing version."""

    samples: list[Sample] = field(default_factory=list)
    version: int = 0

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for s in self.samples:
            if s.id in seen:
                raise SchemaError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def get(self, sample_id: str) -> Sample | None:
        for s in self.samples:
            if s.id == sample_id:
                return s
        return None

    def add(self, sample: Sample) -> None:
        if self.get(sample.id) is not None:
            raise SchemaError(f"duplicate sample id {sample.id!r}")
        self.samples.append(sample)
        self.version += 1

    def replace_sample(self, sample: Sample) -> None:
        for i, s in enumerate(self.samples):
            if s.id == sample.id:
                self.samples[i] = sample
                self.version += 1
                return
        raise SchemaError(f"no sample with id {sample.id!r}")


_REQUIRED_KEYS = ("id", "question", "answer", "image_path")


def sample_from_row(row: dict, base_dir: Path | None = None) -> Sample:
    for key in _REQUIRED_KEYS:
        if key not in row:
            raise SchemaError(f"corpus row missing key {key!r}: {row}")
    image_path = str(row["image_path"])
    if base_dir is not None and not Path(image_path).is_absolute():
        image_path = str(base_dir / image_path)
    return Sample(
        id=str(row["id"]),
        question=str(row["question"]),
        answer=str(row["answer"]),
        image=MediaRef("image", image_path),
        style_tag=row.get("style_tag"),
        task_tag=row.get("task_tag"),
    )


def load_corpus_jsonl(path: str | Path) -> Corpus:
    """Read a UTF-8 JSON-lines corpus file.

    Relative image paths are resolved against the file's directory.
    """
    path = Path(path)
    samples: list[Sample] = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read corpus {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(row, dict):
            raise SchemaError(f"{path}:{lineno}: row must be an object")
        try:
            samples.append(sample_from_row(row, base_dir=path.parent))
        except SchemaError as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    return Corpus(samples=samples)


def save_corpus_jsonl(corpus: Corpus, path: str | Path, relative_to: Path | None = None) -> None:
    """Write the corpus back out as JSON lines (UTF-8, LF)."""
    path = Path(path)
    lines = []
    for s in corpus.samples:
        image_path = s.image.path
        if relative_to is not None:
            try:
                image_path = str(Path(image_path).relative_to(relative_to))
            except ValueError:
                pass
        row: dict = {
            "id": s.id,
            "question": s.question,
            "answer": s.answer,
            "image_path": image_path,
        }
        if s.style_tag is not None:
            row["style_tag"] = s.style_tag
        if s.task_tag is not None:
            row["task_tag"] = s.task_tag
        lines.append(json.dumps(row, ensure_ascii=False, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def with_tags(query: Query, task_tag: str | None, style_tag: str | None) -> Query:
    return replace(query, task_tag=task_tag, style_tag=style_tag)
