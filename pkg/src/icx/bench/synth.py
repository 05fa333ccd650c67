"""Synthetic corpus generation with controlled noise.

Every sample is rendered from a style frame around a per-task topic token,
so the mock embedding geometry clusters tasks by construction.  Semantic
noise is injected as plants: samples whose surface text sits in one task's
neighborhood while their tags (and answers) belong to another task.
Structural noise is the fraction of samples phrased in a non-query style.
"""

from __future__ import annotations

import hashlib
import random
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from ..core import Corpus, MediaRef, Query, Sample, stable_hash
from ..errors import SchemaError

# Frames double the topic token so it dominates token frequency; first
# words and terminal punctuation are pairwise distinct, giving each style
# a unique surface signature.
STYLE_FRAMES: tuple[tuple[str, str], ...] = (
    ("interrogative", "How many {t} marks does the {t} assembly {serial} show?"),
    ("imperative", "Count the {t} marks on the {t} assembly {serial}."),
    ("declarative", "Report the {t} reading from the {t} assembly {serial}."),
    ("polar", "Is the {t} gauge level with the {t} frame {serial}?"),
    ("locative", "Where does the {t} rail meet the {t} housing {serial}?"),
    ("comparative", "Which side of the {t} deck holds more {t} marks, per {serial}?"),
)

TOPIC_WORDS: tuple[str, ...] = (
    "sprocket", "dynamo", "flange", "gasket", "piston", "rotor",
    "camshaft", "gimbal", "ratchet", "solenoid", "bushing", "manifold",
    "spindle", "bobbin", "pulley", "tappet", "louver", "grommet",
    "ferrule", "mandrel", "pawl", "detent", "collet", "reamer",
)

SHARED_TOPIC = "gear"

NOISE_MODALITIES = ("both", "text", "vision")
TEXT_TOPIC_MODES = ("by_task", "shared")

# Difficulty d is the number of clean same-task shots a query needs before
# the oracle downstream model answers it; d == 0 queries are innate.
_DIFFICULTY_BUCKETS = ((30, 0), (40, 1), (55, 2), (75, 4), (100, 8))


@dataclass(frozen=True)
class SyntheticSpec:
    task_count: int
    samples_per_task: int
    style_count: int
    semantic_noise_rate: float
    structural_mix: float
    vector_dim: int = 64
    seed: int = field(kw_only=True)
    query_count: int = field(default=100, kw_only=True)
    noise_modality: str = field(default="both", kw_only=True)
    text_topic_mode: str = field(default="by_task", kw_only=True)

    def __post_init__(self) -> None:
        if self.task_count < 1 or self.task_count > len(TOPIC_WORDS):
            raise SchemaError(f"task_count must be in 1..{len(TOPIC_WORDS)}")
        if self.samples_per_task < 1:
            raise SchemaError("samples_per_task must be >= 1")
        if self.style_count < 1 or self.style_count > len(STYLE_FRAMES):
            raise SchemaError(f"style_count must be in 1..{len(STYLE_FRAMES)}")
        if not 0.0 <= self.semantic_noise_rate <= 1.0:
            raise SchemaError("semantic_noise_rate must be in [0, 1]")
        if not 0.0 <= self.structural_mix <= 1.0:
            raise SchemaError("structural_mix must be in [0, 1]")
        if self.structural_mix > 0.0 and self.style_count < 2:
            raise SchemaError("structural_mix needs at least two styles")
        if self.semantic_noise_rate > 0.0 and self.task_count < 2:
            raise SchemaError("semantic noise needs at least two tasks")
        if self.vector_dim < 8:
            raise SchemaError("vector_dim must be >= 8")
        if self.query_count < 1:
            raise SchemaError("query_count must be >= 1")
        if self.noise_modality not in NOISE_MODALITIES:
            raise SchemaError(f"noise_modality must be one of {NOISE_MODALITIES}")
        if self.text_topic_mode not in TEXT_TOPIC_MODES:
            raise SchemaError(f"text_topic_mode must be one of {TEXT_TOPIC_MODES}")


@dataclass(frozen=True)
class BenchQuery:
    query: Query
    serial: str
    gold: str
    difficulty: int


@dataclass
class BenchMeta:
    """Generator-side ground truth, keyed by the serial token each question
    carries.  Oracle policies resolve identity through these tables; nothing
    else in the pipeline sees them."""

    spec: SyntheticSpec
    task_tags: dict[str, str] = field(default_factory=dict)
    style_tags: dict[str, str] = field(default_factory=dict)
    topics: dict[str, str] = field(default_factory=dict)
    plants: set[str] = field(default_factory=set)
    gold: dict[str, str] = field(default_factory=dict)
    difficulty: dict[str, int] = field(default_factory=dict)
    query_style: str = STYLE_FRAMES[0][0]
    modality_hint: str = "image"

    def frame_of(self, style_tag: str) -> str:
        for tag, frame in STYLE_FRAMES:
            if tag == style_tag:
                return frame
        raise SchemaError(f"unknown style tag {style_tag!r}")

    def style_from_text(self, question: str) -> str:
        """Classify a question's style by its leading word; unknown -> ''."""
        first = question.split(None, 1)[0].lower() if question.strip() else ""
        for tag, frame in STYLE_FRAMES:
            if frame.split(None, 1)[0].lower() == first:
                return tag
        return ""


@dataclass(frozen=True)
class QuerySet:
    queries: tuple[BenchQuery, ...]
    meta: BenchMeta

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def __getitem__(self, i: int) -> BenchQuery:
        return self.queries[i]


def apportion(total: int, shares: list[float]) -> list[int]:
    """Largest-remainder rounding of total into integer parts along shares."""
    if total < 0:
        raise SchemaError("cannot apportion a negative total")
    weight = sum(shares)
    if weight <= 0:
        raise SchemaError("shares must have positive mass")
    quotas = [total * s / weight for s in shares]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(shares)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def canonical_answer(seed: int, serial: str) -> str:
    digest = hashlib.sha256(f"answer|{seed}|{serial}".encode("utf-8")).hexdigest()
    return f"val-{digest[:8]}"


def difficulty_of(seed: int, serial: str) -> int:
    bucket = stable_hash(serial, salt=f"difficulty|{seed}") % 100
    for ceiling, d in _DIFFICULTY_BUCKETS:
        if bucket < ceiling:
            return d
    return _DIFFICULTY_BUCKETS[-1][1]


def _task_tag(t: int) -> str:
    return f"task-{t:02d}"


def _write_image(images_dir: Path, serial: str, payload: str) -> MediaRef:
    p = images_dir / f"{serial}.img"
    p.write_bytes(payload.encode("latin-1"))
    return MediaRef("image", str(p))


def generate_corpus(spec: SyntheticSpec, out_dir: str | Path | None = None) -> tuple[Corpus, QuerySet]:
    """Build the tagged corpus and its gold-labeled query set.

    Image files land under out_dir/images (a fresh temp dir when out_dir is
    None).  Identical specs produce identical corpora up to the directory
    the image files live in.
    """
    root = Path(out_dir) if out_dir is not None else Path(tempfile.mkdtemp(prefix="icx-bench-"))
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    rng = random.Random(spec.seed)
    frames = STYLE_FRAMES[: spec.style_count]
    meta = BenchMeta(spec=spec, query_style=frames[0][0], modality_hint=_modality_hint(spec))

    style_shares = [1.0 - spec.structural_mix] + [
        spec.structural_mix / (spec.style_count - 1)
    ] * (spec.style_count - 1) if spec.style_count > 1 else [1.0]

    samples: list[Sample] = []
    counter = 0
    for t in range(spec.task_count):
        text_topic = SHARED_TOPIC if spec.text_topic_mode == "shared" else TOPIC_WORDS[t]
        vision_topic = TOPIC_WORDS[t]
        cell_sizes = apportion(spec.samples_per_task, style_shares)
        plant_total = apportion(
            spec.samples_per_task, [spec.semantic_noise_rate, 1.0 - spec.semantic_noise_rate]
        )[0] if spec.semantic_noise_rate > 0 else 0
        plant_cells = apportion(plant_total, [n or 0.0 for n in cell_sizes]) if plant_total else [
            0
        ] * len(cell_sizes)

        for s, cell_n in enumerate(cell_sizes):
            if plant_cells[s] > cell_n:
                raise SchemaError("noise rate unachievable for this cell geometry")
            plant_at = set(rng.sample(range(cell_n), plant_cells[s])) if plant_cells[s] else set()
            style_tag, frame = frames[s]
            for j in range(cell_n):
                serial = f"c{counter:05d}"
                counter += 1
                if j in plant_at:
                    foreign = rng.randrange(spec.task_count - 1)
                    true_task = foreign if foreign < t else foreign + 1
                    text_word = text_topic
                    vision_word = vision_topic
                    if spec.noise_modality == "text":
                        vision_word = TOPIC_WORDS[true_task]
                    elif spec.noise_modality == "vision":
                        text_word = (
                            SHARED_TOPIC
                            if spec.text_topic_mode == "shared"
                            else TOPIC_WORDS[true_task]
                        )
                    tag = _task_tag(true_task)
                    meta.plants.add(serial)
                else:
                    text_word = text_topic
                    vision_word = vision_topic
                    tag = _task_tag(t)
                question = frame.format(t=text_word, serial=serial)
                image = _write_image(images_dir, serial, f"{vision_word} {vision_word} plate {serial}")
                samples.append(
                    Sample(
                        id=serial,
                        question=question,
                        answer=canonical_answer(spec.seed, serial),
                        image=image,
                        style_tag=style_tag,
                        task_tag=tag,
                    )
                )
                meta.task_tags[serial] = tag
                meta.style_tags[serial] = style_tag
                meta.topics[serial] = text_word

    queries: list[BenchQuery] = []
    query_frame = frames[0][1]
    for i in range(spec.query_count):
        t = i % spec.task_count
        serial = f"q{i:05d}"
        text_topic = SHARED_TOPIC if spec.text_topic_mode == "shared" else TOPIC_WORDS[t]
        question = query_frame.format(t=text_topic, serial=serial)
        image = _write_image(
            images_dir, serial, f"{TOPIC_WORDS[t]} {TOPIC_WORDS[t]} plate {serial}"
        )
        gold = canonical_answer(spec.seed, serial)
        d = difficulty_of(spec.seed, serial)
        meta.task_tags[serial] = _task_tag(t)
        meta.style_tags[serial] = meta.query_style
        meta.topics[serial] = text_topic
        meta.gold[serial] = gold
        meta.difficulty[serial] = d
        queries.append(
            BenchQuery(
                query=Query(
                    text=question,
                    image=image,
                    task_tag=_task_tag(t),
                    style_tag=meta.query_style,
                ),
                serial=serial,
                gold=gold,
                difficulty=d,
            )
        )

    return Corpus(samples=samples), QuerySet(queries=tuple(queries), meta=meta)


def _modality_hint(spec: SyntheticSpec) -> str:
    """Which modality the downstream oracle blames for off-task context.

    Vision stays task-discriminative unless plants collide there; text stops
    being discriminative under a shared topic or text-colliding plants.
    """
    if spec.noise_modality == "vision" and spec.text_topic_mode == "by_task":
        return "text"
    return "image"
