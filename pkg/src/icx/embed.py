"""Embedding backbones: zoo matching, delta detection, sample embedding.

Model choice is a pure fit rule (largest footprint inside the budget); a
policy model may propose a pair but the rule check is authoritative.  The
mock backend gives deterministic 64-dim vectors so everything downstream
can run without encoder weights.
"""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import requests

from .core import Corpus, Sample, content_hash, stable_hash
from .errors import EmbedError, FormatError, ResourceExhausted, SchemaError
from .policy import ChatRequest, ModelPolicy, TextPart
from .prompts import PromptTemplates

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HardwareStatus:
    free_gpu_gb: float
    free_disk_gb: float

    def __post_init__(self) -> None:
        if self.free_gpu_gb < 0 or self.free_disk_gb < 0:
            raise SchemaError("hardware figures must be >= 0")


class ModelKind(str, Enum):
    TEXT = "text"
    VISION = "vision"


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    kind: ModelKind
    disk_gb: float
    gpu_gb: float
    vector_dim: int = 64

    def __post_init__(self) -> None:
        if self.disk_gb <= 0 or self.gpu_gb <= 0:
            raise SchemaError(f"{self.model_id}: resource figures must be > 0")
        if self.vector_dim <= 0:
            raise SchemaError(f"{self.model_id}: vector dim must be positive")

    def footprint(self) -> float:
        return self.disk_gb + self.gpu_gb


@dataclass(frozen=True)
class ModelZoo:
    text_models: tuple[ModelSpec, ...]
    vision_models: tuple[ModelSpec, ...]

    def __post_init__(self) -> None:
        if not self.text_models or not self.vision_models:
            raise SchemaError("zoo families must be non-empty")
        ids = [m.model_id for m in self.text_models] + [
            m.model_id for m in self.vision_models
        ]
        # one id may appear in both families (dual-encoder), not twice in one
        if len(set(m.model_id for m in self.text_models)) != len(self.text_models):
            raise SchemaError("duplicate text model ids")
        if len(set(m.model_id for m in self.vision_models)) != len(self.vision_models):
            raise SchemaError("duplicate vision model ids")
        del ids

    def find(self, kind: ModelKind, model_id: str) -> ModelSpec | None:
        family = self.text_models if kind == ModelKind.TEXT else self.vision_models
        for m in family:
            if m.model_id == model_id:
                return m
        return None


def default_zoo() -> ModelZoo:
    return ModelZoo(
        text_models=(
            ModelSpec("Qwen/Qwen3-Embedding-8B", ModelKind.TEXT, 18, 32),
            ModelSpec("Qwen/Qwen3-Embedding-4B", ModelKind.TEXT, 9, 16),
            ModelSpec("Qwen/Qwen3-Embedding-0.6B", ModelKind.TEXT, 2, 8),
            ModelSpec("openai/clip-vit-large-patch14", ModelKind.TEXT, 2, 8),
        ),
        vision_models=(
            ModelSpec("Qwen/Qwen2.5-VL-3B-Instruct", ModelKind.VISION, 8, 4),
            ModelSpec("openai/clip-vit-large-patch14", ModelKind.VISION, 2, 8),
        ),
    )


class ResourcePreference(str, Enum):
    CONSERVATIVE = "conservative"
    BALANCED = "balanced"
    PERFORMANCE = "performance"

    @property
    def budget_fraction(self) -> float:
        return {"conservative": 0.5, "balanced": 0.75, "performance": 1.0}[self.value]


_FIT_SLACK = 1e-9  # forgive float dust when budgets are computed fractions


def _pick(
    family: tuple[ModelSpec, ...],
    hw: HardwareStatus,
    fraction: float,
    pinned_id: str | None,
    pinned_dim: int | None,
) -> ModelSpec:
    eligible = list(family)
    if pinned_id is not None:
        eligible = [m for m in eligible if m.model_id == pinned_id]
        if pinned_dim is not None:
            eligible = [m for m in eligible if m.vector_dim == pinned_dim]
        if not eligible:
            raise ResourceExhausted(
                f"no zoo model compatible with existing database backbone {pinned_id!r}"
            )
    budget_disk = fraction * hw.free_disk_gb
    budget_gpu = fraction * hw.free_gpu_gb
    fitting = [
        m
        for m in eligible
        if m.disk_gb <= budget_disk + _FIT_SLACK and m.gpu_gb <= budget_gpu + _FIT_SLACK
    ]
    if not fitting:
        smallest = min(eligible, key=lambda m: m.footprint())
        raise ResourceExhausted(
            f"no {smallest.kind.value} model fits: smallest ({smallest.model_id}) "
            f"needs {smallest.disk_gb} GB disk and {smallest.gpu_gb} GB GPU, "
            f"budget is {budget_disk:g} GB disk / {budget_gpu:g} GB GPU"
        )
    # stable sort: biggest footprint first, zoo order breaks ties
    return sorted(fitting, key=lambda m: -m.footprint())[0]


def match_embedding_models(
    zoo: ModelZoo,
    hw: HardwareStatus,
    pref: ResourcePreference,
    manifest=None,
) -> tuple[ModelSpec, ModelSpec]:
    """Largest-footprint text and vision models inside the budget.

    With an existing manifest only its pinned backbones are eligible, so a
    grown machine cannot silently mix vector spaces.
    """
    pinned_text = getattr(manifest, "text_backbone_id", None) if manifest else None
    pinned_vision = getattr(manifest, "vision_backbone_id", None) if manifest else None
    text_dim = getattr(manifest, "text_dim", None) if manifest else None
    vision_dim = getattr(manifest, "vision_dim", None) if manifest else None
    fraction = pref.budget_fraction
    text = _pick(zoo.text_models, hw, fraction, pinned_text, text_dim)
    vision = _pick(zoo.vision_models, hw, fraction, pinned_vision, vision_dim)
    return text, vision


_SELECTION_LINE = re.compile(
    r"^\s*Text Embedding:\s*(?P<text>[A-Za-z0-9_.\-/]+)\s*;\s*"
    r"Image Embedding:\s*(?P<image>[A-Za-z0-9_.\-/]+)\s*\.?\s*$"
)


def render_model_selection(text_model_id: str, image_model_id: str) -> str:
    return f"Text Embedding: {text_model_id}; Image Embedding: {image_model_id}"


def parse_model_selection(text: str) -> tuple[str, str]:
    """Parse the two-backbone selection line.

    The line must carry nothing but the selection itself; decoration such
    as markdown emphasis fails the parse on purpose.  When several lines
    match, the last one wins.
    """
    found: tuple[str, str] | None = None
    for line in text.splitlines():
        m = _SELECTION_LINE.match(line)
        if m:
            found = (m.group("text"), m.group("image"))
    if found is None:
        raise FormatError(f"no clean embedding selection line in {text!r}")
    return found


def render_embedding_selection_prompt(
    templates: PromptTemplates,
    zoo: ModelZoo,
    hw: HardwareStatus,
    pref: ResourcePreference,
) -> str:
    rows = []
    for m in zoo.text_models:
        rows.append(
            f"- {m.model_id} (text): needs {m.disk_gb:g} GB disk, {m.gpu_gb:g} GB GPU"
        )
    for m in zoo.vision_models:
        rows.append(
            f"- {m.model_id} (image): needs {m.disk_gb:g} GB disk, {m.gpu_gb:g} GB GPU"
        )
    return templates.embedding_selection.format(
        zoo_listing="\n".join(rows),
        free_gpu_gb=f"{hw.free_gpu_gb:g}",
        free_disk_gb=f"{hw.free_disk_gb:g}",
        preference=pref.value,
        budget_fraction=f"{pref.budget_fraction:g}",
    )


def select_models_via_policy(
    zoo: ModelZoo,
    hw: HardwareStatus,
    pref: ResourcePreference,
    policy: ModelPolicy,
    templates: PromptTemplates | None = None,
    manifest=None,
) -> tuple[ModelSpec, ModelSpec]:
    """Model-proposed backbone selection with the fit rule as referee.

    One re-prompt on a bad proposal, then the rule decides outright.
    """
    templates = templates or PromptTemplates()
    prompt = render_embedding_selection_prompt(templates, zoo, hw, pref)
    fraction = pref.budget_fraction
    for _ in range(2):
        response = policy.complete(ChatRequest(parts=[TextPart(prompt)]))
        try:
            text_id, vision_id = parse_model_selection(response.text)
        except FormatError as exc:
            logger.info("model selection rejected: %s", exc)
            continue
        text = zoo.find(ModelKind.TEXT, text_id)
        vision = zoo.find(ModelKind.VISION, vision_id)
        if text is None or vision is None:
            logger.info("model selection names unknown backbones: %s / %s", text_id, vision_id)
            continue
        fits = all(
            m.disk_gb <= fraction * hw.free_disk_gb + _FIT_SLACK
            and m.gpu_gb <= fraction * hw.free_gpu_gb + _FIT_SLACK
            for m in (text, vision)
        )
        if not fits:
            logger.info("model selection over budget: %s / %s", text_id, vision_id)
            continue
        return text, vision
    return match_embedding_models(zoo, hw, pref, manifest)


def detect_delta(corpus: Corpus, manifest_digests: dict[str, str]) -> list[Sample]:
    """Samples new to the manifest or with changed content, in corpus order."""
    delta = []
    for sample in corpus.samples:
        digest = content_hash(sample)
        if manifest_digests.get(sample.id) != digest:
            delta.append(sample)
    return delta


@dataclass
class EmbeddingSet:
    entries: dict[str, tuple[np.ndarray, np.ndarray]]
    backbone_ids: tuple[str, str]

    def __post_init__(self) -> None:
        dims_t = {v[0].shape for v in self.entries.values()}
        dims_v = {v[1].shape for v in self.entries.values()}
        if len(dims_t) > 1 or len(dims_v) > 1:
            raise SchemaError("mixed vector dimensions in embedding set")


def _l2(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float32)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise EmbedError("backend produced a zero vector")
    return (vec / norm).astype(np.float32)


# Mock geometry weights.  Topic carries almost all of the cosine mass so
# same-topic texts cluster; style is strong enough to measure but never
# outweighs topic; the residual keeps every distinct text distinct.
_TEXT_TOPIC_W = 0.9
_TEXT_STYLE_W = 0.25
_TEXT_RESID_W = float(np.sqrt(1.0 - _TEXT_TOPIC_W**2 - _TEXT_STYLE_W**2))
_VIS_TOPIC_W = 0.95
_VIS_RESID_W = float(np.sqrt(1.0 - _VIS_TOPIC_W**2))

_TOKEN_RE = re.compile(r"[a-z0-9_]+")
_STOPWORDS = frozenset(
    "a an the and or of in on at to for with is are was were does do did how many "
    "much what which this that these those there here it its by from as be been "
    "shown show me you your please".split()
)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def dominant_token(tokens: list[str]) -> str | None:
    """Most frequent non-stopword; earliest first occurrence breaks ties."""
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for i, tok in enumerate(tokens):
        if tok in _STOPWORDS:
            continue
        counts[tok] = counts.get(tok, 0) + 1
        first_seen.setdefault(tok, i)
    if not counts:
        return None
    return min(counts, key=lambda t: (-counts[t], first_seen[t]))


def style_signature(text: str) -> str:
    """Surface-form key: leading token plus terminal punctuation."""
    stripped = text.strip()
    tokens = tokenize(stripped)
    first = tokens[0] if tokens else ""
    last = stripped[-1] if stripped and not stripped[-1].isalnum() else ""
    return f"{first}|{last}"


class MockEmbeddingBackend:
    """Deterministic stand-in encoder.

    Each token family hashes to a column of a fixed random orthonormal
    basis; a text's vector mixes its dominant-topic anchor, its surface
    style anchor and a per-text residual.  Same-topic texts therefore land
    close together and rewriting a text into another style moves it by a
    predictable amount.
    """

    def __init__(
        self,
        text_model_id: str = "Qwen/Qwen3-Embedding-8B",
        vision_model_id: str = "Qwen/Qwen2.5-VL-3B-Instruct",
        dim: int = 64,
        seed: int = 0,
    ):
        self.text_model_id = text_model_id
        self.vision_model_id = vision_model_id
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((dim, dim))
        q, r = np.linalg.qr(raw)
        # sign convention keeps the basis unique across LAPACK builds
        q = q * np.sign(np.diag(r))
        self._basis = np.ascontiguousarray(q, dtype=np.float64)

    def anchor_column(self, namespace: str, key: str) -> int:
        return stable_hash(f"{namespace}:{key}", salt=f"anchor|{self.seed}") % self.dim

    def _anchor(self, namespace: str, key: str) -> np.ndarray:
        return self._basis[:, self.anchor_column(namespace, key)]

    def _residual(self, payload: str, salt: str, anchors: list[np.ndarray]) -> np.ndarray:
        rng = np.random.default_rng(stable_hash(payload, salt=salt) % (2**63))
        r = rng.standard_normal(self.dim)
        for a in anchors:
            r = r - float(r @ a) * a
        norm = float(np.linalg.norm(r))
        if norm < 1e-12:
            r = self._basis[:, 0]
            norm = 1.0
        return r / norm

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            tokens = tokenize(text)
            topic = dominant_token(tokens)
            anchors = []
            vec = np.zeros(self.dim, dtype=np.float64)
            if topic is not None:
                u = self._anchor("topic", topic)
                anchors.append(u)
                vec += _TEXT_TOPIC_W * u
            w = self._anchor("style", style_signature(text))
            anchors.append(w)
            vec += _TEXT_STYLE_W * w
            vec += _TEXT_RESID_W * self._residual(
                text, f"text-resid|{self.seed}|{self.text_model_id}", anchors
            )
            out[i] = _l2(vec)
        return out

    def embed_images(self, blobs: list[bytes]) -> np.ndarray:
        out = np.zeros((len(blobs), self.dim), dtype=np.float32)
        for i, blob in enumerate(blobs):
            payload = blob.decode("latin-1")
            tokens = tokenize(payload)
            topic = dominant_token(tokens)
            anchors = []
            vec = np.zeros(self.dim, dtype=np.float64)
            if topic is not None:
                u = self._anchor("vtopic", topic)
                anchors.append(u)
                vec += _VIS_TOPIC_W * u
            vec += _VIS_RESID_W * self._residual(
                payload, f"vis-resid|{self.seed}|{self.vision_model_id}", anchors
            )
            out[i] = _l2(vec)
        return out


class HttpEmbeddingBackend:
    """Remote encoder speaking the plain JSON batch contract."""

    def __init__(
        self,
        base_url: str,
        text_model_id: str,
        vision_model_id: str,
        timeout_s: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url
        self.text_model_id = text_model_id
        self.vision_model_id = vision_model_id
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def _post(self, model: str, inputs: list[str]) -> np.ndarray:
        try:
            resp = self._session.post(
                self.base_url,
                data=json.dumps({"model": model, "input": inputs}),
                headers={"Content-Type": "application/json"},
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise EmbedError(f"embedding endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise EmbedError(f"embedding endpoint returned HTTP {resp.status_code}")
        try:
            data = resp.json()["data"]
            vectors = [row["embedding"] for row in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise EmbedError(f"malformed embedding response: {exc}") from exc
        if len(vectors) != len(inputs):
            raise EmbedError(
                f"embedding count mismatch: sent {len(inputs)}, got {len(vectors)}"
            )
        return np.asarray(vectors, dtype=np.float32)

    def embed_texts(self, texts: list[str]) -> np.ndarray:
        return self._post(self.text_model_id, texts)

    def embed_images(self, blobs: list[bytes]) -> np.ndarray:
        import base64

        return self._post(
            self.vision_model_id,
            [base64.b64encode(b).decode("ascii") for b in blobs],
        )


def embed_samples(
    samples: list[Sample],
    backend,
    max_concurrency: int = 4,
    retries: int = 2,
    backoff_base_s: float = 0.25,
) -> EmbeddingSet:
    """Embed question text and image for each sample.

    Similarity inputs are question text only; answers never reach the
    encoder.  Per-sample work fans out up to the concurrency bound, each
    unit retries with exponential backoff, and nothing is returned unless
    every sample succeeded.
    """
    backbones = (backend.text_model_id, backend.vision_model_id)
    if not samples:
        return EmbeddingSet(entries={}, backbone_ids=backbones)

    def one(sample: Sample) -> tuple[str, np.ndarray, np.ndarray]:
        last: Exception | None = None
        for attempt in range(retries + 1):
            if attempt:
                time.sleep(backoff_base_s * (2 ** (attempt - 1)))
            try:
                tvec = backend.embed_texts([sample.question])[0]
                vvec = backend.embed_images([sample.image.read_bytes()])[0]
                return sample.id, _l2(tvec), _l2(vvec)
            except Exception as exc:  # noqa: BLE001 - retried, then surfaced
                last = exc
                logger.warning("embedding %s failed (attempt %d): %s", sample.id, attempt, exc)
        raise EmbedError(f"embedding failed for sample {sample.id}: {last}")

    failures: list[str] = []
    results: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    with ThreadPoolExecutor(max_workers=max(1, max_concurrency)) as pool:
        for outcome in pool.map(lambda s: _guard(one, s), samples):
            if isinstance(outcome, tuple):
                sid, t, v = outcome
                results[sid] = (t, v)
            else:
                failures.append(outcome)
    if failures:
        raise EmbedError(f"embedding failed for ids: {', '.join(sorted(failures))}")
    return EmbeddingSet(entries=results, backbone_ids=backbones)


def _guard(fn, sample: Sample):
    try:
        return fn(sample)
    except EmbedError:
        return sample.id
