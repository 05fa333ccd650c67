"""Flat-scan vector store with incremental upsert and checksummed persistence.

Records live in memory sorted by sample id, so a database grown through
any sequence of upserts serializes byte-for-byte identically to one built
from the final corpus in a single pass.  Search is exact cosine over unit
vectors (a dot product); no index structure.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .contextualize import CandidateSet, initial_candidates
from .core import MediaRef, Sample
from .errors import IntegrityError, LockError, SchemaError

FORMAT_VERSION = 1
_NORM_TOL = 1e-6

MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "records.jsonl"
TEXT_FILE = "text.f32"
VISION_FILE = "vision.f32"
CHECKSUMS_FILE = "checksums.txt"
_DATA_FILES = (MANIFEST_FILE, RECORDS_FILE, TEXT_FILE, VISION_FILE)


@dataclass(frozen=True)
class Record:
    sample: Sample
    text_vector: np.ndarray
    vision_vector: np.ndarray
    digest: str

    def __post_init__(self) -> None:
        for name in ("text_vector", "vision_vector"):
            vec = np.asarray(getattr(self, name), dtype=np.float32)
            object.__setattr__(self, name, vec)
            if vec.ndim != 1:
                raise SchemaError(f"{name} must be one-dimensional")
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > _NORM_TOL:
                raise SchemaError(
                    f"{name} of {self.sample.id} has norm {norm:.8f}, expected 1"
                )


@dataclass(frozen=True)
class DbManifest:
    text_backbone_id: str
    vision_backbone_id: str
    text_dim: int
    vision_dim: int
    digests: dict[str, str]
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.text_dim <= 0 or self.vision_dim <= 0:
            raise SchemaError("vector dims must be positive")

    @property
    def record_count(self) -> int:
        return len(self.digests)


class RetrievalMode(str, Enum):
    TEXTUAL = "textual"
    VISUAL = "visual"
    CASCADED_VISUAL_THEN_TEXT = "cascaded-visual-then-text"
    CASCADED_TEXT_THEN_VISUAL = "cascaded-text-then-visual"

    @property
    def cascaded(self) -> bool:
        return self in (
            RetrievalMode.CASCADED_VISUAL_THEN_TEXT,
            RetrievalMode.CASCADED_TEXT_THEN_VISUAL,
        )


class VectorDatabase:
    """In-memory snapshot of the store; mutation returns a new snapshot."""

    def __init__(
        self,
        text_backbone_id: str,
        vision_backbone_id: str,
        text_dim: int,
        vision_dim: int,
        records: dict[str, Record] | None = None,
    ):
        self.text_backbone_id = text_backbone_id
        self.vision_backbone_id = vision_backbone_id
        self.text_dim = text_dim
        self.vision_dim = vision_dim
        self._records: dict[str, Record] = dict(records or {})

    # --- views -------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._records

    def get(self, sample_id: str) -> Record | None:
        return self._records.get(sample_id)

    def records(self) -> list[Record]:
        """Records in canonical (ascending id) order."""
        return [self._records[i] for i in sorted(self._records)]

    def manifest(self) -> DbManifest:
        return DbManifest(
            text_backbone_id=self.text_backbone_id,
            vision_backbone_id=self.vision_backbone_id,
            text_dim=self.text_dim,
            vision_dim=self.vision_dim,
            digests={i: self._records[i].digest for i in sorted(self._records)},
        )

    def digests(self) -> dict[str, str]:
        return {i: r.digest for i, r in self._records.items()}

    # --- mutation ----------------------------------------------------------

    def upsert(self, records: list[Record]) -> "VectorDatabase":
        """New snapshot with `records` replacing matching ids, appending the rest."""
        for rec in records:
            if rec.text_vector.shape != (self.text_dim,):
                raise SchemaError(
                    f"text vector of {rec.sample.id} has dim {rec.text_vector.shape[0]}, "
                    f"store expects {self.text_dim}"
                )
            if rec.vision_vector.shape != (self.vision_dim,):
                raise SchemaError(
                    f"vision vector of {rec.sample.id} has dim {rec.vision_vector.shape[0]}, "
                    f"store expects {self.vision_dim}"
                )
        merged = dict(self._records)
        for rec in records:
            merged[rec.sample.id] = rec
        return VectorDatabase(
            self.text_backbone_id,
            self.vision_backbone_id,
            self.text_dim,
            self.vision_dim,
            merged,
        )

    # --- search ------------------------------------------------------------

    def _ranked(self, kind: str, query_vec: np.ndarray, k: int, pool: list[Record]) -> list[tuple[Record, float]]:
        if k <= 0 or not pool:
            return []
        matrix = np.stack([
            rec.text_vector if kind == "text" else rec.vision_vector for rec in pool
        ])
        scores = matrix @ np.asarray(query_vec, dtype=np.float32)
        order = sorted(range(len(pool)), key=lambda i: (-float(scores[i]), pool[i].sample.id))
        return [(pool[i], float(scores[i])) for i in order[: min(k, len(pool))]]

    def topk(
        self,
        text_query: np.ndarray | None,
        vision_query: np.ndarray | None,
        k: int,
        mode: RetrievalMode,
        overfetch_factor: int = 4,
    ) -> CandidateSet:
        """Exact top-k under the chosen mode; k larger than the store is clamped."""
        if k < 0:
            raise SchemaError("k must be >= 0")
        if overfetch_factor < 1:
            raise SchemaError("overfetch factor must be >= 1")
        everything = self.records()
        if mode == RetrievalMode.TEXTUAL:
            self._require(text_query, "textual")
            ranked = self._ranked("text", text_query, k, everything)
        elif mode == RetrievalMode.VISUAL:
            self._require(vision_query, "visual")
            ranked = self._ranked("vision", vision_query, k, everything)
        else:
            self._require(text_query, mode.value)
            self._require(vision_query, mode.value)
            if mode == RetrievalMode.CASCADED_VISUAL_THEN_TEXT:
                first_kind, first_vec, second_kind, second_vec = "vision", vision_query, "text", text_query
            else:
                first_kind, first_vec, second_kind, second_vec = "text", text_query, "vision", vision_query
            pool = [rec for rec, _ in self._ranked(first_kind, first_vec, overfetch_factor * k, everything)]
            ranked = self._ranked(second_kind, second_vec, k, pool)
        return initial_candidates([(rec.sample, score) for rec, score in ranked])

    @staticmethod
    def _require(vec: np.ndarray | None, mode: str) -> None:
        if vec is None:
            raise SchemaError(f"{mode} retrieval needs the corresponding query vector")


# --- serialization ---------------------------------------------------------


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _record_row(rec: Record) -> str:
    return _canonical_json(
        {
            "answer": rec.sample.answer,
            "id": rec.sample.id,
            "image_path": rec.sample.image.path,
            "question": rec.sample.question,
            "style_tag": rec.sample.style_tag,
            "task_tag": rec.sample.task_tag,
        }
    )


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _render_files(db: VectorDatabase) -> dict[str, bytes]:
    ordered = db.records()
    manifest = db.manifest()
    manifest_json = _canonical_json(
        {
            "digests": manifest.digests,
            "format_version": manifest.format_version,
            "record_count": manifest.record_count,
            "text_backbone_id": manifest.text_backbone_id,
            "text_dim": manifest.text_dim,
            "vision_backbone_id": manifest.vision_backbone_id,
            "vision_dim": manifest.vision_dim,
        }
    )
    rows = "".join(_record_row(rec) + "\n" for rec in ordered)
    text_blob = b"".join(
        struct.pack(f"<{db.text_dim}f", *rec.text_vector.tolist()) for rec in ordered
    )
    vision_blob = b"".join(
        struct.pack(f"<{db.vision_dim}f", *rec.vision_vector.tolist()) for rec in ordered
    )
    return {
        MANIFEST_FILE: manifest_json.encode("utf-8"),
        RECORDS_FILE: rows.encode("utf-8"),
        TEXT_FILE: text_blob,
        VISION_FILE: vision_blob,
    }


def _lock_path(path: str | Path) -> str:
    return str(Path(path)) + ".lock"


def persist(db: VectorDatabase, path: str | Path, lock_timeout_s: float = 10.0) -> None:
    """Atomically write the database directory, replacing any previous state.

    A sibling staging directory takes the files first, then swaps in; the
    exclusive writer lock lives next to the directory so readers always see
    a complete snapshot and a second writer fails fast.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    lock = FileLock(_lock_path(target))
    try:
        lock.acquire(timeout=lock_timeout_s)
    except Timeout as exc:
        raise LockError(f"another writer holds the lock for {target}") from exc
    try:
        files = _render_files(db)
        checksum_lines = "".join(
            f"{hashlib.sha256(files[name]).hexdigest()}  {name}\n" for name in _DATA_FILES
        )
        files[CHECKSUMS_FILE] = checksum_lines.encode("utf-8")
        staging = target.parent / (target.name + ".staging")
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir()
        for name, blob in files.items():
            (staging / name).write_bytes(blob)
        if target.exists():
            retired = target.parent / (target.name + ".old")
            if retired.exists():
                shutil.rmtree(retired)
            os.rename(target, retired)
            os.rename(staging, target)
            shutil.rmtree(retired)
        else:
            os.rename(staging, target)
    finally:
        lock.release()


def _read_file(root: Path, name: str) -> bytes:
    p = root / name
    if not p.exists():
        raise IntegrityError(name, 0, "file missing")
    return p.read_bytes()


def read_manifest(path: str | Path) -> DbManifest | None:
    """Manifest alone, without loading vectors; None when no database exists."""
    p = Path(path) / MANIFEST_FILE
    if not p.exists():
        return None
    try:
        obj = json.loads(p.read_bytes().decode("utf-8"))
        return DbManifest(
            text_backbone_id=obj["text_backbone_id"],
            vision_backbone_id=obj["vision_backbone_id"],
            text_dim=int(obj["text_dim"]),
            vision_dim=int(obj["vision_dim"]),
            digests=dict(obj["digests"]),
            format_version=int(obj["format_version"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(MANIFEST_FILE, 0, f"unreadable manifest: {exc}")


def load(path: str | Path) -> VectorDatabase:
    """Read and verify a database directory."""
    root = Path(path)
    if not root.is_dir():
        raise IntegrityError(str(path), 0, "not a database directory")

    checksums_raw = _read_file(root, CHECKSUMS_FILE).decode("utf-8")
    expected: dict[str, str] = {}
    for line in checksums_raw.splitlines():
        if not line.strip():
            continue
        try:
            digest, name = line.split()
        except ValueError:
            raise IntegrityError(CHECKSUMS_FILE, 0, f"malformed line {line!r}")
        expected[name] = digest
    blobs: dict[str, bytes] = {}
    for name in _DATA_FILES:
        blob = _read_file(root, name)
        blobs[name] = blob
        if name not in expected:
            raise IntegrityError(CHECKSUMS_FILE, 0, f"no checksum recorded for {name}")
        actual = hashlib.sha256(blob).hexdigest()
        if actual != expected[name]:
            raise IntegrityError(name, 0, "checksum mismatch")

    try:
        manifest_obj = json.loads(blobs[MANIFEST_FILE].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(MANIFEST_FILE, exc.pos, "invalid JSON")
    if manifest_obj.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(
            MANIFEST_FILE, 0, f"unsupported format version {manifest_obj.get('format_version')!r}"
        )
    try:
        text_dim = int(manifest_obj["text_dim"])
        vision_dim = int(manifest_obj["vision_dim"])
        digests = dict(manifest_obj["digests"])
        count = int(manifest_obj["record_count"])
        text_backbone = manifest_obj["text_backbone_id"]
        vision_backbone = manifest_obj["vision_backbone_id"]
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(MANIFEST_FILE, 0, f"missing or malformed field: {exc}")
    if count != len(digests):
        raise IntegrityError(MANIFEST_FILE, 0, "record_count disagrees with digest map")

    rows = blobs[RECORDS_FILE].decode("utf-8").splitlines()
    if len(rows) != count:
        raise IntegrityError(RECORDS_FILE, 0, f"expected {count} rows, found {len(rows)}")

    for name, dim in ((TEXT_FILE, text_dim), (VISION_FILE, vision_dim)):
        want = count * dim * 4
        have = len(blobs[name])
        if have != want:
            raise IntegrityError(name, min(have, want), f"expected {want} bytes, found {have}")

    text_matrix = np.frombuffer(blobs[TEXT_FILE], dtype="<f4").reshape(count, text_dim)
    vision_matrix = np.frombuffer(blobs[VISION_FILE], dtype="<f4").reshape(count, vision_dim)

    records: dict[str, Record] = {}
    previous_id = ""
    for i, row in enumerate(rows):
        try:
            obj = json.loads(row)
            sample = Sample(
                id=obj["id"],
                question=obj["question"],
                answer=obj["answer"],
                image=MediaRef("image", obj["image_path"]),
                style_tag=obj.get("style_tag"),
                task_tag=obj.get("task_tag"),
            )
        except (json.JSONDecodeError, KeyError, TypeError, SchemaError) as exc:
            raise IntegrityError(RECORDS_FILE, i, f"bad row {i}: {exc}")
        if sample.id <= previous_id:
            raise IntegrityError(RECORDS_FILE, i, "rows out of canonical id order")
        previous_id = sample.id
        if sample.id not in digests:
            raise IntegrityError(RECORDS_FILE, i, f"row {sample.id} absent from manifest")
        try:
            records[sample.id] = Record(
                sample=sample,
                text_vector=text_matrix[i].copy(),
                vision_vector=vision_matrix[i].copy(),
                digest=digests[sample.id],
            )
        except SchemaError as exc:
            raise IntegrityError(TEXT_FILE, i * text_dim * 4, str(exc))

    return VectorDatabase(
        text_backbone_id=text_backbone,
        vision_backbone_id=vision_backbone,
        text_dim=text_dim,
        vision_dim=vision_dim,
        records=records,
    )
