from __future__ import annotations

import json

import pytest

from icx.core import (
    Corpus,
    MediaRef,
    Query,
    Sample,
    Timestep,
    content_hash,
    load_corpus_jsonl,
    save_corpus_jsonl,
)
from icx.errors import MediaReadError, SchemaError

# Digest of the fixed fixture below, computed once and pinned.
PINNED_DIGEST = "0b17b9fe771b5ed05d327e1345a5dfad6f77b306eba553c50ac99c431014a411"


def fixture_sample(tmp_path, image_bytes=b"fixture-image-bytes-v1"):
    p = tmp_path / "fixture.img"
    p.write_bytes(image_bytes)
    return Sample(
        id="s0001",
        question="How many coils does the dynamo housing show?",
        answer="six",
        image=MediaRef("image", str(p)),
    )


def test_media_ref_rejects_bad_kind():
    with pytest.raises(SchemaError):
        MediaRef("audio", "x.wav")
    with pytest.raises(SchemaError):
        MediaRef("image", "")


def test_sample_requires_id_and_question(image_factory):
    with pytest.raises(SchemaError):
        Sample(id="", question="q", answer="a", image=image_factory())
    with pytest.raises(SchemaError):
        Sample(id="s1", question="", answer="a", image=image_factory())


def test_query_requires_text():
    with pytest.raises(SchemaError):
        Query(text="")


def test_timestep_non_negative():
    with pytest.raises(SchemaError):
        Timestep(-1)
    assert Timestep(0).next().value == 1


def test_content_hash_pinned(tmp_path):
    assert content_hash(fixture_sample(tmp_path)) == PINNED_DIGEST


def test_content_hash_covers_every_field(tmp_path):
    base = content_hash(fixture_sample(tmp_path))
    changed_q = fixture_sample(tmp_path)
    changed_q = Sample(
        id=changed_q.id,
        question=changed_q.question + "?",
        answer=changed_q.answer,
        image=changed_q.image,
    )
    assert content_hash(changed_q) != base
    changed_a = fixture_sample(tmp_path)
    changed_a = Sample(
        id=changed_a.id,
        question=changed_a.question,
        answer="seven",
        image=changed_a.image,
    )
    assert content_hash(changed_a) != base
    assert content_hash(fixture_sample(tmp_path, b"other-bytes")) != base


def test_content_hash_ignores_tags_and_id(tmp_path):
    # Identity for change detection is content, not labels.
    s = fixture_sample(tmp_path)
    relabeled = Sample(
        id="zzz",
        question=s.question,
        answer=s.answer,
        image=s.image,
        style_tag="imperative",
        task_tag="counting",
    )
    assert content_hash(relabeled) == content_hash(s)


def test_content_hash_missing_image(tmp_path):
    s = Sample(
        id="s1",
        question="q text",
        answer="a",
        image=MediaRef("image", str(tmp_path / "missing.img")),
    )
    with pytest.raises(MediaReadError) as exc:
        content_hash(s)
    assert "missing.img" in str(exc.value)


def test_corpus_rejects_duplicate_ids(image_factory):
    s1 = Sample(id="a", question="q", answer="x", image=image_factory())
    s2 = Sample(id="a", question="r", answer="y", image=image_factory())
    with pytest.raises(SchemaError):
        Corpus(samples=[s1, s2])
    c = Corpus(samples=[s1])
    with pytest.raises(SchemaError):
        c.add(s2)


def test_corpus_version_bumps(image_factory):
    c = Corpus()
    assert c.version == 0
    s = Sample(id="a", question="q", answer="x", image=image_factory())
    c.add(s)
    assert c.version == 1
    c.replace_sample(Sample(id="a", question="q2", answer="x", image=s.image))
    assert c.version == 2
    assert c.get("a").question == "q2"


def test_jsonl_round_trip(tmp_path, small_corpus):
    path = tmp_path / "corpus.jsonl"
    save_corpus_jsonl(small_corpus, path)
    loaded = load_corpus_jsonl(path)
    assert loaded.ids() == small_corpus.ids()
    for a, b in zip(loaded.samples, small_corpus.samples):
        assert (a.question, a.answer, a.style_tag, a.task_tag) == (
            b.question,
            b.answer,
            b.style_tag,
            b.task_tag,
        )
        assert content_hash(a) == content_hash(b)


def test_jsonl_missing_key_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    rows = [
        {"id": "a", "question": "q", "answer": "x", "image_path": "a.img"},
        {"id": "b", "question": "q2", "answer": "y"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
    with pytest.raises(SchemaError) as exc:
        load_corpus_jsonl(path)
    assert ":2:" in str(exc.value)
    assert "image_path" in str(exc.value)


def test_jsonl_invalid_json(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a"\nnot json', encoding="utf-8")
    with pytest.raises(SchemaError):
        load_corpus_jsonl(path)


def test_jsonl_relative_image_paths(tmp_path):
    (tmp_path / "imgs").mkdir()
    (tmp_path / "imgs" / "x.img").write_bytes(b"px")
    path = tmp_path / "corpus.jsonl"
    row = {"id": "a", "question": "q", "answer": "x", "image_path": "imgs/x.img"}
    path.write_text(json.dumps(row), encoding="utf-8")
    corpus = load_corpus_jsonl(path)
    assert corpus.samples[0].image.read_bytes() == b"px"
