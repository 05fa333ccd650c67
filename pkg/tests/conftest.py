from __future__ import annotations

import time

import pytest

from icx.core import Corpus, MediaRef, Sample

_SESSION_T0 = time.monotonic()
_SUITE_BUDGET_S = 300.0

# criterion number -> (passed, description, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def record_criterion(num: int, description: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[num] = (bool(passed), description, detail)


def _criterion_line(num: int) -> str:
    passed, description, detail = ACCEPTANCE[num]
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    return f"[{status}] criterion {num:2d}: {description}{suffix}"


def pytest_sessionfinish(session, exitstatus):
    if not ACCEPTANCE:
        return
    elapsed = time.monotonic() - _SESSION_T0
    within = elapsed < _SUITE_BUDGET_S
    record_criterion(
        13,
        "whole suite runs offline inside the time budget",
        within,
        f"{elapsed:.1f}s of {_SUITE_BUDGET_S:.0f}s",
    )
    if not within and session.exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(_criterion_line(num))


@pytest.fixture()
def image_factory(tmp_path):
    """Write throwaway image files and hand back MediaRefs."""
    counter = {"n": 0}

    def make(content: bytes | None = None) -> MediaRef:
        counter["n"] += 1
        p = tmp_path / f"img_{counter['n']:04d}.img"
        p.write_bytes(content if content is not None else f"pixels {counter['n']}".encode())
        return MediaRef("image", str(p))

    return make


@pytest.fixture()
def small_corpus(image_factory) -> Corpus:
    samples = [
        Sample(
            id=f"s{i:04d}",
            question=f"How many rivets does panel {i} hold?",
            answer=f"{i % 7}",
            image=image_factory(f"panel {i}".encode()),
            style_tag="interrogative",
            task_tag="counting" if i % 2 == 0 else "reading",
        )
        for i in range(6)
    ]
    return Corpus(samples=samples)


@pytest.fixture(scope="session")
def suite_clock():
    return time.monotonic()
