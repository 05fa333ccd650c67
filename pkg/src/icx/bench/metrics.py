"""Trial bookkeeping: per-query records, aggregate metrics, CDF export.

Aggregation is a pure function of the records, so metrics recomputed from
persisted trial logs match the live run exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import SchemaError

_GAIN_TOLERANCE = 1e-6


def gain_percent(baseline: float, icl: float) -> float:
    """Relative improvement of the in-context accuracy over the baseline."""
    if baseline > 0.0:
        return (icl - baseline) / baseline * 100.0
    return 0.0 if icl <= 0.0 else float("inf")


@dataclass(frozen=True)
class TrialMetrics:
    baseline_accuracy: float
    icl_accuracy: float
    icl_gain_percent: float
    semantic_noise_pre: float
    semantic_noise_post: float
    structural_noise_pre: float
    structural_noise_post: float
    effective_rate: float
    tsr_at_1: float
    tsr_at_5: float
    mean_timesteps: float

    def __post_init__(self) -> None:
        for name in (
            "baseline_accuracy",
            "icl_accuracy",
            "semantic_noise_pre",
            "semantic_noise_post",
            "structural_noise_pre",
            "structural_noise_post",
            "effective_rate",
            "tsr_at_1",
            "tsr_at_5",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SchemaError(f"{name} out of range: {v}")
        if self.mean_timesteps < 0.0:
            raise SchemaError(f"mean_timesteps out of range: {self.mean_timesteps}")
        if self.baseline_accuracy > 0.0:
            expected = gain_percent(self.baseline_accuracy, self.icl_accuracy)
            if abs(expected - self.icl_gain_percent) > _GAIN_TOLERANCE:
                raise SchemaError(
                    f"icl_gain_percent {self.icl_gain_percent} inconsistent with "
                    f"accuracies (expected {expected})"
                )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class TrialRecord:
    """One query's trip through the pipeline, plus its noise probe."""

    query_serial: str
    baseline_correct: bool
    icl_correct: bool
    timesteps: int
    converged: bool
    plan_events: int
    plan_first_valid: int
    plan_valid_within_5: int
    semantic_noise_pre: float
    semantic_noise_post: float
    structural_noise_pre: float
    structural_noise_post: float
    effective_rate: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def aggregate(records: list[TrialRecord]) -> TrialMetrics:
    if not records:
        raise SchemaError("cannot aggregate an empty trial")
    n = len(records)
    events = sum(r.plan_events for r in records)
    baseline = sum(r.baseline_correct for r in records) / n
    icl = sum(r.icl_correct for r in records) / n
    return TrialMetrics(
        baseline_accuracy=baseline,
        icl_accuracy=icl,
        icl_gain_percent=gain_percent(baseline, icl),
        semantic_noise_pre=sum(r.semantic_noise_pre for r in records) / n,
        semantic_noise_post=sum(r.semantic_noise_post for r in records) / n,
        structural_noise_pre=sum(r.structural_noise_pre for r in records) / n,
        structural_noise_post=sum(r.structural_noise_post for r in records) / n,
        effective_rate=sum(r.effective_rate for r in records) / n,
        tsr_at_1=(sum(r.plan_first_valid for r in records) / events) if events else 1.0,
        tsr_at_5=(sum(r.plan_valid_within_5 for r in records) / events) if events else 1.0,
        mean_timesteps=sum(r.timesteps for r in records) / n,
    )


@dataclass(frozen=True)
class AlignmentAnalysis:
    """Per-pair (original, aligned) query-similarities for context shots."""

    pairs: tuple[tuple[float, float], ...]

    def fraction_above_diagonal(self) -> float:
        if not self.pairs:
            raise SchemaError("no similarity pairs to analyze")
        return sum(1 for orig, aligned in self.pairs if aligned > orig) / len(self.pairs)

    def gains(self) -> list[float]:
        return sorted(aligned - orig for orig, aligned in self.pairs)

    def gain_cdf(self) -> list[tuple[float, float]]:
        gains = self.gains()
        n = len(gains)
        return [(g, (i + 1) / n) for i, g in enumerate(gains)]

    def write_cdf_csv(self, path: str | Path) -> None:
        write_csv(path, ["gain", "cumulative_fraction"], self.gain_cdf())


def write_csv(path: str | Path, header: list[str], rows) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
