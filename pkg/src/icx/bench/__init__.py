"""Synthetic benchmark: corpus generation, oracle policies, and drivers."""

from .metrics import (
    AlignmentAnalysis,
    TrialMetrics,
    TrialRecord,
    aggregate,
    gain_percent,
    write_csv,
)
from .oracles import (
    FnPolicy,
    make_align_policy,
    make_downstream_policy,
    make_filter_policy,
    make_planner_policy,
)
from .run import (
    BenchmarkResult,
    Harness,
    ReplanningOutcome,
    SweepRow,
    alignment_similarity_analysis,
    alignment_study,
    replanning_fixture,
    run_benchmark,
    shot_sweep,
    tsr_probe,
    visual_discriminative_spec,
)
from .synth import (
    BenchMeta,
    BenchQuery,
    QuerySet,
    STYLE_FRAMES,
    SyntheticSpec,
    TOPIC_WORDS,
    generate_corpus,
)

__all__ = [
    "AlignmentAnalysis",
    "BenchMeta",
    "BenchQuery",
    "BenchmarkResult",
    "FnPolicy",
    "Harness",
    "QuerySet",
    "ReplanningOutcome",
    "STYLE_FRAMES",
    "SweepRow",
    "SyntheticSpec",
    "TOPIC_WORDS",
    "TrialMetrics",
    "TrialRecord",
    "aggregate",
    "alignment_similarity_analysis",
    "alignment_study",
    "gain_percent",
    "generate_corpus",
    "make_align_policy",
    "make_downstream_policy",
    "make_filter_policy",
    "make_planner_policy",
    "replanning_fixture",
    "run_benchmark",
    "shot_sweep",
    "tsr_probe",
    "visual_discriminative_spec",
    "write_csv",
]
