"""Command-line surface: one thin driver per subsystem.

Exit codes: 0 success, 1 domain error, 2 usage error.  With --json every
command prints a single machine-readable object; errors go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import SyntheticSpec, TrialRecord, aggregate, run_benchmark
from .config import Config, load_config
from .contextualize import CandidateSet
from .core import MediaRef, Query, content_hash, load_corpus_jsonl
from .embed import (
    ResourcePreference,
    detect_delta,
    default_zoo,
    embed_samples,
    match_embedding_models,
)
from .errors import IcxError, SchemaError
from .icl import Placement
from .ogg import build_default_graph, enumerate_toolchains, format_arrows, parse_toolchain_text, validate_sequence
from .orchestrator import (
    Engine,
    EngineConfig,
    PolicyBundle,
    default_hardware_probe,
    mock_backend_factory,
)
from .policy import HttpPolicy, HttpPolicyConfig, ModelPolicy
from .vecdb import Record, RetrievalMode, VectorDatabase, load, persist, read_manifest


class _MissingPolicy:
    """Placeholder that fails loudly the moment an unconfigured role is used."""

    def __init__(self, role: str):
        self.role = role

    def complete(self, request):
        raise SchemaError(
            f"no endpoint configured for the {self.role!r} policy role"
        )


def _policies_from(config: Config) -> PolicyBundle:
    def policy(role: str) -> ModelPolicy:
        url = config.policy_endpoints.get(role)
        if url is None:
            return _MissingPolicy(role)
        return HttpPolicy(
            HttpPolicyConfig(
                base_url=url,
                model=config.policy_model,
                max_concurrency=config.max_concurrency,
            )
        )

    planner = config.policy_endpoints.get("planner")
    selector = config.policy_endpoints.get("selector")
    return PolicyBundle(
        downstream=policy("downstream"),
        filter=policy("filter"),
        align=policy("align"),
        planner=policy("planner") if planner else None,
        selector=policy("selector") if selector else None,
    )


def _engine_config(config: Config) -> EngineConfig:
    return EngineConfig(
        k=config.k,
        max_steps=config.max_steps,
        overfetch_factor=config.overfetch_factor,
        agentic_pool_factor=config.agentic_pool_factor,
        preference=ResourcePreference(config.resource_preference),
        planner_mode=config.planner_mode,
        placement=Placement.INTERLEAVED,
        max_concurrency=config.max_concurrency,
    )


def _config(args) -> Config:
    overrides = {
        "corpus_path": getattr(args, "corpus", None),
        "db_dir": getattr(args, "db", None),
        "k": getattr(args, "k", None),
        "max_steps": getattr(args, "max_steps", None),
        "retrieval_mode": getattr(args, "mode", None),
        "planner_mode": getattr(args, "planner_mode", None),
    }
    return load_config(args.config, overrides=overrides)


def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _corpus(config: Config):
    if config.corpus_path is None:
        raise SchemaError("no corpus configured; pass --corpus or set corpus_path")
    return load_corpus_jsonl(config.corpus_path)


def _backend_for(config: Config, manifest):
    hw = default_hardware_probe()
    specs = match_embedding_models(
        default_zoo(),
        hw,
        ResourcePreference(config.resource_preference),
        manifest=manifest,
    )
    return specs, mock_backend_factory(*specs)


def _load_query(path: str) -> Query:
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"query file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"query file is not valid JSON: {exc}")
    if not isinstance(obj, dict) or "text" not in obj:
        raise SchemaError('query file needs at least a "text" field')
    image = None
    if obj.get("image"):
        image_path = Path(obj["image"])
        if not image_path.is_absolute():
            image_path = p.parent / image_path
        image = MediaRef("image", str(image_path))
    return Query(
        text=str(obj["text"]),
        image=image,
        task_tag=obj.get("task_tag"),
        style_tag=obj.get("style_tag"),
    )


def _sync_impl(args, require_existing_db: bool) -> int:
    config = _config(args)
    corpus = _corpus(config)
    db_dir = Path(config.db_dir)
    manifest = read_manifest(db_dir)
    if require_existing_db and manifest is None:
        raise SchemaError(f"no database at {db_dir}; run ingest first")
    if not require_existing_db and len(corpus) == 0:
        raise SchemaError("refusing to ingest an empty corpus")

    delta = detect_delta(corpus, manifest.digests if manifest else {})
    specs, backend = _backend_for(config, manifest)
    text_spec, vision_spec = specs
    if delta:
        embeddings = embed_samples(delta, backend, max_concurrency=config.max_concurrency)
        by_id = {s.id: s for s in delta}
        records = [
            Record(
                sample=by_id[sid],
                text_vector=tvec,
                vision_vector=vvec,
                digest=content_hash(by_id[sid]),
            )
            for sid, (tvec, vvec) in sorted(embeddings.entries.items())
        ]
        base = (
            load(db_dir)
            if manifest is not None
            else VectorDatabase(
                text_backbone_id=text_spec.model_id,
                vision_backbone_id=vision_spec.model_id,
                text_dim=text_spec.vector_dim,
                vision_dim=vision_spec.vector_dim,
            )
        )
        db = base.upsert(records)
        persist(db, db_dir)
        total = len(db)
    else:
        total = len(load(db_dir)) if manifest is not None else 0

    payload = {
        "embedded": len(delta),
        "records": total,
        "db_dir": str(db_dir),
        "text_backbone": text_spec.model_id,
        "vision_backbone": vision_spec.model_id,
    }
    _emit(args, payload, [f"embedded {len(delta)} samples; database holds {total}"])
    return 0


def _cmd_ingest(args) -> int:
    return _sync_impl(args, require_existing_db=False)


def _cmd_sync(args) -> int:
    return _sync_impl(args, require_existing_db=True)


def _cmd_retrieve(args) -> int:
    config = _config(args)
    db_dir = Path(config.db_dir)
    manifest = read_manifest(db_dir)
    if manifest is None:
        raise SchemaError(f"no database at {db_dir}; run ingest first")
    db = load(db_dir)
    _, backend = _backend_for(config, manifest)
    query = _load_query(args.query_file)
    mode = RetrievalMode(config.retrieval_mode)
    text_vec = vision_vec = None
    if mode != RetrievalMode.VISUAL:
        text_vec = backend.embed_texts([query.text])[0]
    if mode != RetrievalMode.TEXTUAL:
        if query.image is None:
            raise SchemaError("the configured retrieval mode needs a query image")
        vision_vec = backend.embed_images([query.image.read_bytes()])[0]
    result: CandidateSet = db.topk(
        text_vec, vision_vec, config.k, mode, overfetch_factor=config.overfetch_factor
    )
    items = [
        {"id": item.sample.id, "score": item.score} for item in result.items
    ]
    payload = {"mode": mode.value, "k": config.k, "items": items}
    _emit(
        args,
        payload,
        [f"{row['id']}\t{row['score']:.6f}" for row in items] or ["(no results)"],
    )
    return 0


def _cmd_run(args) -> int:
    config = _config(args)
    corpus = _corpus(config)
    db_dir = Path(config.db_dir)
    if read_manifest(db_dir) is None:
        raise SchemaError(f"no database at {db_dir}; run ingest first")
    required = ["downstream", "filter", "align"]
    if config.planner_mode == "model":
        required.append("planner")
    missing = [r for r in required if r not in config.policy_endpoints]
    if missing:
        raise SchemaError(f"no endpoint configured for roles: {', '.join(missing)}")
    engine = Engine(
        corpus,
        db_dir,
        _policies_from(config),
        config=_engine_config(config),
    )
    query = _load_query(args.query_file)
    report = engine.run_episode(query)
    if args.trace:
        Path(args.trace).write_text(
            json.dumps(report.to_dict(), indent=2), encoding="utf-8"
        )
    payload = {
        "answer": report.final_answer,
        "converged": report.converged,
        "timesteps": len(report.timesteps),
        "chains": [list(t.chain) for t in report.timesteps],
    }
    lines = [
        f"answer: {report.final_answer}",
        f"converged: {report.converged} in {len(report.timesteps)} timestep(s)",
    ]
    _emit(args, payload, lines)
    return 0


def _cmd_bench(args) -> int:
    config = _config(args)
    spec_path = args.spec or config.bench_spec_path
    if spec_path is None:
        raise SchemaError("no benchmark spec; pass --spec or set bench_spec_path")
    p = Path(spec_path)
    if not p.exists():
        raise SchemaError(f"benchmark spec not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"benchmark spec is not valid JSON: {exc}")
    try:
        spec = SyntheticSpec(**data)
    except TypeError as exc:
        raise SchemaError(f"benchmark spec fields: {exc}")
    ablation = tuple(s for s in (args.ablate or "").split(",") if s)
    result = run_benchmark(
        spec,
        config=_engine_config(config),
        ablation=ablation,
        workdir=args.workdir,
        limit=args.queries,
    )
    if args.out:
        Path(args.out).write_text(
            json.dumps(result.to_dict(), indent=2), encoding="utf-8"
        )
    metrics = result.metrics.to_dict()
    lines = [f"{name}: {value:.4f}" for name, value in metrics.items()]
    if args.out:
        lines.append(f"wrote {args.out}")
    _emit(args, {"metrics": metrics, "queries": len(result.records)}, lines)
    return 0


def _chain_from_arg(text: str):
    body = text.strip()
    if "Toolchain:" not in body:
        body = f"Toolchain: {body}"
    if not body.rstrip().endswith("."):
        body = body.rstrip() + "."
    return parse_toolchain_text(body)


def _cmd_graph_validate(args) -> int:
    graph = build_default_graph()
    source = args.chain
    if args.chain_file:
        source = Path(args.chain_file).read_text(encoding="utf-8")
    if not source:
        raise SchemaError("pass --chain or --chain-file")
    chain = _chain_from_arg(source)
    verdict = validate_sequence(graph, chain)
    payload = {
        "valid": verdict.valid,
        "error_index": verdict.error_index,
        "reason": verdict.reason,
        "chain": [op.value for op in chain],
    }
    if verdict.valid:
        _emit(args, payload, ["valid"])
        return 0
    _emit(args, payload, [f"invalid at index {verdict.error_index}: {verdict.reason}"])
    return 1


def _ops_arg(raw: str | None):
    from .ogg import Op

    out = []
    for token in (raw or "").split(","):
        token = token.strip()
        if not token:
            continue
        try:
            out.append(Op(token))
        except ValueError:
            raise SchemaError(f"unknown operation {token!r}")
    return out


def _cmd_graph_enumerate(args) -> int:
    graph = build_default_graph()
    chains = enumerate_toolchains(graph, must_include=_ops_arg(args.include))
    rendered = [format_arrows(chain) for chain in chains]
    _emit(args, {"count": len(rendered), "chains": rendered}, rendered)
    return 0


def _cmd_report(args) -> int:
    p = Path(args.input)
    if not p.exists():
        raise SchemaError(f"report input not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"report input is not valid JSON: {exc}")

    if isinstance(data, dict) and "records" in data:
        try:
            records = [TrialRecord(**row) for row in data["records"]]
        except TypeError as exc:
            raise SchemaError(f"trial record fields: {exc}")
        metrics = aggregate(records)
        stored = data.get("metrics")
        consistent = stored is None or stored == metrics.to_dict()
        payload = {
            "metrics": metrics.to_dict(),
            "queries": len(records),
            "consistent": consistent,
        }
        lines = [f"{k}: {v:.4f}" for k, v in metrics.to_dict().items()]
        lines.append(f"consistent with stored metrics: {consistent}")
        _emit(args, payload, lines)
        return 0 if consistent else 1

    if isinstance(data, dict) and "timesteps" in data:
        steps = data["timesteps"]
        payload = {
            "final_answer": data.get("final_answer", ""),
            "converged": data.get("converged", False),
            "timesteps": len(steps),
            "judgements": [t.get("judgement") for t in steps],
            "hints": [t.get("hint") for t in steps],
            "chains": [t.get("chain") for t in steps],
        }
        lines = [
            f"final answer: {payload['final_answer']}",
            f"converged: {payload['converged']} in {payload['timesteps']} timestep(s)",
        ] + [
            f"  t{i}: {t.get('judgement')} hint={t.get('hint')}"
            for i, t in enumerate(steps)
        ]
        _emit(args, payload, lines)
        return 0

    raise SchemaError("report input is neither a trial log nor an episode trace")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icx",
        description="Agentic retrieval and contextualization engine.",
    )
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--config", help="TOML config file")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--corpus", help="JSONL corpus file")
        p.add_argument("--db", help="database directory")

    p = sub.add_parser("ingest", help="build the vector database from the corpus")
    common(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("sync", help="embed and upsert only changed samples")
    common(p)
    p.set_defaults(func=_cmd_sync)

    p = sub.add_parser("retrieve", help="top-k lookup against the database")
    common(p)
    p.add_argument("--query-file", required=True, help="JSON query document")
    p.add_argument("--k", type=int, help="number of results")
    p.add_argument("--mode", help="retrieval mode")
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("run", help="full episode: plan, execute, answer")
    common(p)
    p.add_argument("--query-file", required=True, help="JSON query document")
    p.add_argument("--k", type=int, help="shot count")
    p.add_argument("--max-steps", type=int, dest="max_steps", help="timestep budget")
    p.add_argument("--planner-mode", dest="planner_mode", help="rule or model")
    p.add_argument("--trace", help="write the episode trace JSON here")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("bench", help="synthetic benchmark trial")
    p.add_argument("--spec", help="JSON benchmark spec")
    p.add_argument("--ablate", help="comma-separated operations to forbid")
    p.add_argument("--out", help="write metrics and records JSON here")
    p.add_argument("--queries", type=int, help="limit the number of queries")
    p.add_argument("--workdir", help="working directory for corpus and database")
    p.add_argument("--k", type=int, help="shot count")
    p.add_argument("--max-steps", type=int, dest="max_steps", help="timestep budget")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("graph", help="grammar graph utilities")
    gsub = p.add_subparsers(dest="graph_command", required=True)
    v = gsub.add_parser("validate", help="check one toolchain")
    v.add_argument("--chain", help="arrow-separated operation names")
    v.add_argument("--chain-file", help="file holding the toolchain text")
    v.set_defaults(func=_cmd_graph_validate)
    e = gsub.add_parser("enumerate", help="list all valid toolchains")
    e.add_argument("--include", help="comma-separated operations each chain must contain")
    e.set_defaults(func=_cmd_graph_enumerate)

    p = sub.add_parser("report", help="recompute metrics from a saved log")
    p.add_argument("--in", dest="input", required=True, help="trial log or episode trace")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except IcxError as exc:
        message = f"error: {exc}"
        if getattr(args, "json", False):
            print(json.dumps({"error": str(exc)}), file=sys.stderr)
        else:
            print(message, file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
