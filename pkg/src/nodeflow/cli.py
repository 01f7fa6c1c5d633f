"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (invalid workflow, failed episode),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .agent import AgentConfig, run_episode
from .bench import STRATEGIES, BenchConfig, TaskError, aggregate, filter_tasks, load_tasks, read_run_log, run_strategy
from .codec import CodeError, EmitError, LowerError, code_to_graph, emit_code
from .config import ConfigError, RunConfig, load_config
from .dryrun import DryRunProvider
from .execute import LiveExecutor, SimulatedExecutor
from .graph import GraphError, graph_to_dict, parse_prompt_json, serialize_prompt_json, validate
from .knowledge import CorpusError, EmbeddingCache, HashEmbedder, HttpEmbedder, ingest_corpus
from .llm import HttpChatProvider, LLMClient, RecordingProvider, ReplayProvider, Transcript
from .registry import SchemaError, ingest_docs

log = logging.getLogger("nodeflow")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc


def _registry(path: str):
    if not Path(path).is_dir():
        raise UsageError(f"registry directory not found: {path}")
    try:
        return ingest_docs(path)
    except SchemaError as exc:
        raise UsageError(f"bad registry: {exc}") from exc


def _config(args: argparse.Namespace, **flags) -> RunConfig:
    return load_config(args.config, overrides={k: v for k, v in flags.items()})


# -- convert / validate / registry-dump -------------------------------------


def cmd_convert(args: argparse.Namespace) -> int:
    cfg = _config(args, registry=args.registry)
    registry = _registry(cfg.registry)
    direction = args.direction or ("json-to-code" if args.input.endswith(".json") else "code-to-json")
    text = _read(args.input)
    if direction == "json-to-code":
        try:
            graph = parse_prompt_json(text)
        except GraphError as exc:
            print(f"{args.input}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        try:
            out = emit_code(graph, registry) + "\n"
        except EmitError as exc:
            print(f"{args.input}: {exc}", file=sys.stderr)
            return EXIT_FAILURE
    else:
        try:
            graph = code_to_graph(text, registry)
        except LowerError as exc:
            print(f"{args.input}: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        except (CodeError, GraphError) as exc:
            print(f"{args.input}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        report = validate(graph, registry)
        if not report.ok:
            print(report.render(), file=sys.stderr)
            return EXIT_FAILURE
        out = serialize_prompt_json(graph, indent=2).decode() + "\n"
    if args.output:
        Path(args.output).write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = _config(args, registry=args.registry)
    registry = _registry(cfg.registry)
    text = _read(args.workflow)
    try:
        if args.workflow.endswith(".py"):
            graph = code_to_graph(text, registry)
        else:
            graph = parse_prompt_json(text, check_acyclic=False)
    except (CodeError, GraphError) as exc:
        print(f"{args.workflow}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = validate(graph, registry)
    print(report.render())
    return EXIT_OK if report.ok else EXIT_FAILURE


def cmd_registry_dump(args: argparse.Namespace) -> int:
    cfg = _config(args, registry=args.registry)
    registry = _registry(cfg.registry)
    for line in registry.dump():
        print(line)
    return EXIT_OK


# -- shared wiring for agent and bench --------------------------------------


def _provider_factory(cfg: RunConfig, args: argparse.Namespace, kind: str):
    """Returns a callable building one provider per task."""
    if args.dry_run:
        base = lambda: DryRunProvider()  # noqa: E731
    elif args.replay:
        base = lambda: ReplayProvider(Path(args.replay) / kind)  # noqa: E731
    else:
        if not cfg.api_key:
            raise UsageError("no API key: set NODEFLOW_API_KEY (or use --dry-run / --replay)")
        base = lambda: HttpChatProvider(cfg.llm_base_url, cfg.api_key)  # noqa: E731
    if args.record:
        return lambda *_: RecordingProvider(base(), Path(args.record) / kind)
    return lambda *_: base()


def _embedder(cfg: RunConfig, args: argparse.Namespace):
    if cfg.embedder == "hash" or args.dry_run:
        return HashEmbedder()
    if not cfg.api_key:
        raise UsageError("no API key for the embedding service: set NODEFLOW_API_KEY")
    return HttpEmbedder(cfg.embedding_base_url, cfg.embedding_model, cfg.api_key, max_attempts=cfg.max_attempts)


def _agent_config(cfg: RunConfig) -> AgentConfig:
    return AgentConfig(model=cfg.model, step_budget=cfg.step_budget, refine_attempts=cfg.refine_attempts,
                       retrieval_k=cfg.retrieval_k)


def _knobs(args: argparse.Namespace) -> dict:
    return {
        "model": args.model,
        "step_budget": args.step_budget,
        "refine_attempts": args.refine_attempts,
        "retrieval_k": args.retrieval_k,
        "registry": args.registry,
        "corpus": args.corpus,
        "output_dir": args.out,
        "seed": args.seed,
    }


def _load_corpus(cfg: RunConfig):
    registry = _registry(cfg.registry)
    if not Path(cfg.corpus).is_dir():
        raise UsageError(f"curriculum directory not found: {cfg.corpus}")
    try:
        return registry, ingest_corpus(cfg.corpus, registry)
    except CorpusError as exc:
        raise UsageError(f"bad curriculum: {exc}") from exc


# -- agent ------------------------------------------------------------------


def cmd_agent(args: argparse.Namespace) -> int:
    cfg = _config(args, tasks=args.tasks, **_knobs(args))
    if args.instruction:
        instruction = args.instruction
    elif args.instruction_file:
        instruction = _read(args.instruction_file).strip()
    else:
        if not cfg.tasks:
            raise UsageError("--task-id needs --tasks")
        matches = [t for t in load_tasks(cfg.tasks) if t.id == args.task_id]
        if not matches:
            raise UsageError(f"no task {args.task_id!r} in {cfg.tasks}")
        instruction = matches[0].instruction
    providers = _provider_factory(cfg, args, "llm")
    embedder = _embedder(cfg, args)
    registry, store = _load_corpus(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    transcript_path = out / "transcript.jsonl"
    transcript_path.unlink(missing_ok=True)
    client = LLMClient(providers(), max_attempts=cfg.max_attempts, transcript=Transcript(transcript_path))
    cache = EmbeddingCache(cfg.cache_dir) if cfg.cache_dir else None
    result = run_episode(instruction, store, registry, client, _agent_config(cfg), embedder, cache)
    (out / "episode.json").write_text(json.dumps(result.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    for step in result.steps:
        print(f"step {step.index}: {step.action_text} [{step.status}]")
    print(f"terminated by {result.terminated_by}")
    if result.graph is None:
        print(f"no workflow saved: {result.error or 'the workspace is empty'}", file=sys.stderr)
        return EXIT_FAILURE
    (out / "workflow.json").write_text(json.dumps(graph_to_dict(result.graph), indent=2, ensure_ascii=False) + "\n",
                                       encoding="utf-8")
    (out / "workflow.py").write_text(result.workspace.code + "\n", encoding="utf-8")
    print(f"saved {out / 'workflow.json'} and {out / 'workflow.py'}")
    return EXIT_OK if result.terminated_by != "fatal-error" else EXIT_FAILURE


# -- bench / report ---------------------------------------------------------


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _config(args, tasks=args.tasks, backend=args.backend, parallelism=args.parallelism,
                  demonstrations=args.demonstrations, representation=args.representation, **_knobs(args))
    if not cfg.tasks:
        raise UsageError("no task manifest: pass --tasks or set it in the config")
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise UsageError(f"unknown strategies {unknown}; choose from {', '.join(STRATEGIES)}")
    try:
        tasks = filter_tasks(load_tasks(cfg.tasks), args.filter)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    providers = _provider_factory(cfg, args, "llm")
    judges = _provider_factory(cfg, args, "judge")
    embedder = _embedder(cfg, args)
    registry, store = _load_corpus(cfg)
    out = Path(cfg.output_dir)
    if cfg.backend == "live":
        executor = LiveExecutor(cfg.server_url, out / "outputs", poll_budget=cfg.poll_budget)
    else:
        executor = SimulatedExecutor(registry, out / "outputs")
    bench_cfg = BenchConfig(
        model=cfg.model, judge_model=cfg.judge_model, demonstrations=cfg.demonstrations, retrieval_k=cfg.retrieval_k,
        sc_trajectories=cfg.sc_trajectories, sc_temperature=cfg.sc_temperature, seed=cfg.seed,
        representation=cfg.representation, frame_cap=cfg.frame_cap, judge_votes=cfg.judge_votes,
        parallelism=cfg.parallelism, agent=_agent_config(cfg),
    )
    cache = EmbeddingCache(cfg.cache_dir) if cfg.cache_dir else None
    log_path = out / "runs.jsonl"
    rows = []
    for strategy in strategies:
        rows += run_strategy(strategy, tasks, store, registry, providers, judges, executor, bench_cfg, embedder,
                             log_path, cache, out / "transcripts", {"max_attempts": cfg.max_attempts})
    report = aggregate(rows)
    _write_report(report, out)
    sys.stdout.write(report.to_markdown())
    print(f"report digest {report.digest()}")
    return EXIT_OK


def _write_report(report, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")


def cmd_report(args: argparse.Namespace) -> int:
    rows = []
    for path in args.runlogs:
        if not Path(path).is_file():
            raise UsageError(f"run log not found: {path}")
        rows += read_run_log(path)
    if args.filter:
        key, _, values = args.filter.partition("=")
        rows = [r for r in rows if str(r.get(key)) in values.split(",")]
    try:
        report = aggregate(rows)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.out:
        _write_report(report, Path(args.out))
    sys.stdout.write(report.to_csv() if args.csv else report.to_markdown())
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output directory")
    p.add_argument("--model")
    p.add_argument("--step-budget", type=int)
    p.add_argument("--refine-attempts", type=int)
    p.add_argument("--retrieval-k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--registry", help="directory of node documents")
    p.add_argument("--corpus", help="directory of curriculum workflows")
    p.add_argument("--tasks", help="task manifest (JSON lines)")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--dry-run", action="store_true", help="use the offline stand-in model")
    mode.add_argument("--replay", help="serve model replies from a recording directory")
    p.add_argument("--record", help="save every model reply to this directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodeflow", description="Workflow conversion, validation, agent runs and benchmarks.")
    parser.add_argument("--config", help="INI config file with a [run] section")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert between prompt JSON and code")
    p.add_argument("input")
    p.add_argument("--direction", choices=("json-to-code", "code-to-json"))
    p.add_argument("--registry")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("validate", help="check a workflow against the node registry")
    p.add_argument("workflow")
    p.add_argument("--registry")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("agent", help="run one agent episode")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--instruction")
    src.add_argument("--instruction-file")
    src.add_argument("--task-id")
    _add_run_flags(p)
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("bench", help="run strategies over a task manifest")
    p.add_argument("--strategies", default=",".join(STRATEGIES))
    p.add_argument("--filter", help="field=value[,value] over id, category or modality")
    p.add_argument("--backend", choices=("simulated", "live"))
    p.add_argument("--parallelism", type=int)
    p.add_argument("--demonstrations", type=int)
    p.add_argument("--representation", choices=("code", "json", "elements"))
    _add_run_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="aggregate run logs into a pass/resolve table")
    p.add_argument("runlogs", nargs="+")
    p.add_argument("--filter", help="field=value[,value] over run-log rows")
    p.add_argument("--csv", action="store_true", help="print CSV instead of markdown")
    p.add_argument("--out", help="also write report.md and report.csv here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("registry-dump", help="print every node schema as JSON lines")
    p.add_argument("--registry")
    p.set_defaults(func=cmd_registry_dump)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, TaskError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
