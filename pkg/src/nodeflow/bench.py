"""Benchmark harness: task manifests, baseline strategies, judging, run logs
and the pass/resolve report."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from math import floor
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence, Union

import numpy as np
from scipy import stats

from .agent import AgentConfig, load_template, render_template, render_workflow, run_episode
from .codec import CodeError, EmitError, code_to_graph, emit_code
from .elements import emit_element_list, read_element_list
from .execute import ExecutionOutcome, FrameError, is_video, media_type_for, png_bytes, read_frames, sample_frames
from .graph import GraphError, WorkflowGraph, graph_to_dict, parse_prompt_json, serialize_prompt_json
from .knowledge import AnnotatedWorkflow, EmbeddingCache, EmbeddingError, Embedder, KnowledgeStore, retrieve
from .llm import (
    ChatMessage,
    CompletionRequest,
    JudgmentError,
    LLMClient,
    LLMError,
    Provider,
    TagError,
    Transcript,
    extract_tag,
    parse_judgment,
)
from .registry import ClassNotFound, NodeSchemaRegistry

log = logging.getLogger(__name__)

CATEGORIES = ("vanilla", "complex", "creative")
MODALITIES = ("T2I", "I2I", "T2V", "I2V", "V2V")
STRATEGIES = ("zero-shot", "few-shot", "cot", "cot-sc", "rag", "comfyagent")
REPRESENTATIONS = ("code", "json", "elements")


# -- tasks ------------------------------------------------------------------


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class Asset:
    filename: str
    media_type: str
    path: Path


@dataclass(frozen=True)
class Task:
    id: str
    instruction: str
    category: str
    modality: str
    assets: tuple[Asset, ...] = ()

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise TaskError(f"task {self.id}: unknown category {self.category!r}")
        if self.modality not in MODALITIES:
            raise TaskError(f"task {self.id}: unknown modality {self.modality!r}")


_MENTION = re.compile(r"[\w-]+\.(?:png|jpe?g|webp|gif|mp4|webm|mov)\b", re.IGNORECASE)


def load_tasks(path: Union[str, Path], asset_dir: Union[str, Path, None] = None) -> list[Task]:
    """Read a JSON-lines manifest. Assets live in ``asset_dir`` (default: an
    ``assets`` directory next to the manifest)."""
    path = Path(path)
    asset_root = Path(asset_dir) if asset_dir else path.parent / "assets"
    tasks = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TaskError(f"{path.name}:{lineno}: {exc}") from exc
        task_id = str(row["id"])
        if task_id in seen:
            raise TaskError(f"{path.name}:{lineno}: duplicate task id {task_id!r}")
        seen.add(task_id)
        assets = []
        for item in row.get("assets", []):
            filename = item if isinstance(item, str) else item["filename"]
            media_type = media_type_for(filename) if isinstance(item, str) else item.get("media_type", media_type_for(filename))
            asset_path = asset_root / filename
            if not asset_path.is_file():
                raise TaskError(f"task {task_id}: missing asset {filename}")
            assets.append(Asset(filename, media_type, asset_path))
        names = {a.filename for a in assets}
        for mention in _MENTION.findall(row["instruction"]):
            if mention not in names:
                raise TaskError(f"task {task_id}: instruction mentions {mention} but it is not among the assets")
        tasks.append(Task(task_id, row["instruction"], row["category"], row["modality"], tuple(assets)))
    return tasks


def filter_tasks(tasks: Iterable[Task], expr: Optional[str]) -> list[Task]:
    """``expr`` is ``field=value[,value...]`` over id, category or modality."""
    tasks = list(tasks)
    if not expr:
        return tasks
    key, sep, values = expr.partition("=")
    if not sep or key not in ("id", "category", "modality"):
        raise ValueError(f"bad filter {expr!r}; use id=, category= or modality=")
    wanted = set(values.split(","))
    return [t for t in tasks if getattr(t, key) in wanted]


# -- judging ----------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    resolved: bool
    analysis: str = ""
    calls: int = 0
    error: str = ""


JUDGE_TEMPLATES = {"T2I": "judge_t2i", "I2I": "judge_i2i", "T2V": "judge_t2v", "I2V": "judge_i2v", "V2V": "judge_v2v"}


def _pick_output(task: Task, outcome: ExecutionOutcome):
    want_video = task.modality.endswith("V")
    for artifact in outcome.outputs:
        if is_video(artifact.media_type) == want_video:
            return artifact
    return outcome.outputs[0]


def _input_images(task: Task, cap: int) -> list[bytes]:
    images = []
    for asset in task.assets:
        if is_video(asset.media_type):
            images.extend(png_bytes(f) for f in sample_frames(asset.path, cap))
        else:
            images.append(png_bytes(read_frames(asset.path)[0]))
    return images


def build_judge_request(task: Task, outcome: ExecutionOutcome, model: str, cap: int = 10) -> CompletionRequest:
    result = _pick_output(task, outcome)
    inputs = _input_images(task, cap) if task.modality != "T2I" and task.modality != "T2V" else []
    if task.modality.endswith("V"):
        frames = [png_bytes(f) for f in sample_frames(result.path, cap)]
    else:
        frames = [png_bytes(read_frames(result.path)[0])]
    rate = result.frame_rate if result.frame_rate is not None else "unknown"
    prompt = render_template(
        load_template(JUDGE_TEMPLATES[task.modality]),
        instruction=task.instruction,
        resolution=result.resolution,
        frame_rate=f"{rate:g}" if isinstance(rate, float) else rate,
        frame_count=len(frames),
        input_count=len(inputs),
    )
    images = [("image/png", data) for data in inputs + frames]
    return CompletionRequest(model, (ChatMessage.user(prompt, images),), temperature=0.0)


def judge_resolve(task: Task, outcome: ExecutionOutcome, client: LLMClient, model: str = "gpt-4o",
                  cap: int = 10, votes: int = 1) -> JudgeVerdict:
    """Ask the judge whether the outputs satisfy the instruction. Unpassed
    outcomes are unresolved without a call; any failure counts as unresolved."""
    if not outcome.passed:
        return JudgeVerdict(False)
    try:
        request = build_judge_request(task, outcome, model, cap)
    except FrameError as exc:
        return JudgeVerdict(False, f"judging skipped: {exc}", 0, str(exc))
    analyses, yes, calls = [], 0, 0
    for _ in range(votes):
        calls += 1
        try:
            reply = client.complete(request, "judge")
            analyses.append(extract_tag(reply, "analysis"))
            yes += parse_judgment(reply)
        except (LLMError, TagError, JudgmentError) as exc:
            note = f"{type(exc).__name__}: {exc}"
            return JudgeVerdict(False, f"judge failed: {note}", calls, note)
    return JudgeVerdict(yes * 2 > votes, analyses[0], calls)


# -- baselines --------------------------------------------------------------


ANSWER_FORMATS = {
    "code": (
        'Write the workflow as Python code with one node call per line and keyword arguments only. '
        'Your code should be enclosed with "<code>" tag. For example: <code>output = node(input)</code>.'
    ),
    "json": (
        'Write the workflow in the API JSON format, mapping node ids to "class_type" and "inputs", where '
        'links are [node_id, output_index] pairs. Your JSON should be enclosed with "<code>" tag.'
    ),
    "elements": (
        'Write the workflow as an element list in the same layout as the examples: one paragraph per node '
        'with its parameters, followed by one line per connection. Your list should be enclosed with "<code>" tag.'
    ),
}


@dataclass
class BenchConfig:
    model: str = "gpt-4o"
    judge_model: str = "gpt-4o"
    demonstrations: int = 3
    retrieval_k: int = 5
    sc_trajectories: int = 3
    sc_temperature: float = 0.7
    seed: int = 0
    representation: str = "code"
    frame_cap: int = 10
    judge_votes: int = 1
    parallelism: int = 1
    max_tokens: int = 4096
    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self) -> None:
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")
        for name in ("demonstrations", "retrieval_k", "sc_trajectories", "frame_cap", "judge_votes", "parallelism"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def render_in(workflow: AnnotatedWorkflow, representation: str, registry: NodeSchemaRegistry) -> str:
    if representation == "code":
        body = workflow.code
    elif representation == "json":
        body = serialize_prompt_json(workflow.graph, indent=2).decode()
    else:
        body = emit_element_list(workflow.graph, registry)
    return f"- Example: {workflow.name}\n\n" + render_workflow(body, workflow.function, workflow.principle)


def decode_answer(text: str, representation: str, registry: NodeSchemaRegistry) -> WorkflowGraph:
    if representation == "code":
        return code_to_graph(text, registry)
    if representation == "json":
        return parse_prompt_json(text)
    return read_element_list(text)


@dataclass
class Generation:
    graph: Optional[WorkflowGraph] = None
    error: str = ""
    note: str = ""


def _decode_reply(reply: str, config: BenchConfig, registry: NodeSchemaRegistry) -> Generation:
    try:
        body = extract_tag(reply, "code")
        return Generation(decode_answer(body, config.representation, registry))
    except (TagError, CodeError, GraphError, ClassNotFound, ValueError) as exc:
        return Generation(None, f"{type(exc).__name__}: {exc}")


def canonical_key(graph: WorkflowGraph, registry: NodeSchemaRegistry) -> str:
    try:
        return emit_code(graph, registry)
    except EmitError:
        return serialize_prompt_json(graph).decode()


def majority(generations: Sequence[Generation], registry: NodeSchemaRegistry) -> Generation:
    """Most frequent canonical workflow; ties go to the earliest trajectory."""
    keys = [canonical_key(g.graph, registry) if g.graph is not None else None for g in generations]
    counts = Counter(k for k in keys if k is not None)
    if not counts:
        return Generation(None, generations[0].error if generations else "no trajectories")
    best = max(counts.values())
    index = next(i for i, k in enumerate(keys) if k is not None and counts[k] == best)
    return Generation(generations[index].graph, note=f"trajectory {index + 1} chosen by {best}/{len(keys)} votes")


def _demos(strategy: str, task: Task, store: KnowledgeStore, config: BenchConfig, embedder: Embedder,
           cache: Optional[EmbeddingCache]) -> list[AnnotatedWorkflow]:
    if strategy == "rag":
        return [h.workflow for h in retrieve(store, task.instruction, config.retrieval_k, embedder, cache)]
    # The fixed demonstrations are the first entries of the curriculum.
    return list(store.workflows[: config.demonstrations])


def baseline_prompt(strategy: str, task: Task, demos: list[AnnotatedWorkflow], registry: NodeSchemaRegistry,
                    config: BenchConfig) -> str:
    template = {"zero-shot": "zero_shot", "few-shot": "few_shot", "cot": "cot", "cot-sc": "cot", "rag": "rag"}[strategy]
    return render_template(
        load_template(template),
        instruction=task.instruction,
        demonstrations="\n\n".join(render_in(w, config.representation, registry) for w in demos),
        answer_format=ANSWER_FORMATS[config.representation],
    )


def generate_baseline(strategy: str, task: Task, store: KnowledgeStore, registry: NodeSchemaRegistry,
                      client: LLMClient, config: BenchConfig, embedder: Embedder,
                      cache: Optional[EmbeddingCache] = None) -> Generation:
    demos = [] if strategy == "zero-shot" else _demos(strategy, task, store, config, embedder, cache)
    prompt = baseline_prompt(strategy, task, demos, registry, config)
    message = ChatMessage.user(prompt)
    if strategy != "cot-sc":
        request = CompletionRequest(config.model, (message,), 0.0, config.max_tokens, config.agent.seed)
        return _decode_reply(client.complete(request, strategy), config, registry)

    def trajectory(i: int) -> Generation:
        request = CompletionRequest(config.model, (message,), config.sc_temperature, config.max_tokens, config.seed + i)
        try:
            return _decode_reply(client.complete(request, f"cot-sc-{i + 1}"), config, registry)
        except LLMError as exc:
            return Generation(None, f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(config.sc_trajectories) as pool:
        generations = list(pool.map(trajectory, range(config.sc_trajectories)))
    return majority(generations, registry)


# -- runs -------------------------------------------------------------------


class Executor(Protocol):
    label: str

    def execute(self, graph: WorkflowGraph, name: str = "workflow") -> ExecutionOutcome: ...


ProviderFactory = Callable[[str, Task], Provider]


def read_run_log(path: Union[str, Path]) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                log.warning("skipping truncated run-log line in %s", path.name)
    return rows


def run_task(strategy: str, task: Task, store: KnowledgeStore, registry: NodeSchemaRegistry, client: LLMClient,
             judge: LLMClient, executor: Executor, config: BenchConfig, embedder: Embedder,
             cache: Optional[EmbeddingCache] = None) -> dict:
    row = {
        "strategy": strategy,
        "task_id": task.id,
        "category": task.category,
        "modality": task.modality,
        "backend": executor.label,
        "passed": False,
        "resolved": False,
        "code": None,
        "outputs": [],
        "message": "",
        "judge_analysis": "",
        "judge_calls": 0,
        "error": "",
        "note": "",
    }
    try:
        if strategy == "comfyagent":
            episode = run_episode(task.instruction, store, registry, client, config.agent, embedder, cache)
            gen = Generation(episode.graph, episode.error or ("" if episode.graph else episode.terminated_by),
                             f"{episode.terminated_by} after {len(episode.steps)} steps")
        else:
            gen = generate_baseline(strategy, task, store, registry, client, config, embedder, cache)
    except (LLMError, EmbeddingError) as exc:
        gen = Generation(None, f"{type(exc).__name__}: {exc}")
    row["note"] = gen.note
    if gen.graph is None:
        outcome = ExecutionOutcome(False, (), f"no workflow was produced: {gen.error}")
    else:
        row["workflow"] = graph_to_dict(gen.graph)
        try:
            row["code"] = emit_code(gen.graph, registry)
        except EmitError:
            pass
        outcome = executor.execute(gen.graph, f"{strategy}-{task.id}")
    row["passed"] = outcome.passed
    row["message"] = outcome.message
    row["outputs"] = [a.to_json() for a in outcome.outputs]
    row["error"] = gen.error
    verdict = judge_resolve(task, outcome, judge, config.judge_model, config.frame_cap, config.judge_votes)
    row["resolved"] = verdict.resolved
    row["judge_analysis"] = verdict.analysis
    row["judge_calls"] = verdict.calls
    if verdict.error:
        row["error"] = (row["error"] + "; " if row["error"] else "") + verdict.error
    row["llm_calls"] = len(client.transcript)
    row["transcript_digest"] = client.transcript.digest()
    return row


def run_strategy(
    strategy: str,
    tasks: Sequence[Task],
    store: KnowledgeStore,
    registry: NodeSchemaRegistry,
    providers: ProviderFactory,
    judges: ProviderFactory,
    executor: Executor,
    config: BenchConfig,
    embedder: Embedder,
    log_path: Union[str, Path],
    cache: Optional[EmbeddingCache] = None,
    transcript_dir: Union[str, Path, None] = None,
    llm_options: Optional[dict] = None,
) -> list[dict]:
    """Run one strategy over ``tasks`` and append a row per task to the run
    log. Tasks already present in the log are skipped, so an interrupted
    sweep resumes where it stopped."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    log_path = Path(log_path)
    done = {r["task_id"]: r for r in read_run_log(log_path) if r.get("strategy") == strategy}
    pending = [t for t in tasks if t.id not in done]
    lock = threading.Lock()
    options = llm_options or {}

    def transcript(kind: str, task: Task) -> Transcript:
        if transcript_dir is None:
            return Transcript()
        path = Path(transcript_dir) / strategy / f"{task.id}.{kind}.jsonl"
        path.unlink(missing_ok=True)
        return Transcript(path)

    def one(task: Task) -> dict:
        client = LLMClient(providers(strategy, task), transcript=transcript("llm", task), **options)
        judge = LLMClient(judges(strategy, task), transcript=transcript("judge", task), **options)
        try:
            row = run_task(strategy, task, store, registry, client, judge, executor, config, embedder, cache)
        except Exception as exc:  # a broken task must not end the sweep
            log.exception("task %s failed", task.id)
            row = {"strategy": strategy, "task_id": task.id, "category": task.category, "modality": task.modality,
                   "backend": executor.label, "passed": False, "resolved": False, "judge_calls": 0,
                   "error": f"{type(exc).__name__}: {exc}"}
        with lock:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        return row

    with ThreadPoolExecutor(config.parallelism) as pool:
        for row in pool.map(one, pending):
            done[row["task_id"]] = row
    return [done[t.id] for t in tasks if t.id in done]


# -- report -----------------------------------------------------------------


def percent(count: int, total: int) -> float:
    """100*count/total rounded half up to one decimal."""
    if total == 0:
        return 0.0
    return floor(Fraction(1000 * count, total) + Fraction(1, 2)) / 10


@dataclass(frozen=True)
class Cell:
    tasks: int = 0
    passed: int = 0
    resolved: int = 0

    @property
    def pass_rate(self) -> float:
        return percent(self.passed, self.tasks)

    @property
    def resolve_rate(self) -> float:
        return percent(self.resolved, self.tasks)

    def add(self, passed: bool, resolved: bool) -> "Cell":
        return Cell(self.tasks + 1, self.passed + bool(passed), self.resolved + bool(passed and resolved))


@dataclass
class BenchReport:
    cells: dict[tuple[str, str], Cell]
    strategies: list[str]
    backend: str = ""
    empty: bool = False

    def cell(self, strategy: str, category: str) -> Cell:
        return self.cells.get((strategy, category), Cell())

    def header(self) -> list[str]:
        cols = ["Strategy"]
        for cat in CATEGORIES + ("total",):
            cols += [f"{cat.capitalize()} %Pass", f"{cat.capitalize()} %Resolve"]
        return cols

    def table(self) -> list[list[str]]:
        rows = []
        for strategy in self.strategies:
            row = [strategy]
            for cat in CATEGORIES + ("total",):
                c = self.cell(strategy, cat)
                row += [f"{c.pass_rate:.1f}", f"{c.resolve_rate:.1f}"]
            rows.append(row)
        return rows

    def to_markdown(self) -> str:
        lines = [f"Backend: {self.backend or 'none'}", ""]
        if self.empty:
            lines.append("(empty run log: no rows to report)")
            lines.append("")
        lines.append("| " + " | ".join(self.header()) + " |")
        lines.append("|" + "---|" * len(self.header()))
        lines += ["| " + " | ".join(r) + " |" for r in self.table()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["strategy", "category", "tasks", "passed", "resolved", "pass_rate", "resolve_rate"])
        for strategy in self.strategies:
            for cat in CATEGORIES + ("total",):
                c = self.cell(strategy, cat)
                writer.writerow([strategy, cat, c.tasks, c.passed, c.resolved, f"{c.pass_rate:.1f}", f"{c.resolve_rate:.1f}"])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256((self.to_markdown() + self.to_csv()).encode()).hexdigest()


def aggregate(rows: Iterable[dict]) -> BenchReport:
    """Count passes and resolves per (strategy, category) and in total. A row
    only counts as resolved when it also passed. Later duplicates of a
    (strategy, task) pair are ignored."""
    cells: dict[tuple[str, str], Cell] = {}
    strategies: list[str] = []
    backends = set()
    seen = set()
    for row in rows:
        key = (row["strategy"], row["task_id"])
        if key in seen:
            continue
        seen.add(key)
        if row.get("backend"):
            backends.add(row["backend"])
        if row["strategy"] not in strategies:
            strategies.append(row["strategy"])
        for cat in (row["category"], "total"):
            k = (row["strategy"], cat)
            cells[k] = cells.get(k, Cell()).add(row["passed"], row["resolved"])
    if len(backends) > 1:
        raise ValueError(f"refusing to mix backends in one report: {sorted(backends)}")
    order = [s for s in STRATEGIES if s in strategies] + sorted(s for s in strategies if s not in STRATEGIES)
    return BenchReport(cells, order, backends.pop() if backends else "", empty=not seen)


# -- agreement --------------------------------------------------------------


class ConstantInputError(ValueError):
    """Correlation is undefined for a constant score vector."""


@dataclass(frozen=True)
class AgreementStats:
    kendall_tau: float
    kendall_p: float
    pearson_r: float
    pearson_p: float
    spearman_rho: float
    spearman_p: float


def agreement_stats(a: Sequence[float], b: Sequence[float]) -> AgreementStats:
    x, y = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("score vectors must be one-dimensional and of equal length")
    if len(x) < 3:
        raise ValueError("need at least 3 paired scores")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ConstantInputError("one of the score vectors is constant")
    tau = stats.kendalltau(x, y, variant="b", method="asymptotic")
    r = stats.pearsonr(x, y)
    rho = stats.spearmanr(x, y)
    return AgreementStats(float(tau.statistic), float(tau.pvalue), float(r.statistic), float(r.pvalue),
                          float(rho.statistic), float(rho.pvalue))
