"""Step-by-step workflow design agent.

A planner looks at the task, the retrieved reference workflows, its own
history and the current workspace, then picks one action per step:

* ``load(name=...)`` copies a reference workflow into the workspace,
* ``combine(name=...)`` merges a reference into the workspace,
* ``adapt(prompt=...)`` changes parameters of the workspace,
* ``retrieve(prompt=...)`` replaces the references with a new search,
* ``finish()`` ends the episode and saves the workspace.

Every workflow produced by combine/adapt passes the refine gate (parse, lower,
validate, and ask for a repair on failure) before it may replace the
workspace, so the workspace is always a valid workflow.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Optional, Union

from .codec import CodeError, LowerError, code_to_graph, emit_code
from .graph import GraphError, WorkflowGraph, graph_to_dict, validate
from .knowledge import AnnotatedWorkflow, EmbeddingCache, EmbeddingError, Embedder, KnowledgeStore, retrieve
from .llm import (
    ChatMessage,
    CompletionRequest,
    ContextLengthError,
    LLMClient,
    LLMError,
    TagError,
    TextPart,
    extract_tag,
    extract_tags,
)
from .registry import NodeSchemaRegistry

log = logging.getLogger(__name__)

EMPTY_HISTORY = "- The history is empty."
EMPTY_WORKSPACE = "- The workspace is empty."
EMPTY_REFERENCE = "- The reference is empty."

_PLACEHOLDER = re.compile(
    r"\{(instruction|analysis|reference|history|workspace|schedule|adaptation|refinement|limitation"
    r"|demonstrations|answer_format|resolution|frame_rate|frame_count|input_count)\}"
)


def load_template(name: str) -> str:
    return resources.files("nodeflow").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def render_template(template: str, **values: object) -> str:
    def fill(m: re.Match) -> str:
        key = m.group(1)
        if key not in values:
            raise KeyError(f"template needs a value for {{{key}}}")
        return str(values[key])

    return _PLACEHOLDER.sub(fill, template)


# -- actions ----------------------------------------------------------------


@dataclass(frozen=True)
class Load:
    name: str


@dataclass(frozen=True)
class Combine:
    name: str


@dataclass(frozen=True)
class Adapt:
    prompt: str


@dataclass(frozen=True)
class Retrieve:
    prompt: str


@dataclass(frozen=True)
class Finish:
    pass


Action = Union[Load, Combine, Adapt, Retrieve, Finish]

_ACTIONS = {"load": (Load, "name"), "combine": (Combine, "name"), "adapt": (Adapt, "prompt"),
            "retrieve": (Retrieve, "prompt"), "finish": (Finish, None)}


class ActionError(ValueError):
    pass


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def format_action(action: Action) -> str:
    if isinstance(action, Finish):
        return "finish()"
    for verb, (cls, key) in _ACTIONS.items():
        if isinstance(action, cls):
            return f"{verb}({key}={_quote(getattr(action, key))})"
    raise TypeError(action)


def parse_action(text: str) -> Action:
    """``verb()`` or ``verb(key="value")`` for the five known verbs."""
    from .codec import Lexer

    try:
        toks = [t for t in Lexer(text.strip()).tokens() if t.kind != "NEWLINE"]
    except CodeError as exc:
        raise ActionError(f"cannot parse action: {exc.message}") from None
    shape = [t.kind if t.kind != "OP" else t.value for t in toks]
    if shape[:2] != ["NAME", "("]:
        raise ActionError(f"action must look like a function call, got {text.strip()!r}")
    verb = toks[0].value
    if verb not in _ACTIONS:
        raise ActionError(f"unknown action {verb!r}; choose one of {', '.join(_ACTIONS)}")
    cls, key = _ACTIONS[verb]
    if key is None:
        if shape != ["NAME", "(", ")", "EOF"]:
            raise ActionError("finish() takes no arguments")
        return cls()
    if shape == ["NAME", "(", ")", "EOF"]:
        raise ActionError(f"{verb}() is missing the {key!r} argument")
    if shape != ["NAME", "(", "NAME", "=", "STRING", ")", "EOF"]:
        raise ActionError(f'{verb} takes exactly one argument: {verb}({key}="...")')
    if toks[2].value != key:
        raise ActionError(f"{verb} expects argument {key!r}, got {toks[2].value!r}")
    value = toks[4].value.strip()
    if not value:
        raise ActionError(f"{verb} needs a non-empty {key}")
    return cls(value)


# -- memory -----------------------------------------------------------------


@dataclass(frozen=True)
class Workspace:
    code: str = ""
    function: str = ""
    principle: str = ""

    @property
    def empty(self) -> bool:
        return not self.code


def render_workflow(code: str, function: str, principle: str) -> str:
    return (
        f"<code>\n{code}\n</code>\n\n"
        f"<function>\n{function}\n</function>\n\n"
        f"<principle>\n{principle}\n</principle>"
    )


def render_workspace(workspace: Workspace) -> str:
    if workspace.empty:
        return EMPTY_WORKSPACE
    return render_workflow(workspace.code, workspace.function, workspace.principle)


def render_reference_list(reference: list[AnnotatedWorkflow]) -> str:
    if not reference:
        return EMPTY_REFERENCE
    blocks = [
        f"- Example: {w.name}\n\n<function>\n{w.function}\n</function>\n\n<principle>\n{w.principle}\n</principle>"
        for w in reference
    ]
    return "\n\n".join(blocks)


@dataclass(frozen=True)
class StepRecord:
    index: int
    thought: str
    plan: str
    action: Optional[Action]
    action_text: str
    status: str  # applied | failed | violation
    note: str = ""

    @property
    def accepted(self) -> bool:
        return self.action is not None and self.status != "violation"

    def render(self) -> str:
        text = (
            f"- Step: {self.index}\n\n<thought>\n{self.thought}\n</thought>\n\n"
            f"<plan>\n{self.plan}\n</plan>\n\n<action>\n{self.action_text}\n</action>"
        )
        if self.note:
            text += f"\n\n<result>\n{self.note}\n</result>"
        return text

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "thought": self.thought,
            "plan": self.plan,
            "action": self.action_text,
            "status": self.status,
            "note": self.note,
        }


def render_history(history: list[StepRecord], window: Optional[int] = None) -> str:
    if not history:
        return EMPTY_HISTORY
    shown = history[-window:] if window else history
    return "\n\n".join(s.render() for s in shown)


@dataclass
class AgentMemory:
    history: list[StepRecord] = field(default_factory=list)
    reference: list[AnnotatedWorkflow] = field(default_factory=list)
    workspace: Workspace = field(default_factory=Workspace)

    def reference_entry(self, name: str) -> Optional[AnnotatedWorkflow]:
        for w in self.reference:
            if w.name == name:
                return w
        return None


@dataclass(frozen=True)
class AgentConfig:
    model: str = "gpt-4o"
    step_budget: int = 5
    refine_attempts: int = 2
    retrieval_k: int = 5
    history_window: Optional[int] = None
    temperature: float = 0.0
    max_tokens: int = 4096
    seed: Optional[int] = None
    include_node_docs: bool = False

    def __post_init__(self) -> None:
        if self.step_budget < 1 or self.retrieval_k < 1 or self.refine_attempts < 0:
            raise ValueError("step_budget and retrieval_k must be >= 1, refine_attempts >= 0")


@dataclass(frozen=True)
class TaskContext:
    instruction: str
    analysis: str


# -- rules ------------------------------------------------------------------


@dataclass(frozen=True)
class RuleViolation:
    rule: int
    message: str


def enforce_rules(memory: AgentMemory, action: Action) -> Union[Action, RuleViolation]:
    accepted = [s.action for s in memory.history if s.accepted]
    if isinstance(action, Load) and accepted:
        return RuleViolation(1, "load is only allowed as the very first action; use combine or adapt instead.")
    if not accepted and not isinstance(action, (Load, Retrieve)):
        return RuleViolation(1, "the first action must be load, since the workspace is empty.")
    if isinstance(action, Adapt) and accepted and isinstance(accepted[-1], Adapt):
        return RuleViolation(3, "adapt was the previous action; merge both adaptations into one step or choose another action.")
    if isinstance(action, (Load, Combine)) and memory.reference_entry(action.name) is None:
        names = ", ".join(w.name for w in memory.reference) or "none"
        return RuleViolation(
            2, f"{action.name!r} is not in the reference (available: {names}); use retrieve to update the reference."
        )
    return action


# -- LLM plumbing -----------------------------------------------------------


class _Session:
    """Shared request settings plus the one-reprompt protocol."""

    def __init__(self, client: LLMClient, config: AgentConfig):
        self.client = client
        self.config = config

    def request(self, messages: list[ChatMessage]) -> CompletionRequest:
        c = self.config
        return CompletionRequest(c.model, tuple(messages), c.temperature, c.max_tokens, c.seed)

    def ask(self, prompt: str, purpose: str, check: Callable[[str], Optional[str]]) -> tuple[str, Optional[str]]:
        """Ask once; if ``check`` objects, reprompt once with the objection.
        Returns the last reply and the remaining objection (None if fine)."""
        messages = [ChatMessage.user(prompt)]
        reply = self.client.complete(self.request(messages), purpose)
        problem = check(reply)
        if problem is None:
            return reply, None
        log.info("%s reply rejected: %s", purpose, problem)
        messages += [
            ChatMessage("assistant", (TextPart(reply),)),
            ChatMessage.user(f"Your answer cannot be accepted: {problem}\n\nPlease answer again with the required format."),
        ]
        reply = self.client.complete(self.request(messages), purpose)
        return reply, check(reply)


def _tag_problem(reply: str, tags: tuple[str, ...]) -> Optional[str]:
    for tag in tags:
        try:
            extract_tag(reply, tag)
        except TagError as exc:
            return str(exc) + "."
    return None


def node_docs_block(registry: NodeSchemaRegistry, codes: list[str]) -> str:
    """Signatures of node classes mentioned in ``codes`` (optional prompt aid)."""
    from .registry import ClassNotFound, code_name

    names = sorted({m for code in codes for m in re.findall(r"=\s*([A-Za-z_][A-Za-z0-9_]*)\(", code)})
    lines = []
    for ident in names:
        try:
            schema = registry.lookup(registry.resolve(ident))
        except ClassNotFound:
            continue
        args = []
        for spec in schema.inputs:
            arg = f"{spec.name}: {spec.type_name}"
            if spec.default is not None:
                arg += f" = {json.dumps(spec.default)}"
            if not spec.required:
                arg += " (optional)"
            args.append(arg)
        outs = ", ".join(o.type_name for o in schema.outputs) or "None"
        lines.append(f"{code_name(schema.class_name)}({', '.join(args)}) -> {outs}")
    return "<nodes>\n" + "\n".join(lines) + "\n</nodes>" if lines else ""


def _with_docs(text: str, registry: NodeSchemaRegistry, config: AgentConfig, codes: list[str]) -> str:
    if not config.include_node_docs:
        return text
    block = node_docs_block(registry, codes)
    return f"{text}\n\n{block}" if block else text


# -- refine gate ------------------------------------------------------------


def check_candidate(code: str, registry: NodeSchemaRegistry) -> tuple[Optional[str], str]:
    """Canonical code for a valid candidate, or ``(None, error text)``."""
    try:
        graph = code_to_graph(code, registry)
    except (CodeError, LowerError, GraphError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    if not graph.nodes:
        return None, "The code contains no statements."
    report = validate(graph, registry)
    if not report.ok:
        return None, report.render()
    return emit_code(graph, registry), ""


@dataclass(frozen=True)
class RefineResult:
    workspace: Optional[Workspace]
    calls: int
    error: str = ""

    @property
    def accepted(self) -> bool:
        return self.workspace is not None


def apply_refine(
    candidate: Workspace,
    task: TaskContext,
    reference: list[AnnotatedWorkflow],
    client: LLMClient,
    registry: NodeSchemaRegistry,
    attempts: int,
    config: AgentConfig,
) -> RefineResult:
    session = _Session(client, config)
    template = load_template("refine")
    calls = 0
    canonical, error = check_candidate(candidate.code, registry)
    while canonical is None and calls < attempts:
        calls += 1
        prompt = render_template(
            template,
            instruction=task.instruction,
            analysis=task.analysis,
            reference=render_reference_list(reference),
            workspace=_with_docs(render_workspace(candidate), registry, config, [candidate.code]),
            refinement=error,
        )
        reply = client.complete(session.request([ChatMessage.user(prompt)]), "refine")
        tags = extract_tags(reply, ("code", "function", "principle"))
        if "code" not in tags:
            error = "The answer did not contain a <code> block."
            continue
        candidate = Workspace(
            tags["code"], tags.get("function", candidate.function), tags.get("principle", candidate.principle)
        )
        canonical, error = check_candidate(candidate.code, registry)
    if canonical is None:
        return RefineResult(None, calls, error)
    return RefineResult(replace(candidate, code=canonical), calls)


# -- actions ----------------------------------------------------------------


@dataclass(frozen=True)
class ActionOutcome:
    ok: bool
    note: str = ""


def _edit_workspace(
    memory: AgentMemory,
    prompt: str,
    purpose: str,
    task: TaskContext,
    client: LLMClient,
    registry: NodeSchemaRegistry,
    config: AgentConfig,
) -> ActionOutcome:
    session = _Session(client, config)
    reply, problem = session.ask(prompt, purpose, lambda r: _tag_problem(r, ("code", "function", "principle")))
    if problem:
        return ActionOutcome(False, f"The {purpose} step failed: {problem}")
    tags = extract_tags(reply, ("code", "function", "principle"))
    candidate = Workspace(tags["code"], tags["function"], tags["principle"])
    result = apply_refine(candidate, task, memory.reference, client, registry, config.refine_attempts, config)
    if not result.accepted:
        return ActionOutcome(
            False,
            f"The {purpose} step was rejected because the workflow still had errors after "
            f"{result.calls} refinement attempt(s); the workspace is unchanged. Last error: {result.error}",
        )
    memory.workspace = result.workspace
    return ActionOutcome(True)


def apply_combine(memory: AgentMemory, name: str, schedule: str, task: TaskContext, client: LLMClient,
                  registry: NodeSchemaRegistry, config: AgentConfig) -> ActionOutcome:
    entry = memory.reference_entry(name)
    if entry is None or memory.workspace.empty:
        return ActionOutcome(False, "combine needs a non-empty workspace and a reference workflow.")
    prompt = render_template(
        load_template("combine"),
        instruction=task.instruction,
        analysis=task.analysis,
        reference=render_workflow(entry.code, entry.function, entry.principle),
        workspace=_with_docs(render_workspace(memory.workspace), registry, config, [memory.workspace.code, entry.code]),
        schedule=schedule,
    )
    return _edit_workspace(memory, prompt, "combine", task, client, registry, config)


def apply_adapt(memory: AgentMemory, adaptation: str, schedule: str, task: TaskContext, client: LLMClient,
                registry: NodeSchemaRegistry, config: AgentConfig) -> ActionOutcome:
    if memory.workspace.empty:
        return ActionOutcome(False, "adapt needs a non-empty workspace.")
    prompt = render_template(
        load_template("adapt"),
        instruction=task.instruction,
        analysis=task.analysis,
        workspace=_with_docs(render_workspace(memory.workspace), registry, config, [memory.workspace.code]),
        schedule=schedule,
        adaptation=adaptation,
    )
    return _edit_workspace(memory, prompt, "adapt", task, client, registry, config)


def apply_retrieve(memory: AgentMemory, query: str, store: KnowledgeStore, embedder: Embedder, k: int,
                   cache: Optional[EmbeddingCache] = None) -> ActionOutcome:
    try:
        hits = retrieve(store, query, k, embedder, cache)
    except EmbeddingError as exc:
        return ActionOutcome(False, f"retrieval failed: {exc}; the reference is unchanged.")
    memory.reference = [h.workflow for h in hits]
    return ActionOutcome(True)


def apply_load(memory: AgentMemory, name: str) -> ActionOutcome:
    entry = memory.reference_entry(name)
    if entry is None:
        return ActionOutcome(False, f"{name!r} is not in the reference.")
    memory.workspace = Workspace(entry.code, entry.function, entry.principle)
    return ActionOutcome(True)


# -- episode ----------------------------------------------------------------


@dataclass
class EpisodeResult:
    instruction: str
    analysis: str
    terminated_by: str  # finish | budget-exhausted | fatal-error
    steps: list[StepRecord]
    workspace: Workspace
    graph: Optional[WorkflowGraph] = None
    error: str = ""
    transcript_digest: str = ""
    initial_reference: list[str] = field(default_factory=list)

    @property
    def code(self) -> Optional[str]:
        return self.workspace.code if self.graph is not None else None

    def to_json(self) -> dict:
        return {
            "instruction": self.instruction,
            "analysis": self.analysis,
            "initial_reference": self.initial_reference,
            "terminated_by": self.terminated_by,
            "steps": [s.to_json() for s in self.steps],
            "code": self.code,
            "function": self.workspace.function if self.graph is not None else None,
            "principle": self.workspace.principle if self.graph is not None else None,
            "workflow": graph_to_dict(self.graph) if self.graph is not None else None,
            "error": self.error,
            "transcript_digest": self.transcript_digest,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False).encode()).hexdigest()


def analyze_task(instruction: str, client: LLMClient, config: AgentConfig) -> str:
    session = _Session(client, config)
    prompt = render_template(load_template("analysis"), instruction=instruction)
    reply = client.complete(session.request([ChatMessage.user(prompt)]), "analysis")
    try:
        return extract_tag(reply, "analysis")
    except TagError:
        return reply.strip()


@dataclass(frozen=True)
class _PlannerReply:
    thought: str
    plan: str
    action_text: str
    action: Optional[Action]
    problem: Optional[str]


def _read_plan(reply: str, memory: AgentMemory) -> _PlannerReply:
    tags = extract_tags(reply, ("thought", "plan", "action"))
    thought, plan, action_text = tags.get("thought", ""), tags.get("plan", ""), tags.get("action", "")
    missing = [t for t in ("thought", "plan", "action") if t not in tags]
    if missing:
        return _PlannerReply(thought, plan, action_text, None, f"missing <{missing[0]}> tag.")
    try:
        action = parse_action(action_text)
    except ActionError as exc:
        return _PlannerReply(thought, plan, action_text, None, str(exc))
    if isinstance(action, Finish) and memory.workspace.empty:
        return _PlannerReply(thought, plan, action_text, action, None)  # fatal, handled by the loop
    verdict = enforce_rules(memory, action)
    if isinstance(verdict, RuleViolation):
        return _PlannerReply(thought, plan, format_action(action), action, f"rule {verdict.rule}: {verdict.message}")
    return _PlannerReply(thought, plan, format_action(action), action, None)


def run_episode(
    instruction: str,
    store: KnowledgeStore,
    registry: NodeSchemaRegistry,
    client: LLMClient,
    config: AgentConfig,
    embedder: Embedder,
    cache: Optional[EmbeddingCache] = None,
) -> EpisodeResult:
    start = len(client.transcript)
    memory = AgentMemory()
    session = _Session(client, config)
    plan_template = load_template("plan")
    analysis = ""
    terminated_by = "budget-exhausted"
    error = ""
    initial: list[str] = []

    try:
        analysis = analyze_task(instruction, client, config)
        task = TaskContext(instruction, analysis)
        memory.reference = [h.workflow for h in retrieve(store, instruction, config.retrieval_k, embedder, cache)]
        initial = [w.name for w in memory.reference]

        for index in range(1, config.step_budget + 1):
            remaining = config.step_budget - index + 1

            def prompt() -> str:
                return render_template(
                    plan_template,
                    instruction=instruction,
                    analysis=analysis,
                    reference=render_reference_list(memory.reference),
                    history=render_history(memory.history, config.history_window),
                    workspace=render_workspace(memory.workspace),
                    limitation=remaining,
                )

            def check(reply: str) -> Optional[str]:
                return _read_plan(reply, memory).problem

            try:
                reply, _ = session.ask(prompt(), "plan", check)
            except ContextLengthError:
                if not memory.reference:
                    raise
                dropped = memory.reference.pop()
                log.warning("context too long, dropping reference %s", dropped.name)
                reply, _ = session.ask(prompt(), "plan", check)
            parsed = _read_plan(reply, memory)

            if parsed.problem is not None:
                status = "violation" if parsed.action is not None else "failed"
                memory.history.append(
                    StepRecord(index, parsed.thought, parsed.plan, parsed.action, parsed.action_text, status,
                               f"The action was not executed: {parsed.problem}")
                )
                continue

            action = parsed.action
            if isinstance(action, Finish):
                if memory.workspace.empty:
                    memory.history.append(
                        StepRecord(index, parsed.thought, parsed.plan, action, parsed.action_text, "failed",
                                   "finish requires a workflow in the workspace")
                    )
                    terminated_by = "fatal-error"
                    error = "finish() was chosen while the workspace was empty"
                    break
                memory.history.append(StepRecord(index, parsed.thought, parsed.plan, action, parsed.action_text, "applied"))
                terminated_by = "finish"
                break

            if isinstance(action, Load):
                outcome = apply_load(memory, action.name)
            elif isinstance(action, Combine):
                outcome = apply_combine(memory, action.name, parsed.plan, task, client, registry, config)
            elif isinstance(action, Adapt):
                outcome = apply_adapt(memory, action.prompt, parsed.plan, task, client, registry, config)
            else:
                outcome = apply_retrieve(memory, action.prompt, store, embedder, config.retrieval_k, cache)
            memory.history.append(
                StepRecord(index, parsed.thought, parsed.plan, action, parsed.action_text,
                           "applied" if outcome.ok else "failed", outcome.note)
            )
    except (LLMError, EmbeddingError) as exc:
        terminated_by = "fatal-error"
        error = f"{type(exc).__name__}: {exc}"
        log.error("episode aborted: %s", error)

    graph = None
    if terminated_by != "fatal-error" and not memory.workspace.empty:
        graph = code_to_graph(memory.workspace.code, registry)
    return EpisodeResult(
        instruction=instruction,
        analysis=analysis,
        terminated_by=terminated_by,
        steps=list(memory.history),
        workspace=memory.workspace,
        graph=graph,
        error=error,
        transcript_digest=_digest_lines(client.transcript.lines[start:]),
        initial_reference=initial,
    )


def _digest_lines(lines: list[str]) -> str:
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()
