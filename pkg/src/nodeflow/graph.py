"""Workflow DAG model, prompt-JSON codec, topological ordering and validation.

A workflow is a mapping of integer node ids to node instances. Each input of a
node is either a literal widget value or a link to an output slot of another
node. On the wire this is the server-side "prompt" JSON::

    {"3": {"class_type": "KSampler", "inputs": {"seed": 5, "model": ["4", 0]}}}
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING, Iterator, Mapping, Optional, Union

if TYPE_CHECKING:
    from .registry import NodeSchemaRegistry

Literal = Union[bool, int, float, str]


class GraphError(ValueError):
    """Raised when prompt-JSON cannot be decoded into a workflow graph."""


class CycleError(GraphError):
    def __init__(self, node: int):
        super().__init__(f"cycle detected through node {node}")
        self.node = node


@dataclass(frozen=True)
class LinkRef:
    source: int
    output_index: int

    def to_json(self) -> list:
        return [str(self.source), self.output_index]


InputValue = Union[Literal, LinkRef]


def is_literal(value: object) -> bool:
    if isinstance(value, float):
        return math.isfinite(value)
    return isinstance(value, (bool, int, str))


def literal_kind(value: Literal) -> str:
    # bool is an int subclass, check it first
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    return "str"


def values_equal(a: InputValue, b: InputValue) -> bool:
    """Kind-aware equality: ``1``, ``1.0`` and ``True`` are all distinct."""
    if isinstance(a, LinkRef) or isinstance(b, LinkRef):
        return a == b
    return literal_kind(a) == literal_kind(b) and a == b


@dataclass(frozen=True)
class NodeInstance:
    class_name: str
    inputs: Mapping[str, InputValue] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, value in self.inputs.items():
            if not isinstance(value, LinkRef) and not is_literal(value):
                raise GraphError(f"input {name!r}: unsupported value {value!r}")
        object.__setattr__(self, "inputs", MappingProxyType(dict(self.inputs)))

    def links(self) -> Iterator[tuple[str, LinkRef]]:
        for name, value in self.inputs.items():
            if isinstance(value, LinkRef):
                yield name, value

    def literals(self) -> Iterator[tuple[str, Literal]]:
        for name, value in self.inputs.items():
            if not isinstance(value, LinkRef):
                yield name, value


@dataclass(frozen=True)
class WorkflowGraph:
    """Immutable workflow. Construction does not check acyclicity or dangling
    links so that broken graphs can still be handed to :func:`validate`."""

    nodes: Mapping[int, NodeInstance] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for node_id in self.nodes:
            if isinstance(node_id, bool) or not isinstance(node_id, int) or node_id < 1:
                raise GraphError(f"node id must be a positive integer, got {node_id!r}")
        object.__setattr__(self, "nodes", MappingProxyType(dict(self.nodes)))

    def __len__(self) -> int:
        return len(self.nodes)

    def edges(self) -> Iterator[tuple[int, str, LinkRef]]:
        for node_id, node in self.nodes.items():
            for name, link in node.links():
                yield node_id, name, link

    def link_count(self) -> int:
        return sum(1 for _ in self.edges())

    def consumers(self, node_id: int) -> set[int]:
        """Output slot indices of ``node_id`` that some other node reads."""
        return {link.output_index for _, _, link in self.edges() if link.source == node_id}


# -- prompt JSON ------------------------------------------------------------


def _is_decimal(text: str) -> bool:
    return text.isascii() and text.isdigit()


def _reject_duplicates(pairs: list[tuple[str, object]]) -> dict:
    seen: dict = {}
    for key, value in pairs:
        if key in seen:
            raise GraphError(f"duplicate key {key!r}")
        seen[key] = value
    return seen


def _decode_input(node_key: str, name: str, raw: object) -> InputValue:
    if isinstance(raw, list):
        if len(raw) != 2 or not isinstance(raw[0], str):
            raise GraphError(f"node {node_key} input {name!r}: link must be [source-id, output-index]")
        src, idx = raw
        if not _is_decimal(src) or isinstance(idx, bool) or not isinstance(idx, int) or idx < 0:
            raise GraphError(f"node {node_key} input {name!r}: malformed link {raw!r}")
        return LinkRef(int(src), idx)
    if raw is None or isinstance(raw, dict) or not is_literal(raw):
        raise GraphError(f"node {node_key} input {name!r}: unsupported value {raw!r}")
    return raw


def graph_from_dict(data: Mapping, *, check_acyclic: bool = True) -> WorkflowGraph:
    if not isinstance(data, Mapping):
        raise GraphError("prompt JSON must be an object")
    nodes: dict[int, NodeInstance] = {}
    for key, body in data.items():
        if not isinstance(key, str) or not _is_decimal(key) or int(key) < 1:
            raise GraphError(f"node key {key!r} is not a positive integer")
        if int(key) in nodes:
            raise GraphError(f"duplicate node key {key!r}")
        if not isinstance(body, Mapping) or not isinstance(body.get("class_type"), str):
            raise GraphError(f"node {key}: missing class_type")
        raw_inputs = body.get("inputs", {})
        if not isinstance(raw_inputs, Mapping):
            raise GraphError(f"node {key}: inputs must be an object")
        inputs = {name: _decode_input(key, name, raw) for name, raw in raw_inputs.items()}
        nodes[int(key)] = NodeInstance(body["class_type"], inputs)
    graph = WorkflowGraph(nodes)
    if check_acyclic:
        topo_order(graph)
    return graph


def parse_prompt_json(data: Union[bytes, str], *, check_acyclic: bool = True) -> WorkflowGraph:
    """Decode prompt-JSON. Raises :class:`GraphError` on malformed input, and
    :class:`CycleError` when ``check_acyclic`` is set and links form a cycle."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GraphError(f"input is not UTF-8: {exc}") from exc
    try:
        raw = json.loads(data, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise GraphError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return graph_from_dict(raw, check_acyclic=check_acyclic)


def graph_to_dict(graph: WorkflowGraph) -> dict:
    out = {}
    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        inputs = {
            name: value.to_json() if isinstance(value, LinkRef) else value
            for name, value in node.inputs.items()
        }
        out[str(node_id)] = {"class_type": node.class_name, "inputs": inputs}
    return out


def serialize_prompt_json(graph: WorkflowGraph, *, indent: Optional[int] = None) -> bytes:
    """Canonical encoding: node keys in numeric order, inputs in insertion order."""
    return json.dumps(graph_to_dict(graph), ensure_ascii=False, indent=indent).encode("utf-8")


def graph_equal(a: WorkflowGraph, b: WorkflowGraph) -> bool:
    if set(a.nodes) != set(b.nodes):
        return False
    for node_id, left in a.nodes.items():
        right = b.nodes[node_id]
        if left.class_name != right.class_name or set(left.inputs) != set(right.inputs):
            return False
        if not all(values_equal(v, right.inputs[k]) for k, v in left.inputs.items()):
            return False
    return True


# -- ordering ---------------------------------------------------------------


def _find_cycle_node(graph: WorkflowGraph, remaining: set[int]) -> int:
    # every remaining node has a remaining predecessor; walking back must revisit
    node = min(remaining)
    seen: set[int] = set()
    while node not in seen:
        seen.add(node)
        node = min(
            link.source
            for _, link in graph.nodes[node].links()
            if link.source in remaining
        )
    return node


def topo_order(graph: WorkflowGraph) -> list[int]:
    """Kahn's algorithm; among ready nodes the smallest id goes first.

    Links to missing nodes are ignored here (``validate`` reports them).
    """
    indegree = {node_id: 0 for node_id in graph.nodes}
    children: dict[int, list[int]] = {node_id: [] for node_id in graph.nodes}
    for target, _, link in graph.edges():
        if link.source in graph.nodes:
            indegree[target] += 1
            children[link.source].append(target)
    ready = [n for n, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for child in children[node]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, child)
    if len(order) != len(graph.nodes):
        raise CycleError(_find_cycle_node(graph, set(graph.nodes) - set(order)))
    return order


# -- validation -------------------------------------------------------------

UNKNOWN_CLASS = "unknown-class"
MISSING_INPUT = "missing-required-input"
UNKNOWN_INPUT = "unknown-input"
DANGLING_LINK = "dangling-link"
SLOT_OUT_OF_RANGE = "slot-out-of-range"
TYPE_MISMATCH = "type-mismatch"
LITERAL_KIND_MISMATCH = "literal-kind-mismatch"
CYCLE = "cycle"

ISSUE_CODES = (
    UNKNOWN_CLASS,
    MISSING_INPUT,
    UNKNOWN_INPUT,
    DANGLING_LINK,
    SLOT_OUT_OF_RANGE,
    TYPE_MISMATCH,
    LITERAL_KIND_MISMATCH,
    CYCLE,
)


@dataclass(frozen=True)
class Issue:
    severity: str
    code: str
    message: str
    node: Optional[int] = None
    input: Optional[str] = None

    def __str__(self) -> str:
        where = ""
        if self.node is not None:
            where = f"node {self.node}"
            if self.input is not None:
                where += f" input {self.input!r}"
            where += ": "
        return f"{self.severity} [{self.code}] {where}{self.message}"


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[Issue, ...] = ()

    @property
    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "error"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> set[str]:
        return {i.code for i in self.issues}

    def render(self) -> str:
        lines = [str(issue) for issue in self.issues]
        n = len(self.errors)
        lines.append(f"{n} error{'s' if n != 1 else ''}")
        return "\n".join(lines)


def validate(graph: WorkflowGraph, registry: "NodeSchemaRegistry") -> ValidationReport:
    """Check the graph against node signatures. Never raises; every problem
    found becomes an issue in the report."""
    from .registry import SchemaError, types_compatible

    issues: list[Issue] = []

    def error(code: str, message: str, node: Optional[int] = None, name: Optional[str] = None) -> None:
        issues.append(Issue("error", code, message, node, name))

    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        schema = registry.get(node.class_name)
        if schema is None:
            error(UNKNOWN_CLASS, f"unknown node class {node.class_name!r}", node_id)
            continue
        declared = schema.input_map()
        for spec in schema.inputs:
            if spec.required and spec.name not in node.inputs:
                error(MISSING_INPUT, f"required input missing for {node.class_name}", node_id, spec.name)
        for name, value in node.inputs.items():
            spec = declared.get(name)
            if spec is None:
                error(UNKNOWN_INPUT, f"{node.class_name} has no input named {name!r}", node_id, name)
                continue
            if not isinstance(value, LinkRef):
                if spec.kind != "widget":
                    error(LITERAL_KIND_MISMATCH, f"expects a {spec.type_name} connection, got literal {value!r}", node_id, name)
                    continue
                try:
                    spec.coerce(value)
                except SchemaError as exc:
                    error(LITERAL_KIND_MISMATCH, str(exc), node_id, name)
                continue
            source = graph.nodes.get(value.source)
            if source is None:
                error(DANGLING_LINK, f"link source node {value.source} does not exist", node_id, name)
                continue
            source_schema = registry.get(source.class_name)
            if source_schema is None:
                continue  # reported on the source node itself
            if value.output_index >= len(source_schema.outputs):
                error(
                    SLOT_OUT_OF_RANGE,
                    f"node {value.source} ({source.class_name}) has {len(source_schema.outputs)} outputs, "
                    f"slot {value.output_index} requested",
                    node_id,
                    name,
                )
                continue
            out_type = source_schema.outputs[value.output_index].type_name
            if not types_compatible(out_type, spec.type_name):
                error(TYPE_MISMATCH, f"expects {spec.type_name}, linked to {out_type} output of node {value.source}", node_id, name)

    try:
        topo_order(graph)
    except CycleError as exc:
        error(CYCLE, "links form a cycle", exc.node)
    return ValidationReport(tuple(issues))

