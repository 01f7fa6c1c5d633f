"""Design, convert, validate and benchmark node-graph generative workflows."""

from .codec import code_to_graph, emit_code, lower, parse_code
from .graph import (
    LinkRef,
    NodeInstance,
    ValidationReport,
    WorkflowGraph,
    graph_equal,
    parse_prompt_json,
    serialize_prompt_json,
    topo_order,
    validate,
)
from .registry import NodeSchemaRegistry, ingest_docs

__all__ = [
    "LinkRef",
    "NodeInstance",
    "NodeSchemaRegistry",
    "ValidationReport",
    "WorkflowGraph",
    "code_to_graph",
    "emit_code",
    "graph_equal",
    "ingest_docs",
    "lower",
    "parse_code",
    "parse_prompt_json",
    "serialize_prompt_json",
    "topo_order",
    "validate",
]
