"""Element-list rendering: a plain-language listing of nodes and links.

Only used for representation ablations. The layout is one paragraph per
node (in topological order) followed by one line per link::

    Node 4 is a CheckpointLoaderSimple.
    - ckpt_name: "dreamshaper_8.safetensors"

    Node 3 is a KSampler.
    - seed: 5

    Connect output 0 (MODEL) of node 4 to input "model" of node 3.

Literal values are written as JSON so the rendering can be read back.
"""

from __future__ import annotations

import json
import re

from .codec import EmitError
from .graph import GraphError, LinkRef, NodeInstance, WorkflowGraph, is_literal, topo_order, validate
from .registry import NodeSchemaRegistry

_NODE_LINE = re.compile(r"^Node (\d+) is a (.+)\.$")
_PARAM_LINE = re.compile(r"^- ([^:]+): (.*)$")
_LINK_LINE = re.compile(r'^Connect output (\d+) \(([^)]*)\) of node (\d+) to input "([^"]+)" of node (\d+)\.$')


def emit_element_list(graph: WorkflowGraph, registry: NodeSchemaRegistry) -> str:
    report = validate(graph, registry)
    if not report.ok:
        raise EmitError("cannot render an invalid workflow:\n" + report.render(), report)
    order = topo_order(graph)
    blocks = []
    links = []
    for node_id in order:
        node = graph.nodes[node_id]
        lines = [f"Node {node_id} is a {node.class_name}."]
        for name, value in node.inputs.items():
            if isinstance(value, LinkRef):
                source = registry.lookup(graph.nodes[value.source].class_name)
                out_type = source.outputs[value.output_index].type_name
                links.append(
                    f"Connect output {value.output_index} ({out_type}) of node {value.source} "
                    f'to input "{name}" of node {node_id}.'
                )
            else:
                lines.append(f"- {name}: {json.dumps(value, ensure_ascii=False)}")
        blocks.append("\n".join(lines))
    if links:
        blocks.append("\n".join(links))
    return "\n\n".join(blocks)


def read_element_list(text: str) -> WorkflowGraph:
    """Strict reader for :func:`emit_element_list` output (testing aid)."""
    nodes: dict[int, tuple[str, dict]] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            current = None
            continue
        m = _NODE_LINE.match(line)
        if m:
            node_id = int(m.group(1))
            if node_id in nodes:
                raise GraphError(f"line {lineno}: node {node_id} listed twice")
            current = node_id
            nodes[node_id] = (m.group(2), {})
            continue
        m = _PARAM_LINE.match(line)
        if m and current is not None:
            value = json.loads(m.group(2))
            if not is_literal(value):
                raise GraphError(f"line {lineno}: {m.group(2)!r} is not a literal")
            nodes[current][1][m.group(1)] = value
            continue
        m = _LINK_LINE.match(line)
        if m:
            slot, _type, source, name, target = m.groups()
            if int(target) not in nodes:
                raise GraphError(f"line {lineno}: link into unknown node {target}")
            nodes[int(target)][1][name] = LinkRef(int(source), int(slot))
            continue
        raise GraphError(f"line {lineno}: cannot read {line!r}")
    return WorkflowGraph({nid: NodeInstance(cls, inputs) for nid, (cls, inputs) in nodes.items()})
