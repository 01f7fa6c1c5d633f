import pytest

from nodeflow.codec import EmitError
from nodeflow.elements import emit_element_list, read_element_list
from nodeflow.graph import GraphError, LinkRef, NodeInstance, WorkflowGraph, graph_equal
from nodeflow.registry import NodeSchemaRegistry, parse_doc

DOCS = [
    "## NAME\nSrc\n## INPUTS\nname : widget : STRING : required\n## OUTPUTS\nOut : T\n",
    "## NAME\nStep\n## INPUTS\nx : connection : T : required\n## OUTPUTS\nOut : T\n",
    "## NAME\nJoin\n## OUTPUT_NODE\ntrue\n## INPUTS\na : connection : T : required\n"
    "b : connection : T : required\n## OUTPUTS\n",
]


@pytest.fixture(scope="module")
def toy():
    return NodeSchemaRegistry({s.class_name: s for s in map(parse_doc, DOCS)})


def diamond():
    return WorkflowGraph({
        1: NodeInstance("Src", {"name": "start"}),
        2: NodeInstance("Step", {"x": LinkRef(1, 0)}),
        3: NodeInstance("Step", {"x": LinkRef(1, 0)}),
        4: NodeInstance("Join", {"a": LinkRef(2, 0), "b": LinkRef(3, 0)}),
    })


def test_single_node_has_no_link_block(toy):
    text = emit_element_list(WorkflowGraph({7: NodeInstance("Src", {"name": "a \"b\""})}), toy)
    assert text == 'Node 7 is a Src.\n- name: "a \\"b\\""'


def test_diamond_layout(toy):
    blocks = emit_element_list(diamond(), toy).split("\n\n")
    assert len(blocks) == 5
    assert [b.splitlines()[0] for b in blocks[:4]] == [
        "Node 1 is a Src.", "Node 2 is a Step.", "Node 3 is a Step.", "Node 4 is a Join."]
    assert blocks[4].splitlines() == [
        'Connect output 0 (T) of node 1 to input "x" of node 2.',
        'Connect output 0 (T) of node 1 to input "x" of node 3.',
        'Connect output 0 (T) of node 2 to input "a" of node 4.',
        'Connect output 0 (T) of node 3 to input "b" of node 4.',
    ]


def test_diamond_reads_back(toy):
    assert graph_equal(read_element_list(emit_element_list(diamond(), toy)), diamond())


def test_refuses_invalid_graph(toy):
    with pytest.raises(EmitError):
        emit_element_list(WorkflowGraph({1: NodeInstance("Step", {})}), toy)


def test_reader_rejects_stray_lines():
    with pytest.raises(GraphError, match="line 2"):
        read_element_list("Node 1 is a Src.\nsomething else")


def test_corpus_reads_back(store, registry):
    for wf in store.workflows:
        assert graph_equal(read_element_list(emit_element_list(wf.graph, registry)), wf.graph), wf.name
