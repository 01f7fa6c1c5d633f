import pytest
from hypothesis import given, settings, strategies as st

from nodeflow.codec import (
    CodeError,
    EmitError,
    LowerError,
    NestedCallError,
    PositionalArgumentError,
    UnboundVariableError,
    DuplicateBindingError,
    Var,
    canonicalize,
    code_to_graph,
    emit_code,
    lower,
    parse_code,
    snake_case,
)
from nodeflow.graph import LinkRef, NodeInstance, WorkflowGraph, graph_equal, topo_order, validate
from nodeflow.registry import NodeSchemaRegistry, parse_doc

TOY_DOCS = [
    "## NAME\nSrc\n## INPUTS\nname : widget : STRING : required\n## OUTPUTS\nFirst : TA\nSecond Thing : TB\n",
    "## NAME\nMid\n## INPUTS\nx : connection : TA : required\ny : connection : TB\np : widget : INT : default=0\n"
    "f : widget : FLOAT : default=1.0\n## OUTPUTS\nA : TA\n",
    "## NAME\nSink Node\n## OUTPUT_NODE\ntrue\n## INPUTS\nx : connection : TA : required\n"
    "flag : widget : BOOLEAN : default=false\n## OUTPUTS\n",
]


@pytest.fixture(scope="module")
def toy():
    return NodeSchemaRegistry({s.class_name: s for s in map(parse_doc, TOY_DOCS)})


def test_emit_matches_reference_statements(store, registry):
    lines = store.get("text_to_video").code.splitlines()
    assert 'model_15, clip_vision_15, vae_15 = ImageOnlyCheckpointLoader(ckpt_name="""svd_xt_1_1.safetensors""")' in lines
    assert "_ = PreviewImage(images=image_20)" in lines


def test_emit_empty_graph(registry):
    assert emit_code(WorkflowGraph({}), registry) == ""


def test_emit_refuses_invalid_graph(registry):
    with pytest.raises(EmitError):
        emit_code(WorkflowGraph({1: NodeInstance("NoSuchNode", {})}), registry)


def test_parse_recovers_and_assigns_ids():
    script = parse_code(
        'model_15, clip_vision_15, vae_15 = ImageOnlyCheckpointLoader(ckpt_name="""svd_xt_1_1.safetensors""")\n'
        "_ = PreviewImage(images=vae_15)\n"
    )
    assert [s.node_id for s in script.statements] == [15, 16]
    assert script.statements[0].args == (("ckpt_name", "svd_xt_1_1.safetensors"),)
    assert script.statements[1].args == (("images", Var("vae_15")),)


@pytest.mark.parametrize("text, error", [
    ("x = A(B())", NestedCallError),
    ("y = A(k=z)", UnboundVariableError),
    ("x = A(1)", PositionalArgumentError),
    ("x = A()\nx = B()", DuplicateBindingError),
    ("x = A(k=1 j=2)", CodeError),
    ("x = A(k=1", CodeError),
])
def test_parse_errors(text, error):
    with pytest.raises(error) as exc:
        parse_code(text)
    assert exc.value.line >= 1


def test_parse_reports_position():
    with pytest.raises(CodeError) as exc:
        parse_code('a_1 = Src(name="x")\nb_2 = Mid(x=a_1, p=$)')
    assert exc.value.line == 2 and exc.value.column > 1


def test_lower_slot_positions(toy):
    g = code_to_graph('a_1, b_1 = Src(name="n")\n_ = Mid(x=a_1, y=b_1)', toy)
    assert g.nodes[2].inputs == {"x": LinkRef(1, 0), "y": LinkRef(1, 1)}


def test_lower_single_statement(toy):
    g = code_to_graph('a_1, b_1 = Src(name="n")', toy)
    assert len(g) == 1 and g.link_count() == 0


def test_lower_errors(toy):
    with pytest.raises(LowerError):
        code_to_graph('a_1 = Src(name="n")', toy)  # two outputs, one variable
    with pytest.raises(LowerError):
        code_to_graph("a_1 = Nope()", toy)


def test_class_names_with_spaces_use_aliases(toy):
    g = code_to_graph('a_1, b_1 = Src(name="n")\n_ = Sink_Node(x=a_1)', toy)
    assert g.nodes[2].class_name == "Sink Node"
    assert emit_code(g, toy).splitlines()[1] == "_ = Sink_Node(x=first_1)"


def test_variable_names_follow_slots():
    assert snake_case("CLIP_VISION") == "clip_vision"
    assert snake_case("Second Thing") == "second_thing"
    assert snake_case("LATENT") == "latent"


def test_liberal_strings_canonical_output(toy):
    text = "a_1, b_1 = Src(name='it\\'s')\n_ = Sink_Node(x=a_1, flag=True)"
    out = canonicalize(text, toy)
    assert out.splitlines()[0] == 'first_1, second_thing_1 = Src(name="""it\'s""")'
    assert canonicalize(out, toy) == out


def test_corpus_roundtrip_and_fixpoint(store, registry):
    for wf in store.workflows:
        script = parse_code(wf.code)
        g = lower(script, registry)
        assert graph_equal(g, wf.graph), wf.name
        assert emit_code(g, registry) == wf.code
        assert len(script) == len(wf.graph)
        assert script.variable_argument_count() == wf.graph.link_count()


def test_final_trajectory_workflow_counts(registry, fixtures_dir):
    text = (fixtures_dir / "trajectory" / "final_workflow.py").read_text()
    script = parse_code(text)
    g = lower(script, registry)
    assert len(script) == 15 == len(g)
    assert g.link_count() == script.variable_argument_count()
    assert validate(g, registry).ok


texts = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=20)


@st.composite
def toy_graphs(draw):
    nodes = {}
    ta, tb = [], []  # available (node, slot) pairs by type
    next_id = draw(st.integers(1, 50))
    for _ in range(draw(st.integers(1, 8))):
        kinds = ["Src"] + (["Mid", "Sink Node"] if ta else [])
        kind = draw(st.sampled_from(kinds))
        nid = next_id
        next_id += draw(st.integers(1, 5))
        if kind == "Src":
            nodes[nid] = NodeInstance("Src", {"name": draw(texts)})
            ta.append(LinkRef(nid, 0))
            tb.append(LinkRef(nid, 1))
        elif kind == "Mid":
            inputs = {"x": draw(st.sampled_from(ta))}
            if tb and draw(st.booleans()):
                inputs["y"] = draw(st.sampled_from(tb))
            if draw(st.booleans()):
                inputs["p"] = draw(st.integers(-10**6, 10**6))
            if draw(st.booleans()):
                inputs["f"] = draw(st.floats(allow_nan=False, allow_infinity=False))
            nodes[nid] = NodeInstance("Mid", inputs)
            ta.append(LinkRef(nid, 0))
        else:
            nodes[nid] = NodeInstance("Sink Node", {"x": draw(st.sampled_from(ta)), "flag": draw(st.booleans())})
    return WorkflowGraph(nodes)


def renumber_discards(g, toy):
    """Expected graph after a round trip: nodes without outputs are written
    as ``_`` and come back with fresh ids (max id + 1, in statement order)."""
    order = parse_code(emit_code(g, toy)).statements
    discards = [n for n in topo_order(g) if not toy.lookup(g.nodes[n].class_name).outputs]
    kept = [n for n in g.nodes if n not in discards]
    fresh = iter(range(max(kept, default=0) + 1, 10**9))
    mapping = {n: n for n in kept}
    mapping.update({n: next(fresh) for n in discards})
    assert [s.node_id for s in order] == [mapping[n] for n in topo_order(g)]
    return WorkflowGraph({mapping[n]: node for n, node in g.nodes.items()})


@settings(max_examples=300, deadline=None)
@given(toy_graphs())
def test_emit_parse_lower_roundtrip(toy, g):
    assert validate(g, toy).ok
    code = emit_code(g, toy)
    back = code_to_graph(code, toy)
    assert graph_equal(back, renumber_discards(g, toy))
    once = emit_code(back, toy)
    assert canonicalize(once, toy) == once
    assert len(parse_code(code)) == len(g)


def test_discard_ids_survive_when_they_follow_the_fresh_rule(toy):
    g = WorkflowGraph({
        4: NodeInstance("Src", {"name": "a"}),
        5: NodeInstance("Sink Node", {"x": LinkRef(4, 0)}),
        6: NodeInstance("Sink Node", {"x": LinkRef(4, 0)}),
    })
    assert graph_equal(code_to_graph(emit_code(g, toy), toy), g)
    moved = WorkflowGraph({4: g.nodes[4], 9: g.nodes[5]})
    assert sorted(code_to_graph(emit_code(moved, toy), toy).nodes) == [4, 5]


@settings(max_examples=100, deadline=None)
@given(toy_graphs())
def test_arguments_are_bound_before_use(toy, g):
    bound = set()
    for stmt in parse_code(emit_code(g, toy)).statements:
        for _, value in stmt.args:
            if isinstance(value, Var):
                assert value.name in bound
        bound.update(t for t in stmt.targets if t != "_")
