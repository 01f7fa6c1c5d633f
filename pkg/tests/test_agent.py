import pytest

from nodeflow.agent import (
    ActionError,
    Adapt,
    AgentConfig,
    AgentMemory,
    Combine,
    Finish,
    Load,
    Retrieve,
    RuleViolation,
    StepRecord,
    TaskContext,
    Workspace,
    apply_adapt,
    apply_refine,
    check_candidate,
    enforce_rules,
    format_action,
    parse_action,
    render_template,
    run_episode,
)
from nodeflow.codec import code_to_graph
from nodeflow.knowledge import HashEmbedder
from nodeflow.llm import ContextLengthError, LLMClient, ScriptedProvider

TASK = TaskContext("Draw a cat.", "A text-to-image task.")
CONFIG = AgentConfig(refine_attempts=2)


def client_for(items):
    return LLMClient(ScriptedProvider(items), sleep=lambda s: None)


def plan(action):
    return f"<thought>t</thought>\n<plan>p</plan>\n<action>{action}</action>"


def edit_reply(code, function="f", principle="p"):
    return f"<explanation>e</explanation>\n<code>\n{code}\n</code>\n<function>{function}</function>\n<principle>{principle}</principle>"


@pytest.fixture
def t2i(store):
    return store.get("text_to_image")


@pytest.fixture
def broken(t2i):
    # EmptyLatentImage loses its required width
    return t2i.code.replace("EmptyLatentImage(width=512, ", "EmptyLatentImage(")


@pytest.mark.parametrize("text, action", [
    ('load(name="text_to_image")', Load("text_to_image")),
    ('combine(name="video_frame_interpolation")', Combine("video_frame_interpolation")),
    ('adapt(prompt="Change the \\"cat\\" to a dog.")', Adapt('Change the "cat" to a dog.')),
    ("retrieve(prompt='upscale')", Retrieve("upscale")),
    (" finish() ", Finish()),
])
def test_parse_action(text, action):
    assert parse_action(text) == action
    assert parse_action(format_action(action)) == action


@pytest.mark.parametrize("text", [
    "adapt()", "finish(now=1)", "jump(name=\"x\")", "load(\"x\")", "load(prompt=\"x\")", 'load(name="")',
    "load(name=\"x\", name=\"y\")", "just text", "load(name=\"unterminated)",
])
def test_parse_action_errors(text):
    with pytest.raises(ActionError):
        parse_action(text)


def memory_after(*actions, reference=()):
    history = [StepRecord(i, "", "", a, format_action(a), "applied") for i, a in enumerate(actions, 1)]
    return AgentMemory(history=history, reference=list(reference))


def test_rules(store):
    ref = [store.get("text_to_video"), store.get("video_frame_interpolation")]
    fresh = memory_after(reference=ref)
    assert enforce_rules(fresh, Load("text_to_video")) == Load("text_to_video")
    assert enforce_rules(fresh, Retrieve("x")) == Retrieve("x")
    assert enforce_rules(fresh, Combine("text_to_video")).rule == 1
    assert enforce_rules(fresh, Adapt("x")).rule == 1
    assert enforce_rules(fresh, Load("missing")).rule == 2
    loaded = memory_after(Load("text_to_video"), reference=ref)
    assert enforce_rules(loaded, Load("text_to_video")).rule == 1
    assert enforce_rules(loaded, Combine("missing")).rule == 2
    assert enforce_rules(loaded, Adapt("x")) == Adapt("x")
    adapted = memory_after(Load("text_to_video"), Adapt("x"), reference=ref)
    assert enforce_rules(adapted, Adapt("y")).rule == 3
    assert isinstance(enforce_rules(adapted, Combine("video_frame_interpolation")), Combine)


def test_violations_do_not_count_as_history():
    memory = memory_after(Load("a"))
    memory.history[0] = StepRecord(1, "", "", Load("a"), 'load(name="a")', "violation")
    assert isinstance(enforce_rules(memory, Adapt("x")), RuleViolation)


def test_render_template_requires_every_value():
    assert render_template("{instruction}! {other}", instruction="hi") == "hi! {other}"
    with pytest.raises(KeyError):
        render_template("{analysis}")


def test_check_candidate(t2i, broken, registry):
    canonical, error = check_candidate(t2i.code, registry)
    assert canonical == t2i.code and error == ""
    canonical, error = check_candidate(broken, registry)
    assert canonical is None and "missing-required-input" in error
    assert check_candidate("", registry) == (None, "The code contains no statements.")
    assert check_candidate("x = A(B())", registry)[0] is None


def test_refine_skips_valid_candidates(t2i, registry):
    client = client_for([])
    result = apply_refine(Workspace(t2i.code, "f", "p"), TASK, [], client, registry, 2, CONFIG)
    assert result.accepted and result.calls == 0
    assert len(client.transcript) == 0


def test_refine_fixes_on_first_attempt(t2i, broken, registry):
    client = client_for([edit_reply(t2i.code, "fixed")])
    result = apply_refine(Workspace(broken, "f", "p"), TASK, [], client, registry, 2, CONFIG)
    assert result.calls == 1
    assert result.workspace == Workspace(t2i.code, "fixed", "p")
    assert "missing-required-input" in client.provider.requests[0].messages[0].text


@pytest.mark.parametrize("attempts", [0, 1, 2, 4])
def test_refine_gives_up_after_attempts(broken, registry, attempts):
    client = client_for([edit_reply(broken)] * attempts)
    result = apply_refine(Workspace(broken, "f", "p"), TASK, [], client, registry, attempts, CONFIG)
    assert not result.accepted
    assert result.calls == attempts == len(client.provider.requests)


def test_refine_tolerates_missing_code_tag(t2i, broken, registry):
    client = client_for(["no code here", edit_reply(t2i.code)])
    result = apply_refine(Workspace(broken, "f", "p"), TASK, [], client, registry, 2, CONFIG)
    assert result.accepted and result.calls == 2


def loaded_memory(entry):
    return AgentMemory(reference=[entry], workspace=Workspace(entry.code, entry.function, entry.principle))


def test_adapt_applies_valid_edit(t2i, registry):
    memory = loaded_memory(t2i)
    new_code = t2i.code.replace("a photo of a cat wearing a spacesuit inside a spaceship", "a dog")
    client = client_for([edit_reply(new_code, "dog picture")])
    outcome = apply_adapt(memory, "make it a dog", "plan", TASK, client, registry, CONFIG)
    assert outcome.ok
    assert "a dog" in memory.workspace.code and memory.workspace.function == "dog picture"


def test_rejected_edit_leaves_workspace_unchanged(t2i, broken, registry):
    memory = loaded_memory(t2i)
    before = memory.workspace
    client = client_for([edit_reply(broken)] * 3)
    outcome = apply_adapt(memory, "break it", "plan", TASK, client, registry, CONFIG)
    assert not outcome.ok and "2 refinement attempt(s)" in outcome.note
    assert memory.workspace is before
    purposes = [r.split('"purpose": "')[1].split('"')[0] for r in client.transcript.lines]
    assert purposes == ["adapt", "refine", "refine"]


def test_missing_tags_twice_leaves_workspace_unchanged(t2i, registry):
    memory = loaded_memory(t2i)
    before = memory.workspace
    client = client_for(["<code>x</code>", "<code>x</code>"])
    outcome = apply_adapt(memory, "anything", "plan", TASK, client, registry, CONFIG)
    assert not outcome.ok and "<function>" in outcome.note
    assert memory.workspace is before
    assert len(client.provider.requests) == 2


def episode(items, store, registry, **config):
    client = client_for(items)
    return run_episode("Generate an image of a cat from a text description.", store, registry, client, AgentConfig(**config), HashEmbedder()), client


def test_finish_on_empty_workspace_is_fatal(store, registry):
    result, _ = episode(["<analysis>a</analysis>", plan("finish()")], store, registry)
    assert result.terminated_by == "fatal-error"
    assert result.graph is None and result.code is None


def test_budget_exhausted(store, registry):
    result, client = episode(["<analysis>a</analysis>"] + [plan('retrieve(prompt="cat")')] * 5, store, registry)
    assert result.terminated_by == "budget-exhausted"
    assert [s.status for s in result.steps] == ["applied"] * 5
    assert result.graph is None
    assert len(client.provider.requests) == 6


def test_load_then_finish(store, registry):
    result, _ = episode(["<analysis>a</analysis>", plan('load(name="text_to_image")'), plan("finish()")],
                        store, registry)
    assert result.terminated_by == "finish"
    assert result.code == store.get("text_to_image").code
    assert "text_to_image" in result.initial_reference


def test_unparseable_plan_is_reprompted_then_recorded(store, registry):
    items = ["<analysis>a</analysis>", "nonsense", plan("launch()"), plan('load(name="text_to_image")'),
             plan("finish()")]
    result, _ = episode(items, store, registry)
    assert [s.status for s in result.steps] == ["failed", "applied", "applied"]
    assert "unknown action" in result.steps[0].note


def test_context_length_drops_a_reference(store, registry):
    items = ["<analysis>a</analysis>", ContextLengthError("too long"), plan('load(name="text_to_image")'),
             plan("finish()")]
    result, client = episode(items, store, registry)
    dropped = result.initial_reference[-1]
    retried = client.provider.requests[2].messages[0].text
    assert f"- Example: {dropped}" not in retried
    assert f"- Example: {result.initial_reference[0]}" in retried
    assert result.terminated_by == "finish"


def test_trajectory_answers_adapt_then_combine(store, registry, fixtures_dir):
    answers = [p.read_text() for p in sorted((fixtures_dir / "trajectory" / "answers").glob("*.txt"))]
    instruction = (fixtures_dir / "trajectory" / "instruction.txt").read_text().strip()
    client = client_for(answers)
    result = run_episode(instruction, store, registry, client, AgentConfig(), HashEmbedder())
    assert [type(s.action).__name__ for s in result.steps] == ["Load", "Adapt", "Combine", "Finish"]
    nodes = result.graph.nodes.values()
    svd = next(n for n in nodes if n.class_name == "SVD_img2vid_Conditioning")
    assert svd.inputs["video_frames"] == 16
    prompts = [n.inputs["text"] for n in nodes if n.class_name == "CLIPTextEncode"]
    assert any("fish" in p for p in prompts)
    rife = next(n for n in nodes if n.class_name == "RIFE VFI")
    assert rife.inputs["multiplier"] == 3
    assert code_to_graph(result.code, registry) == result.graph
