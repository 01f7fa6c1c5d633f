"""End-to-end acceptance checks. Each test tags itself with a criterion
number; the terminal summary prints one PASS/FAIL line per criterion."""

import json
import math
import random
import time
from dataclasses import replace
from pathlib import Path

import pytest

from nodeflow.agent import AgentConfig, AgentMemory, TaskContext, Workspace, apply_adapt
from nodeflow.bench import aggregate, agreement_stats
from nodeflow.cli import main
from nodeflow.codec import code_to_graph, emit_code, lower, parse_code
from nodeflow.config import demo_path
from nodeflow.execute import sample_indices
from nodeflow.graph import LinkRef, NodeInstance, WorkflowGraph, graph_equal, parse_prompt_json, topo_order, validate
from nodeflow.knowledge import HashEmbedder, KnowledgeStore, retrieve
from nodeflow.llm import LLMClient, ScriptedProvider

BENCH_DIGEST = "93beebb6471dad6dfb60d406a897c91b35174beae5a0fcf7c753948084ae2992"


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("OPENAI_API_KEY", "NODEFLOW_API_KEY"):
        monkeypatch.delenv(name, raising=False)


def corpus_files():
    return sorted(Path(demo_path("curriculum")).glob("*/workflow.json"))


# 1 -----------------------------------------------------------------------


def test_codec_roundtrip_over_corpus(record_property, registry):
    record_property("criterion", (1, "code roundtrip and fixpoint over the curriculum corpus"))
    start = time.perf_counter()
    files = corpus_files()
    assert len(files) >= 20
    for path in files:
        graph = parse_prompt_json(path.read_bytes())
        code = emit_code(graph, registry)
        back = lower(parse_code(code), registry)
        assert graph_equal(back, graph), path.parent.name
        assert emit_code(back, registry) == code, path.parent.name
    assert time.perf_counter() - start < 5


# 2 -----------------------------------------------------------------------


def descendants(graph, node_id):
    found, stack = set(), [node_id]
    while stack:
        current = stack.pop()
        for consumer, _, ref in graph.edges():
            if ref.source == current and consumer not in found:
                found.add(consumer)
                stack.append(consumer)
    return found


def with_inputs(graph, node_id, inputs):
    nodes = dict(graph.nodes)
    nodes[node_id] = NodeInstance(graph.nodes[node_id].class_name, inputs)
    return WorkflowGraph(nodes)


def mutants(graph, registry):
    """Yield (expected code, mutant) for every applicable mutation site."""
    missing_id = max(graph.nodes) + 100
    for nid, node in graph.nodes.items():
        schema = registry.lookup(node.class_name)
        nodes = dict(graph.nodes)
        nodes[nid] = NodeInstance("NoSuchNode", node.inputs)
        yield "unknown-class", WorkflowGraph(nodes)
        yield "unknown-input", with_inputs(graph, nid, {**node.inputs, "no_such_input": 1})
        for spec in schema.inputs:
            if spec.required and spec.name in node.inputs:
                yield "missing-required-input", with_inputs(graph, nid, {k: v for k, v in node.inputs.items() if k != spec.name})
        below = descendants(graph, nid)
        for name, ref in node.links():
            yield "dangling-link", with_inputs(graph, nid, {**node.inputs, name: LinkRef(missing_id, 0)})
            slots = len(registry.lookup(graph.nodes[ref.source].class_name).outputs)
            yield "slot-out-of-range", with_inputs(graph, nid, {**node.inputs, name: LinkRef(ref.source, slots)})
            want = schema.input_map()[name].type_name
            for other in sorted(set(graph.nodes) - below - {nid}):
                outputs = registry.lookup(graph.nodes[other].class_name).outputs
                slot = next((i for i, o in enumerate(outputs) if "*" not in (o.type_name, want) and o.type_name != want), None)
                if slot is not None:
                    yield "type-mismatch", with_inputs(graph, nid, {**node.inputs, name: LinkRef(other, slot)})
                    break
            for loop in sorted(below):
                if registry.lookup(graph.nodes[loop].class_name).outputs:
                    yield "cycle", with_inputs(graph, nid, {**node.inputs, name: LinkRef(loop, 0)})
                    break


def test_validator_kills_every_mutant(record_property, store, registry):
    record_property("criterion", (2, "validator catches every injected mutant, no false positives"))
    start = time.perf_counter()
    killed = {}
    for wf in store.workflows:
        assert validate(wf.graph, registry).ok, wf.name
        for code, mutant in mutants(wf.graph, registry):
            report = validate(mutant, registry)
            assert code in {i.code for i in report.errors}, (wf.name, code, report.render())
            killed[code] = killed.get(code, 0) + 1
    assert set(killed) == {"unknown-class", "missing-required-input", "unknown-input", "dangling-link",
                           "slot-out-of-range", "type-mismatch", "cycle"}
    assert time.perf_counter() - start < 10


# 3 -----------------------------------------------------------------------


def random_dag(rnd):
    n = rnd.randint(1, 30)
    ids = rnd.sample(range(1, 1000), n)
    rank = ids[:]
    rnd.shuffle(rank)
    nodes = {}
    edges = []
    for pos, nid in enumerate(rank):
        sources = [s for s in rank[:pos] if rnd.random() < 0.15]
        edges += [(s, nid) for s in sources]
        nodes[nid] = NodeInstance("X", {f"in{i}": LinkRef(s, 0) for i, s in enumerate(sources)})
    return WorkflowGraph(nodes), edges


def test_topological_order_is_deterministic(record_property):
    record_property("criterion", (3, "topological order over 1000 random DAGs"))
    start = time.perf_counter()
    rnd = random.Random(2024)
    for _ in range(1000):
        graph, edges = random_dag(rnd)
        order = topo_order(graph)
        assert sorted(order) == sorted(graph.nodes)
        position = {nid: i for i, nid in enumerate(order)}
        assert all(position[s] < position[t] for s, t in edges)
        assert topo_order(graph) == order and topo_order(graph) == order
    assert time.perf_counter() - start < 5


# 4 -----------------------------------------------------------------------


WORDS = ("video image upscale interpolate frames style depth pose face mask portrait smooth motion "
         "animate sketch colour light").split()


def test_retrieval_matches_brute_force(record_property, store):
    record_property("criterion", (4, "retrieval equals brute-force cosine ranking"))
    start = time.perf_counter()
    rnd = random.Random(7)
    base = store.workflows
    items = []
    for i in range(20):
        # every fourth item repeats the previous text so exact score ties occur
        text = items[-1].function if i % 4 == 3 else " ".join(rnd.sample(WORDS, 4))
        items.append(replace(base[i % len(base)], name=f"item_{19 - i:02d}", function=text, principle="notes"))
    small = KnowledgeStore(tuple(items))
    embedder = HashEmbedder()
    vectors = {w.name: embedder.embed_batch([w.retrieval_text])[0] for w in items}
    for _ in range(100):
        query = " ".join(rnd.sample(WORDS, rnd.randint(1, 5)))
        q = embedder.embed_batch([query])[0]
        scored = []
        for w in items:
            v = vectors[w.name]
            score = math.fsum(a * b for a, b in zip(q, v)) / math.sqrt(math.fsum(a * a for a in q) * math.fsum(b * b for b in v))
            scored.append((round(-score, 12), w.name))
        k = rnd.randint(1, 20)
        expected = [name for _, name in sorted(scored)[:k]]
        assert [h.workflow.name for h in retrieve(small, query, k, embedder)] == expected, query
    assert time.perf_counter() - start < 5


# 5 -----------------------------------------------------------------------


def run_agent(replay_dir, out, fixtures_dir, capsys):
    instruction = fixtures_dir / "trajectory" / "instruction.txt"
    code = main(["agent", "--instruction-file", str(instruction), "--replay", str(replay_dir), "--out", str(out)])
    capsys.readouterr()
    return code, json.loads((out / "episode.json").read_text())


VARIANT_RULES = {"combine-first": (1, 1), "adapt-twice": (3, 3), "unknown-name": (1, 2)}


def test_recorded_trajectory_replays(record_property, registry, fixtures_dir, tmp_path, capsys):
    record_property("criterion", (5, "recorded design trajectory replays with rules enforced"))
    trajectory = fixtures_dir / "trajectory"
    code, episode = run_agent(trajectory / "replay", tmp_path / "a", fixtures_dir, capsys)
    assert code == 0
    assert [s["action"].split("(")[0] for s in episode["steps"]] == ["load", "adapt", "combine", "finish"]
    assert all(s["status"] == "applied" for s in episode["steps"])

    saved = (tmp_path / "a" / "workflow.py").read_text()
    assert saved == (trajectory / "final_workflow.py").read_text()
    assert len(parse_code(saved)) == 15  # 13 statements of the video workflow + interpolation + second video sink
    graph = code_to_graph(saved, registry)
    assert validate(graph, registry).ok
    rife = [s for s in saved.splitlines() if "= RIFE_VFI(" in s]
    assert len(rife) == 1 and "multiplier=3" in rife[0]
    assert graph_equal(graph, parse_prompt_json((tmp_path / "a" / "workflow.json").read_text()))

    again_code, again = run_agent(trajectory / "replay", tmp_path / "b", fixtures_dir, capsys)
    assert again_code == 0
    assert again["transcript_digest"] == episode["transcript_digest"]
    assert (tmp_path / "b" / "transcript.jsonl").read_bytes() == (tmp_path / "a" / "transcript.jsonl").read_bytes()

    for name, (step, rule) in VARIANT_RULES.items():
        code, variant = run_agent(trajectory / "variants" / name, tmp_path / name, fixtures_dir, capsys)
        assert code == 0, name
        statuses = [s["status"] for s in variant["steps"]]
        assert statuses[step - 1] == "violation", (name, statuses)
        assert f"rule {rule}:" in variant["steps"][step - 1]["note"], name
        assert statuses.count("violation") == 1
        assert variant["code"] == episode["code"], name


# 6 -----------------------------------------------------------------------


def edit_reply(code):
    return f"<explanation>e</explanation>\n<code>\n{code}\n</code>\n<function>f</function>\n<principle>p</principle>"


def test_refine_gate(record_property, store, registry):
    record_property("criterion", (6, "refine gate keeps invalid candidates out of the workspace"))
    wf = store.get("text_to_image")
    fixed = wf.code.replace("steps=20", "steps=30")
    broken = fixed.replace("EmptyLatentImage(width=512, ", "EmptyLatentImage(")
    task = TaskContext("Draw a cat.", "text to image")

    def fresh():
        return AgentMemory(reference=[wf], workspace=Workspace(wf.code, wf.function, wf.principle))

    for attempts in (1, 2, 3):
        config = AgentConfig(refine_attempts=attempts)
        # faulty then fixed: only the repaired candidate reaches the workspace
        memory = fresh()
        client = LLMClient(ScriptedProvider([edit_reply(broken), edit_reply(fixed)]), sleep=lambda s: None)
        assert apply_adapt(memory, "more steps", "plan", task, client, registry, config).ok
        assert memory.workspace.code == fixed
        assert validate(code_to_graph(memory.workspace.code, registry), registry).ok

        # persistently faulty: exactly `attempts` refiner calls, workspace untouched
        memory = fresh()
        before = memory.workspace
        provider = ScriptedProvider([edit_reply(broken)] * (attempts + 1))
        client = LLMClient(provider, sleep=lambda s: None)
        outcome = apply_adapt(memory, "more steps", "plan", task, client, registry, config)
        assert not outcome.ok
        refines = [json.loads(line) for line in client.transcript.lines if '"purpose": "refine"' in line]
        assert len(refines) == attempts
        assert memory.workspace == before and memory.workspace.code == wf.code


# 7 -----------------------------------------------------------------------


def test_metrics_arithmetic(record_property):
    record_property("criterion", (7, "pass/resolve aggregation and formatting"))
    start = time.perf_counter()
    rows = [{"strategy": "comfyagent", "task_id": f"t{i:03d}", "category": ("vanilla", "complex", "creative")[i % 3],
             "backend": "simulated", "passed": i < 112, "resolved": i < 65} for i in range(200)]
    random.Random(1).shuffle(rows)
    report = aggregate(rows)
    line = next(l for l in report.to_markdown().splitlines() if l.startswith("| comfyagent"))
    assert line.endswith("| 56.0 | 32.5 |")

    rnd = random.Random(5)
    for _ in range(1000):
        log = [{"strategy": rnd.choice(["zero-shot", "rag", "comfyagent"]), "task_id": f"t{rnd.randint(0, 40)}",
                "category": rnd.choice(["vanilla", "complex", "creative"]), "passed": rnd.random() < 0.5,
                "resolved": rnd.random() < 0.5} for _ in range(rnd.randint(0, 40))]
        for cell in aggregate(log).cells.values():
            assert cell.resolved <= cell.passed <= cell.tasks
            assert cell.resolve_rate <= cell.pass_rate
    assert time.perf_counter() - start < 2


# 8 -----------------------------------------------------------------------


def test_frame_sampling(record_property):
    record_property("criterion", (8, "uniform frame sampling"))
    start = time.perf_counter()
    for n in range(1, 101):
        picked = sample_indices(n, 10)
        assert len(picked) == min(n, 10)
        assert all(a < b for a, b in zip(picked, picked[1:]))
        assert picked[0] == 0 and picked[-1] == n - 1
    assert sample_indices(30, 10) == [0, 3, 6, 10, 13, 16, 19, 23, 26, 29]
    assert time.perf_counter() - start < 1


# 9 -----------------------------------------------------------------------

# (x, y, tau-b, pearson r, spearman rho), each worked out by hand from the pair
# counts and deviation sums
HAND_CASES = [
    ([1, 2, 3, 4], [1, 3, 2, 4], 4 / 6, 4 / 5, 4 / 5),
    ([1, 2, 3, 4, 5], [2, 1, 4, 3, 5], 6 / 10, 8 / 10, 8 / 10),
    ([1, 2, 3, 4, 5], [1, 2, 3, 5, 4], 8 / 10, 9 / 10, 9 / 10),
    ([1, 2, 3, 4, 5], [5, 4, 3, 2, 1], -1.0, -1.0, -1.0),
    ([1, 2, 3, 4], [1, 1, 2, 2], 4 / math.sqrt(24), 2 / math.sqrt(5), 2 / math.sqrt(5)),
]


def test_agreement_statistics(record_property):
    record_property("criterion", (9, "judge agreement statistics"))
    start = time.perf_counter()
    for x, y, tau, r, rho in HAND_CASES:
        s = agreement_stats(x, y)
        assert s.kendall_tau == pytest.approx(tau, abs=1e-3)
        assert s.pearson_r == pytest.approx(r, abs=1e-3)
        assert s.spearman_rho == pytest.approx(rho, abs=1e-3)
    s = agreement_stats([0.5, 1.0, 2.0, 7.0], [0.5, 1.0, 2.0, 7.0])
    assert (s.kendall_tau, s.pearson_r, s.spearman_rho) == pytest.approx((1, 1, 1))
    assert time.perf_counter() - start < 1


# 10 ----------------------------------------------------------------------


def test_offline_bench_end_to_end(record_property, fixtures_dir, tmp_path, capsys):
    record_property("criterion", (10, "offline benchmark over every strategy"))
    start = time.perf_counter()
    bench = fixtures_dir / "bench"
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = main(["bench", "--tasks", str(bench / "tasks.jsonl"), "--replay", str(bench / "replay"),
                     "--out", str(out), "--parallelism", "4"])
        printed = capsys.readouterr().out
        assert code == 0
        digests.append(printed.split("report digest ")[1].strip())
        rows = [json.loads(line) for line in (out / "runs.jsonl").read_text().splitlines()]
        assert {r["strategy"] for r in rows} == {"zero-shot", "few-shot", "cot", "cot-sc", "rag", "comfyagent"}
        assert len(rows) == 30
        assert {r["backend"] for r in rows} == {"simulated"}
        assert any(r["passed"] for r in rows if r["strategy"] == "comfyagent")
    assert digests[0] == digests[1] == BENCH_DIGEST
    assert time.perf_counter() - start < 30
