"""Regenerate the replay recordings under tests/fixtures.

The design trajectory is recorded from the hand-written answers in
tests/fixtures/trajectory/answers, plus three variants whose planner breaks
one rule in a row before recovering. The bench recording comes from a dry
run of every strategy over the 5-task fixture.

    python3 scripts/record_fixtures.py
"""

from __future__ import annotations

import argparse
import shutil
import tempfile
from pathlib import Path

from nodeflow.cli import _agent_config, main as cli_main
from nodeflow.config import demo_path, load_config
from nodeflow.knowledge import HashEmbedder, ingest_corpus
from nodeflow.llm import LLMClient, RecordingProvider, ScriptedProvider
from nodeflow.agent import run_episode
from nodeflow.registry import ingest_docs

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "tests" / "fixtures"
TRAJECTORY = FIXTURES / "trajectory"


def plan(action: str) -> str:
    return f"<thought>I will start from a reference workflow.</thought>\n<plan>Step 1: {action}</plan>\n<action>{action}</action>"


# Each variant replaces the planner's first answer at some step with a rule
# breaking one, given twice (the reprompt repeats it), so the step is
# recorded as a violation and the remaining steps follow the original run.
VARIANTS = {
    "combine-first": (1, plan('combine(name="video_frame_interpolation")')),
    "adapt-twice": (3, plan('adapt(prompt="Make the fish more colorful.")')),
    "unknown-name": (1, plan('load(name="fish_video_generator")')),
}


def answers() -> list[str]:
    return [p.read_text(encoding="utf-8") for p in sorted((TRAJECTORY / "answers").glob("*.txt"))]


def variant_script(step: int, bad: str) -> list[str]:
    items = answers()
    # answers: analysis, plan 1, plan 2, adapt, plan 3, combine, plan 4
    plan_positions = [1, 2, 4, 6]
    at = plan_positions[step - 1]
    return items[:at] + [bad, bad] + items[at:]


def record_episode(script: list[str], out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    cfg = load_config(env={})
    registry = ingest_docs(demo_path("nodes"))
    store = ingest_corpus(demo_path("curriculum"), registry)
    instruction = (TRAJECTORY / "instruction.txt").read_text(encoding="utf-8").strip()
    client = LLMClient(RecordingProvider(ScriptedProvider(script), out / "llm"))
    result = run_episode(instruction, store, registry, client, _agent_config(cfg), HashEmbedder())
    steps = ", ".join(f"{s.action_text} [{s.status}]" for s in result.steps)
    print(f"{out.relative_to(ROOT)}: {result.terminated_by}: {steps}")


def record_bench(out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    with tempfile.TemporaryDirectory() as tmp:
        code = cli_main(["bench", "--tasks", str(FIXTURES / "bench" / "tasks.jsonl"), "--dry-run",
                         "--record", str(out), "--out", tmp, "--parallelism", "1"])
    if code != 0:
        raise SystemExit(f"bench recording failed with exit code {code}")


def main() -> None:
    argparse.ArgumentParser(description=__doc__).parse_args()
    record_episode(answers(), TRAJECTORY / "replay")
    for name, (step, bad) in VARIANTS.items():
        record_episode(variant_script(step, bad), TRAJECTORY / "variants" / name)
    record_bench(FIXTURES / "bench" / "replay")


if __name__ == "__main__":
    main()
