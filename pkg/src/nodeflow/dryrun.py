"""Offline stand-in for a chat model.

The replies follow the answer formats of the shipped templates closely enough
to drive every code path without a network: the planner loads the first
reference and then finishes, editing steps hand the workspace back unchanged,
baselines copy their first demonstration and the judge always agrees.
"""

from __future__ import annotations

import re

from .llm import CompletionRequest

_CODE = re.compile(r"<code>\n?(.*?)\n?</code>", re.S)
_EXAMPLE = re.compile(r"^- Example: (\S+)$", re.M)


def _section(text: str, heading: str) -> str:
    start = text.find(f"## {heading}\n")
    if start < 0:
        return ""
    end = text.find("\n## ", start + 1)
    return text[start:] if end < 0 else text[start:end]


def _tag(text: str, tag: str) -> str:
    m = re.search(rf"<{tag}>\n?(.*?)\n?</{tag}>", text, re.S)
    return m.group(1) if m else ""


class DryRunProvider:
    model_tag = "dry-run"

    def __init__(self):
        self.calls = 0

    def send(self, request: CompletionRequest) -> str:
        self.calls += 1
        text = request.messages[-1].text
        if "<judgment>" in text:
            return "<analysis>Dry run: the output was not inspected.</analysis>\n<judgment>True</judgment>"
        if '"<action>" tag' in text:
            return self._plan(text)
        if '"<analysis>" tag' in text:
            task = _section(text, "Task").split("the following task:", 1)[-1].strip()
            return f"<analysis>{task}</analysis>"
        workspace = _section(text, "Workspace")
        if workspace and "<code>" in workspace:
            return (
                "<explanation>Dry run: the workspace is returned unchanged.</explanation>\n"
                f"<code>\n{_tag(workspace, 'code')}\n</code>\n"
                f"<function>\n{_tag(workspace, 'function')}\n</function>\n"
                f"<principle>\n{_tag(workspace, 'principle')}\n</principle>"
            )
        examples = _section(text, "Demonstrations") or _section(text, "Reference")
        m = _CODE.search(examples)
        if m:
            return f"<thought>Dry run: copying the first example.</thought>\n<code>\n{m.group(1)}\n</code>"
        return "Dry run: no example to copy, so no workflow is produced."

    @staticmethod
    def _plan(text: str) -> str:
        if "- The workspace is empty." in _section(text, "Workspace"):
            names = _EXAMPLE.findall(_section(text, "Reference"))
            if names:
                action = f'load(name="{names[0]}")'
                plan = f'Step 1: I will load "{names[0]}". Step 2: I will finish the task.'
            else:
                action, plan = "finish()", "Step 1: I will finish the task."
        else:
            action, plan = "finish()", "Step 1: I will finish the task."
        return f"<thought>Dry run.</thought>\n<plan>{plan}</plan>\n<action>{action}</action>"
