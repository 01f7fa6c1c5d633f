"""Workflow execution backends and media helpers.

``SimulatedExecutor`` stands in for a GPU server: it validates the graph
against the registry and writes solid-colour placeholder images or GIFs whose
size and frame settings are read off the graph. ``LiveExecutor`` talks to a
real server through its queue and history endpoints. Results from the two are
labelled and must not be mixed in one report.
"""

from __future__ import annotations

import hashlib
import io
import logging
import time
import uuid
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from math import floor
from pathlib import Path
from typing import Callable, Optional, Union

import requests
from PIL import Image, ImageSequence, UnidentifiedImageError

from .graph import LinkRef, WorkflowGraph, graph_to_dict, serialize_prompt_json, validate
from .registry import NodeSchemaRegistry

log = logging.getLogger(__name__)

DEFAULT_SIZE = (512, 512)
DEFAULT_VIDEO_FRAMES = 16
DEFAULT_FRAME_RATE = 8.0

MEDIA_TYPES = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".webp": "image/webp",
    ".gif": "image/gif",
    ".mp4": "video/mp4",
    ".webm": "video/webm",
    ".mov": "video/quicktime",
}


def media_type_for(filename: str) -> str:
    return MEDIA_TYPES.get(Path(filename).suffix.lower(), "application/octet-stream")


def is_video(media_type: str) -> bool:
    return media_type.startswith("video/") or media_type == "image/gif"


@dataclass(frozen=True)
class OutputArtifact:
    media_type: str
    path: str
    width: Optional[int] = None
    height: Optional[int] = None
    frame_count: int = 1
    frame_rate: Optional[float] = None

    @property
    def resolution(self) -> str:
        if self.width is None or self.height is None:
            return "unknown"
        return f"{self.width}x{self.height}"

    def to_json(self) -> dict:
        return {
            "media_type": self.media_type,
            "path": Path(self.path).name,
            "width": self.width,
            "height": self.height,
            "frame_count": self.frame_count,
            "frame_rate": self.frame_rate,
        }


@dataclass(frozen=True)
class ExecutionOutcome:
    passed: bool
    outputs: tuple[OutputArtifact, ...] = ()
    message: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if not self.passed and self.outputs:
            raise ValueError("a failed execution has no outputs")


# -- frames -----------------------------------------------------------------


class FrameError(ValueError):
    pass


def sample_indices(n: int, cap: int) -> list[int]:
    """Uniform frame indices: all of them if n <= cap, otherwise
    round(i*(n-1)/(cap-1)) for i < cap, rounding halves up."""
    if n < 1:
        raise FrameError("no frames to sample")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if n <= cap:
        return list(range(n))
    if cap == 1:
        return [0]
    picked = {floor(Fraction(i * (n - 1), cap - 1) + Fraction(1, 2)) for i in range(cap)}
    return sorted(picked)


def read_frames(path: Union[str, Path]) -> list[Image.Image]:
    try:
        with Image.open(path) as im:
            return [frame.convert("RGB") for frame in ImageSequence.Iterator(im)]
    except (OSError, UnidentifiedImageError) as exc:
        raise FrameError(f"cannot decode {Path(path).name}: {exc}") from exc


def sample_frames(path: Union[str, Path], cap: int = 10) -> list[Image.Image]:
    frames = read_frames(path)
    return [frames[i] for i in sample_indices(len(frames), cap)]


def png_bytes(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def probe_media(path: Union[str, Path]) -> tuple[Optional[int], Optional[int], int, Optional[float]]:
    """(width, height, frame_count, frame_rate) as far as Pillow can tell."""
    try:
        with Image.open(path) as im:
            frames = getattr(im, "n_frames", 1)
            duration = im.info.get("duration")
            rate = round(1000.0 / duration, 3) if frames > 1 and duration else None
            return im.width, im.height, frames, rate
    except (OSError, UnidentifiedImageError):
        return None, None, 1, None


# -- simulated backend ------------------------------------------------------


def _ancestors(graph: WorkflowGraph, start: int) -> list[int]:
    """``start`` and every node it depends on, nearest first."""
    seen = {start}
    order = []
    queue = deque([start])
    while queue:
        node_id = queue.popleft()
        order.append(node_id)
        for _, ref in graph.nodes[node_id].links():
            if ref.source not in seen:
                seen.add(ref.source)
                queue.append(ref.source)
    return order


def _int_input(graph: WorkflowGraph, node_id: int, name: str) -> Optional[int]:
    value = graph.nodes[node_id].inputs.get(name)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return None
    return int(value)


def derive_size(graph: WorkflowGraph, node_id: int) -> tuple[int, int]:
    scale = 1.0
    for nid in _ancestors(graph, node_id):
        width, height = _int_input(graph, nid, "width"), _int_input(graph, nid, "height")
        if width and height:
            return max(1, round(width * scale)), max(1, round(height * scale))
        factor = graph.nodes[nid].inputs.get("scale_by")
        if isinstance(factor, (int, float)) and not isinstance(factor, bool) and factor > 0:
            scale *= factor
    return round(DEFAULT_SIZE[0] * scale), round(DEFAULT_SIZE[1] * scale)


def derive_frames(graph: WorkflowGraph, node_id: int) -> int:
    multiplier = 1
    for nid in _ancestors(graph, node_id):
        for name in ("video_frames", "frame_load_cap", "batch_size"):
            count = _int_input(graph, nid, name)
            if count and count > 0:
                return count * multiplier
        factor = _int_input(graph, nid, "multiplier")
        if factor and factor > 0:
            multiplier *= factor
    return DEFAULT_VIDEO_FRAMES * multiplier


def _colour(seed: bytes, shift: int = 0) -> tuple[int, int, int]:
    return tuple((seed[i] + shift * 7) % 256 for i in range(3))


class SimulatedExecutor:
    label = "simulated"

    def __init__(self, registry: NodeSchemaRegistry, output_dir: Union[str, Path]):
        self.registry = registry
        self.output_dir = Path(output_dir)

    def execute(self, graph: WorkflowGraph, name: str = "workflow") -> ExecutionOutcome:
        report = validate(graph, self.registry)
        if not report.ok:
            return ExecutionOutcome(False, (), report.render())
        sinks = [nid for nid in sorted(graph.nodes) if self.registry.lookup(graph.nodes[nid].class_name).output_node]
        if not sinks:
            return ExecutionOutcome(False, (), "the workflow has no output node")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        seed = hashlib.sha256(serialize_prompt_json(graph)).digest()
        outputs = []
        for nid in sinks:
            node = graph.nodes[nid]
            width, height = derive_size(graph, nid)
            if "frame_rate" in node.inputs:
                outputs.append(self._video(name, nid, seed, width, height, derive_frames(graph, nid),
                                           float(node.inputs["frame_rate"])))
            else:
                outputs.append(self._image(name, nid, seed, width, height))
        return ExecutionOutcome(True, tuple(outputs), f"simulated execution of {len(graph)} nodes")

    def _image(self, name: str, node_id: int, seed: bytes, width: int, height: int) -> OutputArtifact:
        path = self.output_dir / f"{name}_{node_id}.png"
        Image.new("RGB", (width, height), _colour(seed + bytes([node_id % 256]))).save(path)
        return OutputArtifact("image/png", str(path), width, height, 1, None)

    def _video(self, name: str, node_id: int, seed: bytes, width: int, height: int, frames: int,
               rate: float) -> OutputArtifact:
        path = self.output_dir / f"{name}_{node_id}.gif"
        # Frames differ slightly so the GIF encoder keeps every one of them.
        images = [Image.new("P", (width, height), 0) for _ in range(frames)]
        palette = []
        for i in range(frames):
            palette.extend(_colour(seed, i))
        palette.extend([0] * (768 - len(palette)))
        for i, im in enumerate(images):
            im.putpalette(palette)
            im.paste(i % 256, (0, 0, width, height))
        images[0].save(path, save_all=True, append_images=images[1:], duration=round(1000 / rate), loop=0,
                       optimize=False)
        return OutputArtifact("image/gif", str(path), width, height, frames, rate)


# -- live backend -----------------------------------------------------------


_OUTPUT_KEYS = ("images", "gifs", "videos")


class LiveExecutor:
    """Submits to a workflow server and polls its history until the prompt
    finishes or the poll budget runs out."""

    label = "live"

    def __init__(
        self,
        base_url: str,
        output_dir: Union[str, Path],
        poll_interval: float = 2.0,
        poll_budget: float = 600.0,
        timeout: float = 30.0,
        session: Optional[requests.Session] = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.output_dir = Path(output_dir)
        self.poll_interval = poll_interval
        self.poll_budget = poll_budget
        self.timeout = timeout
        self.session = session or requests.Session()
        self._clock = clock
        self._sleep = sleep

    def execute(self, graph: WorkflowGraph, name: str = "workflow") -> ExecutionOutcome:
        try:
            return self._execute(graph, name)
        except requests.RequestException as exc:
            return ExecutionOutcome(False, (), f"transport failure: {exc}")
        except (ValueError, KeyError, TypeError) as exc:
            return ExecutionOutcome(False, (), f"unexpected server response: {exc}")

    def _execute(self, graph: WorkflowGraph, name: str) -> ExecutionOutcome:
        body = {"prompt": graph_to_dict(graph), "client_id": str(uuid.uuid4())}
        resp = self.session.post(f"{self.base_url}/prompt", json=body, timeout=self.timeout)
        if resp.status_code != 200:
            return ExecutionOutcome(False, (), f"server rejected the workflow (HTTP {resp.status_code}): {resp.text[:1000]}")
        prompt_id = resp.json()["prompt_id"]
        deadline = self._clock() + self.poll_budget
        while True:
            resp = self.session.get(f"{self.base_url}/history/{prompt_id}", timeout=self.timeout)
            resp.raise_for_status()
            entry = resp.json().get(prompt_id)
            if entry:
                status = entry.get("status") or {}
                if status.get("status_str") == "error":
                    return ExecutionOutcome(False, (), f"execution failed: {_error_text(status)}")
                if status.get("completed", True):
                    return self._collect(entry.get("outputs") or {}, name)
            if self._clock() >= deadline:
                return ExecutionOutcome(False, (), f"timed out after {self.poll_budget:g} s waiting for {prompt_id}")
            self._sleep(self.poll_interval)

    def _collect(self, outputs: dict, name: str) -> ExecutionOutcome:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        artifacts = []
        for node_key in sorted(outputs, key=lambda k: int(k) if k.isdigit() else k):
            for key in _OUTPUT_KEYS:
                for item in outputs[node_key].get(key, []):
                    artifacts.append(self._fetch(item, name, node_key))
        if not artifacts:
            return ExecutionOutcome(False, (), "execution finished without producing any output")
        return ExecutionOutcome(True, tuple(artifacts), "success")

    def _fetch(self, item: dict, name: str, node_key: str) -> OutputArtifact:
        params = {"filename": item["filename"], "subfolder": item.get("subfolder", ""), "type": item.get("type", "output")}
        resp = self.session.get(f"{self.base_url}/view", params=params, timeout=self.timeout)
        resp.raise_for_status()
        path = self.output_dir / f"{name}_{node_key}_{Path(item['filename']).name}"
        path.write_bytes(resp.content)
        media_type = item.get("format") or media_type_for(item["filename"])
        width, height, frames, rate = probe_media(path)
        if item.get("frame_rate") is not None:
            rate = float(item["frame_rate"])
        return OutputArtifact(media_type, str(path), width, height, frames, rate)


def _error_text(status: dict) -> str:
    for kind, data in status.get("messages", []):
        if kind == "execution_error":
            return f"{data.get('node_type', '?')}: {data.get('exception_message', '').strip()}"
    return "unknown error"
