"""Node documentation ingest and signature lookup.

Each node class is documented in its own ``*.node`` text file made of
``## SECTION`` blocks::

    ## NAME
    KSampler
    ## CATEGORY
    sampling
    ## DESCRIPTION
    Denoises a latent image.
    ## INPUTS
    model : connection : MODEL : required
    seed : widget : INT : required : default=0
    denoise : widget : FLOAT : default=1.0
    ## OUTPUTS
    LATENT : LATENT

``NAME``, ``INPUTS`` and ``OUTPUTS`` are mandatory; ``CATEGORY``,
``DESCRIPTION`` and ``OUTPUT_NODE`` (``true``/``false``) are optional. Inputs
without the ``required`` marker are optional. Defaults are JSON scalars.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterator, Mapping, Optional

from .graph import Literal, literal_kind

WILDCARD = "*"
WIDGET_TYPES = {"INT", "FLOAT", "BOOLEAN", "STRING", "COMBO", WILDCARD}
_CONNECTION_TYPE = re.compile(r"^[A-Z][A-Z0-9_]*$")
_SECTIONS = {"NAME", "CATEGORY", "DESCRIPTION", "OUTPUT_NODE", "INPUTS", "OUTPUTS"}
DOC_SUFFIX = ".node"


class SchemaError(ValueError):
    pass


class DocParseError(SchemaError):
    def __init__(self, path: Path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class DuplicateClassError(SchemaError):
    pass


class ClassNotFound(KeyError):
    def __init__(self, class_name: str):
        super().__init__(class_name)
        self.class_name = class_name

    def __str__(self) -> str:
        return f"unknown node class {self.class_name!r}"


def types_compatible(output_type: str, input_type: str) -> bool:
    return output_type == input_type or WILDCARD in (output_type, input_type)


@dataclass(frozen=True)
class InputSpec:
    name: str
    kind: str  # "connection" | "widget"
    type_name: str
    required: bool = False
    default: Optional[Literal] = None

    def coerce(self, value: Literal) -> Literal:
        """Check a literal against this widget; ints widen to FLOAT, nothing
        else converts."""
        if self.kind != "widget":
            raise SchemaError(f"input {self.name!r} is a {self.type_name} connection, not a widget")
        kind = literal_kind(value)
        t = self.type_name
        if t == WILDCARD:
            return value
        if t == "FLOAT" and kind == "int":
            return float(value)
        expected = {"INT": "int", "FLOAT": "float", "BOOLEAN": "bool", "STRING": "str", "COMBO": "str"}[t]
        if kind != expected:
            raise SchemaError(f"input {self.name!r} expects {t}, got {kind} {value!r}")
        return value


def coerce_literal(spec: InputSpec, lit: Literal) -> Literal:
    return spec.coerce(lit)


@dataclass(frozen=True)
class OutputSpec:
    name: str
    type_name: str


@dataclass(frozen=True)
class NodeSchema:
    class_name: str
    inputs: tuple[InputSpec, ...] = ()
    outputs: tuple[OutputSpec, ...] = ()
    description: str = ""
    category: str = ""
    output_node: bool = False

    def input_map(self) -> dict[str, InputSpec]:
        return {spec.name: spec for spec in self.inputs}

    def to_json(self) -> dict:
        return {
            "class_name": self.class_name,
            "category": self.category,
            "output_node": self.output_node,
            "inputs": [
                {
                    "name": s.name,
                    "kind": s.kind,
                    "type": s.type_name,
                    "required": s.required,
                    **({"default": s.default} if s.default is not None else {}),
                }
                for s in self.inputs
            ],
            "outputs": [{"name": o.name, "type": o.type_name} for o in self.outputs],
            "description": self.description,
        }


def code_name(class_name: str) -> str:
    """Identifier form of a class name, e.g. ``"RIFE VFI"`` -> ``RIFE_VFI``."""
    ident = re.sub(r"[^0-9A-Za-z_]+", "_", class_name).strip("_")
    ident = re.sub(r"__+", "_", ident) or "_"
    if ident[0].isdigit():
        ident = "N" + ident
    return ident


@dataclass(frozen=True)
class NodeSchemaRegistry:
    schemas: Mapping[str, NodeSchema] = field(default_factory=dict)
    manifest: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "schemas", MappingProxyType(dict(self.schemas)))
        aliases: dict[str, str] = {}
        for name in self.schemas:
            alias = code_name(name)
            if alias != name and alias not in self.schemas:
                if aliases.get(alias, name) != name:
                    raise DuplicateClassError(f"classes {aliases[alias]!r} and {name!r} share code name {alias!r}")
                aliases[alias] = name
        object.__setattr__(self, "_aliases", aliases)

    def __len__(self) -> int:
        return len(self.schemas)

    def __contains__(self, class_name: str) -> bool:
        return class_name in self.schemas

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.schemas))

    def get(self, class_name: str) -> Optional[NodeSchema]:
        return self.schemas.get(class_name)

    def lookup(self, class_name: str) -> NodeSchema:
        try:
            return self.schemas[class_name]
        except KeyError:
            raise ClassNotFound(class_name) from None

    def resolve(self, ident: str) -> str:
        """Map an identifier used in code back to the registered class name."""
        if ident in self.schemas:
            return ident
        try:
            return self._aliases[ident]  # type: ignore[attr-defined]
        except KeyError:
            raise ClassNotFound(ident) from None

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for path, sha in self.manifest:
            h.update(f"{path}\0{sha}\n".encode())
        return h.hexdigest()

    def dump(self) -> Iterator[str]:
        for name in self:
            yield json.dumps(self.schemas[name].to_json(), ensure_ascii=False, sort_keys=True)


# -- document parsing -------------------------------------------------------


def _parse_default(raw: str, path: Path, lineno: int) -> Literal:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        raise DocParseError(path, lineno, f"default {raw!r} is not a JSON scalar") from None
    if value is None or isinstance(value, (list, dict)):
        raise DocParseError(path, lineno, f"default {raw!r} is not a scalar")
    return value


def _parse_input(line: str, path: Path, lineno: int) -> InputSpec:
    parts = [p.strip() for p in line.split(" : ")]
    if len(parts) < 3:
        raise DocParseError(path, lineno, "input line needs 'name : kind : type'")
    name, kind, type_name, *flags = parts
    if kind not in ("connection", "widget"):
        raise DocParseError(path, lineno, f"unknown input kind {kind!r}")
    if kind == "widget" and type_name not in WIDGET_TYPES:
        raise DocParseError(path, lineno, f"widget type must be one of {sorted(WIDGET_TYPES)}")
    if kind == "connection" and type_name != WILDCARD and not _CONNECTION_TYPE.match(type_name):
        raise DocParseError(path, lineno, f"connection type {type_name!r} must be upper-case or '*'")
    required = False
    default = None
    for flag in flags:
        if flag == "required":
            required = True
        elif flag == "optional":
            required = False
        elif flag.startswith("default="):
            default = _parse_default(flag[len("default="):], path, lineno)
        else:
            raise DocParseError(path, lineno, f"unknown input flag {flag!r}")
    return InputSpec(name, kind, type_name, required, default)


def parse_doc(text: str, path: Path = Path("<string>")) -> NodeSchema:
    sections: dict[str, list[tuple[int, str]]] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.startswith("## "):
            current = line[3:].strip()
            if current not in _SECTIONS:
                raise DocParseError(path, lineno, f"unknown section {current!r}")
            if current in sections:
                raise DocParseError(path, lineno, f"section {current!r} repeated")
            sections[current] = []
        elif current is None:
            if line.strip():
                raise DocParseError(path, lineno, "text before first section")
        else:
            sections[current].append((lineno, line))

    for required in ("NAME", "INPUTS", "OUTPUTS"):
        if required not in sections:
            raise DocParseError(path, 1, f"missing section {required}")

    def body(name: str) -> str:
        return "\n".join(line for _, line in sections.get(name, [])).strip()

    class_name = body("NAME")
    if not class_name or "\n" in class_name:
        raise DocParseError(path, 1, "NAME must be a single non-empty line")

    inputs = [
        _parse_input(line.strip(), path, lineno)
        for lineno, line in sections["INPUTS"]
        if line.strip()
    ]
    outputs = []
    for lineno, line in sections["OUTPUTS"]:
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(" : ")]
        if len(parts) != 2 or not all(parts):
            raise DocParseError(path, lineno, "output line needs 'slot_name : type'")
        if parts[1] != WILDCARD and not _CONNECTION_TYPE.match(parts[1]):
            raise DocParseError(path, lineno, f"output type {parts[1]!r} must be upper-case or '*'")
        outputs.append(OutputSpec(parts[0], parts[1]))

    for kind, names in (("input", [i.name for i in inputs]), ("output slot", [o.name for o in outputs])):
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise DocParseError(path, 1, f"duplicate {kind} names: {sorted(dupes)}")

    flag = body("OUTPUT_NODE").lower()
    if flag not in ("", "true", "false"):
        raise DocParseError(path, 1, "OUTPUT_NODE must be true or false")
    return NodeSchema(
        class_name=class_name,
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        description=body("DESCRIPTION"),
        category=body("CATEGORY"),
        output_node=flag == "true",
    )


def ingest_docs(root: Path | str) -> NodeSchemaRegistry:
    """Build a registry from every ``*.node`` file below ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise SchemaError(f"{root} is not a directory")
    schemas: dict[str, NodeSchema] = {}
    origin: dict[str, Path] = {}
    manifest = []
    for path in sorted(root.rglob(f"*{DOC_SUFFIX}")):
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise SchemaError(f"cannot read {path}: {exc}") from exc
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DocParseError(path, 1, f"not UTF-8: {exc}") from exc
        schema = parse_doc(text, path)
        if schema.class_name in schemas:
            raise DuplicateClassError(
                f"class {schema.class_name!r} documented twice: {origin[schema.class_name]} and {path}"
            )
        schemas[schema.class_name] = schema
        origin[schema.class_name] = path
        manifest.append((path.relative_to(root).as_posix(), hashlib.sha256(raw).hexdigest()))
    return NodeSchemaRegistry(schemas, tuple(manifest))
