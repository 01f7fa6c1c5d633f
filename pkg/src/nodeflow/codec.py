r'''Transpiler between workflow graphs and straight-line call code.

One statement per node, in topological order::

    model_4, clip_4, vae_4 = CheckpointLoaderSimple(ckpt_name="""v1-5.safetensors""")
    conditioning_6 = CLIPTextEncode(text="""a cat""", clip=clip_4)
    _ = PreviewImage(images=image_8)

Grammar (blank lines ignored, newlines inside parentheses allowed)::

    statement := targets "=" IDENT "(" [kwarg ("," kwarg)*] ")"
    targets   := VAR ("," VAR)* | "_"
    kwarg     := IDENT "=" (literal | VAR)
    literal   := INT | FLOAT | "True" | "False" | STRING

Variable names carry the node id as a numeric suffix, which is how ids survive
a round trip through text. Nodes with no output slots bind ``_`` and get a
fresh id on parse.
'''

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Optional, Union

from .graph import (
    GraphError,
    LinkRef,
    Literal,
    NodeInstance,
    ValidationReport,
    WorkflowGraph,
    literal_kind,
    topo_order,
    validate,
)
from .registry import ClassNotFound, NodeSchemaRegistry, code_name

DISCARD = "_"
_VAR = re.compile(r"^[a-z][a-z0-9_]*$")
_ID_SUFFIX = re.compile(r"_([0-9]+)$")


class CodeError(ValueError):
    """Base class for code parse failures; carries a 1-based position."""

    kind = "syntax-error"

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.message = message
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}" if line else message)


class CodeSyntaxError(CodeError):
    pass


class PositionalArgumentError(CodeError):
    kind = "positional-argument"


class NestedCallError(CodeError):
    kind = "nested-call"


class UnboundVariableError(CodeError):
    kind = "unbound-variable"


class DuplicateBindingError(CodeError):
    kind = "duplicate-binding"


class LowerError(ValueError):
    """A parsed script that cannot become a graph (unknown class, arity)."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class EmitError(ValueError):
    def __init__(self, message: str, report: Optional[ValidationReport] = None):
        super().__init__(message)
        self.report = report


# -- tokens -----------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    kind: str  # NAME NUMBER STRING OP NEWLINE EOF
    value: object
    line: int
    column: int
    text: str = ""


_NUMBER = re.compile(r"-?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?")
_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", '"': '"', "'": "'", "0": "\0"}


class Lexer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def _advance(self, n: int) -> str:
        chunk = self.text[self.pos:self.pos + n]
        for ch in chunk:
            if ch == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
        self.pos += n
        return chunk

    def _string(self) -> Token:
        line, col = self.line, self.col
        text = self.text
        quote = text[self.pos]
        triple = text.startswith(quote * 3, self.pos)
        delim = quote * 3 if triple else quote
        start = self.pos
        self._advance(len(delim))
        out = []
        while True:
            if self.pos >= len(text):
                raise CodeSyntaxError("unterminated string", line, col)
            if text.startswith(delim, self.pos):
                self._advance(len(delim))
                break
            ch = text[self.pos]
            if ch == "\\":
                nxt = text[self.pos + 1:self.pos + 2]
                if nxt in _ESCAPES:
                    out.append(_ESCAPES[nxt])
                    self._advance(2)
                elif nxt == "\n":
                    self._advance(2)
                else:
                    out.append(ch)
                    self._advance(1)
                continue
            if ch == "\n" and not triple:
                raise CodeSyntaxError("newline inside single-quoted string", line, col)
            out.append(ch)
            self._advance(1)
        return Token("STRING", "".join(out), line, col, text[start:self.pos])

    def tokens(self) -> Iterator[Token]:
        depth = 0
        text = self.text
        while self.pos < len(text):
            ch = text[self.pos]
            line, col = self.line, self.col
            if ch in " \t\f" or (ch == "\r" and text[self.pos + 1:self.pos + 2] == "\n"):
                self._advance(1)
            elif ch == "\n":
                self._advance(1)
                if depth == 0:
                    yield Token("NEWLINE", "\n", line, col)
            elif ch in "\"'":
                yield self._string()
            elif ch in "(),=":
                depth += {"(": 1, ")": -1}.get(ch, 0)
                self._advance(1)
                yield Token("OP", ch, line, col, ch)
            elif (m := _NUMBER.match(text, self.pos)) and (ch != "-" or len(m.group()) > 1):
                raw = m.group()
                is_float = any(c in raw for c in ".eE")
                try:
                    value = float(raw) if is_float else int(raw)
                except ValueError:
                    raise CodeSyntaxError(f"bad number {raw!r}", line, col) from None
                if is_float and value in (float("inf"), float("-inf")):
                    raise CodeSyntaxError(f"number {raw!r} out of range", line, col)
                self._advance(len(raw))
                yield Token("NUMBER", value, line, col, raw)
            elif m := _NAME.match(text, self.pos):
                self._advance(len(m.group()))
                yield Token("NAME", m.group(), line, col, m.group())
            else:
                raise CodeSyntaxError(f"unexpected character {ch!r}", line, col)
        yield Token("NEWLINE", "\n", self.line, self.col)
        yield Token("EOF", None, self.line, self.col)


# -- script model -----------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str


ArgValue = Union[Literal, Var]


@dataclass(frozen=True)
class Statement:
    targets: tuple[str, ...]
    class_name: str
    args: tuple[tuple[str, ArgValue], ...]
    node_id: int
    line: int = 0

    @property
    def discards_all(self) -> bool:
        return all(t == DISCARD for t in self.targets)


@dataclass(frozen=True)
class CodeScript:
    statements: tuple[Statement, ...] = ()

    def __len__(self) -> int:
        return len(self.statements)

    def variable_argument_count(self) -> int:
        return sum(isinstance(v, Var) for s in self.statements for _, v in s.args)


class _Parser:
    def __init__(self, text: str):
        self.tokens = list(Lexer(text).tokens())
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def take(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str) -> Token:
        tok = self.tok
        if tok.kind != "OP" or tok.value != op:
            raise CodeSyntaxError(f"expected {op!r}, found {self._describe(tok)}", tok.line, tok.column)
        return self.take()

    @staticmethod
    def _describe(tok: Token) -> str:
        if tok.kind == "NEWLINE":
            return "end of line"
        if tok.kind == "EOF":
            return "end of input"
        return repr(tok.text or tok.value)

    def statements(self) -> Iterator[tuple[list[str], Token, list[tuple[Optional[str], ArgValue, Token]]]]:
        while self.tok.kind != "EOF":
            if self.tok.kind == "NEWLINE":
                self.take()
                continue
            yield self.statement()

    def statement(self):
        targets = [self.target()]
        while self.tok.kind == "OP" and self.tok.value == ",":
            self.take()
            targets.append(self.target())
        self.expect_op("=")
        callee = self.tok
        if callee.kind != "NAME":
            raise CodeSyntaxError(f"expected node class name, found {self._describe(callee)}", callee.line, callee.column)
        self.take()
        self.expect_op("(")
        args: list[tuple[Optional[str], ArgValue, Token]] = []
        while not (self.tok.kind == "OP" and self.tok.value == ")"):
            args.append(self.kwarg())
            if self.tok.kind == "OP" and self.tok.value == ",":
                self.take()
            elif not (self.tok.kind == "OP" and self.tok.value == ")"):
                raise CodeSyntaxError(f"expected ',' or ')', found {self._describe(self.tok)}", self.tok.line, self.tok.column)
        self.expect_op(")")
        end = self.tok
        if end.kind != "NEWLINE":
            raise CodeSyntaxError(f"expected end of statement, found {self._describe(end)}", end.line, end.column)
        self.take()
        return targets, callee, args

    def target(self) -> str:
        tok = self.tok
        if tok.kind != "NAME" or not (tok.value == DISCARD or _VAR.match(tok.value)):
            raise CodeSyntaxError(
                f"assignment target must be a lower-case variable or '_', found {self._describe(tok)}",
                tok.line,
                tok.column,
            )
        self.take()
        return tok.value

    def kwarg(self) -> tuple[Optional[str], ArgValue, Token]:
        tok = self.tok
        if tok.kind == "NAME" and self.peek().kind == "OP" and self.peek().value == "=":
            self.take()
            self.take()
            return tok.value, self.value(), tok
        # positional: parsed anyway so an unbound name can be reported as such
        return None, self.value(), tok

    def value(self) -> ArgValue:
        tok = self.tok
        if tok.kind in ("NUMBER", "STRING"):
            self.take()
            return tok.value
        if tok.kind == "NAME":
            if self.peek().kind == "OP" and self.peek().value == "(":
                raise NestedCallError(f"nested call to {tok.value} is not allowed", tok.line, tok.column)
            self.take()
            if tok.value in ("True", "False"):
                return tok.value == "True"
            return Var(tok.value)
        raise CodeSyntaxError(f"expected a value, found {self._describe(tok)}", tok.line, tok.column)


def parse_code(text: str) -> CodeScript:
    """Parse code text; node ids come from variable suffixes, otherwise fresh."""
    parser = _Parser(text)
    raw = list(parser.statements())

    bound: set[str] = set()
    parsed = []
    claimed: dict[int, int] = {}
    for index, (targets, callee, args) in enumerate(raw):
        seen_args: set[str] = set()
        values: list[tuple[str, ArgValue]] = []
        for name, value, tok in args:
            if name is None:
                if isinstance(value, Var) and value.name not in bound:
                    raise UnboundVariableError(f"variable {value.name!r} is used before assignment", tok.line, tok.column)
                raise PositionalArgumentError(
                    f"positional argument {tok.text or tok.value!r}; use keyword=value", tok.line, tok.column
                )
            if name in seen_args:
                raise DuplicateBindingError(f"argument {name!r} given twice", tok.line, tok.column)
            seen_args.add(name)
            if isinstance(value, Var) and value.name not in bound:
                raise UnboundVariableError(f"variable {value.name!r} is used before assignment", tok.line, tok.column)
            values.append((name, value))
        for t in targets:
            if t == DISCARD:
                continue
            if t in bound or targets.count(t) > 1:
                raise DuplicateBindingError(f"variable {t!r} is assigned more than once", callee.line, 1)
            bound.add(t)
        node_id = None
        for t in targets:
            m = _ID_SUFFIX.search(t) if t != DISCARD else None
            if m:
                node_id = int(m.group(1))
                break
        if node_id is not None and node_id >= 1 and node_id not in claimed:
            claimed[node_id] = index
        parsed.append((targets, callee, values, node_id))

    next_id = max(claimed, default=0) + 1
    statements = []
    for index, (targets, callee, values, node_id) in enumerate(parsed):
        if node_id is None or claimed.get(node_id) != index:
            node_id = next_id
            next_id += 1
        statements.append(Statement(tuple(targets), callee.value, tuple(values), node_id, callee.line))
    return CodeScript(tuple(statements))


def lower(script: CodeScript, registry: NodeSchemaRegistry) -> WorkflowGraph:
    """Turn a parsed script into a graph; variables become links to the slot
    position they were bound at."""
    slots: dict[str, tuple[int, int]] = {}
    nodes: dict[int, NodeInstance] = {}
    for stmt in script.statements:
        try:
            class_name = registry.resolve(stmt.class_name)
        except ClassNotFound:
            raise LowerError(f"unknown node class {stmt.class_name!r}", stmt.line) from None
        arity = len(registry.lookup(class_name).outputs)
        if not stmt.discards_all and len(stmt.targets) != arity:
            raise LowerError(
                f"{class_name} has {arity} output{'s' if arity != 1 else ''}, "
                f"but {len(stmt.targets)} variable{'s' if len(stmt.targets) != 1 else ''} assigned",
                stmt.line,
            )
        inputs = {}
        for name, value in stmt.args:
            if isinstance(value, Var):
                if value.name not in slots:
                    raise LowerError(f"variable {value.name!r} is not bound", stmt.line)
                source, index = slots[value.name]
                inputs[name] = LinkRef(source, index)
            else:
                inputs[name] = value
        for index, target in enumerate(stmt.targets):
            if target != DISCARD:
                slots[target] = (stmt.node_id, index)
        nodes[stmt.node_id] = NodeInstance(class_name, inputs)
    return WorkflowGraph(nodes)


def code_to_graph(text: str, registry: NodeSchemaRegistry) -> WorkflowGraph:
    return lower(parse_code(text), registry)


# -- emission ---------------------------------------------------------------


def snake_case(name: str) -> str:
    s = re.sub(r"([a-z0-9])([A-Z])", r"\1_\2", name)
    s = re.sub(r"[^0-9A-Za-z]+", "_", s).strip("_").lower()
    s = re.sub(r"__+", "_", s)
    if not s or not s[0].isalpha():
        s = "out_" + s if s else "out"
    return s


def output_variables(slot_names: list[str], node_id: int) -> list[str]:
    names = []
    for index, slot in enumerate(slot_names):
        base = snake_case(slot)
        if base in names:
            base = f"{base}{index}"
        names.append(base)
    return [f"{base}_{node_id}" for base in names]


def quote_text(text: str) -> str:
    body = text.replace("\\", "\\\\").replace('"', '\\"').replace("\r", "\\r")
    return f'"""{body}"""'


def format_literal(value: Literal) -> str:
    kind = literal_kind(value)
    if kind == "bool":
        return "True" if value else "False"
    if kind == "int":
        return str(value)
    if kind == "float":
        return repr(value)
    return quote_text(value)


def emit_code(graph: WorkflowGraph, registry: NodeSchemaRegistry) -> str:
    """Canonical code for a valid graph. Arguments keep the graph's input order."""
    report = validate(graph, registry)
    if not report.ok:
        raise EmitError("cannot emit code for an invalid workflow:\n" + report.render(), report)
    variables: dict[int, list[str]] = {}
    lines = []
    for node_id in topo_order(graph):
        node = graph.nodes[node_id]
        schema = registry.lookup(node.class_name)
        names = output_variables([o.name for o in schema.outputs], node_id)
        variables[node_id] = names
        args = []
        for name, value in node.inputs.items():
            if isinstance(value, LinkRef):
                args.append(f"{name}={variables[value.source][value.output_index]}")
            else:
                args.append(f"{name}={format_literal(value)}")
        targets = ", ".join(names) if names else DISCARD
        lines.append(f"{targets} = {code_name(node.class_name)}({', '.join(args)})")
    return "\n".join(lines)


def canonicalize(text: str, registry: NodeSchemaRegistry) -> str:
    """emit(lower(parse(text))); raises on unparseable or invalid code."""
    try:
        graph = code_to_graph(text, registry)
    except GraphError as exc:
        raise LowerError(str(exc)) from exc
    return emit_code(graph, registry)
