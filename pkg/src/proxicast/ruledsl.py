"""Parser, checker and canonical printer for delivery rules.

Grammar::

    rule    := "IF" cond "THEN" "{" "deliver" string "}"
    cond    := or
    or      := and ("OR" and)*
    and     := not ("AND" not)*
    not     := "NOT" not | atom
    atom    := "(" cond ")" | boolfn | cmp
    cmp     := "COUNTER" "(" int ")" relop int
    relop   := ">" | ">=" | "<" | "<=" | "==" | "!="
    boolfn  := ("FIRST" | "IN_PLACE" | "IN_GROUP_OF") "(" int ")"
             | "SUBSCRIBED_TO" "(" string ")"

Keywords and function names are case-insensitive. Strings are double quoted;
``\\"`` and ``\\\\`` are the only escapes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Protocol, Union

FUNCTIONS = ("COUNTER", "FIRST", "IN_PLACE", "IN_GROUP_OF", "SUBSCRIBED_TO")
INTERVAL_FUNCTIONS = ("COUNTER", "FIRST")
POSITIVE_INT_FUNCTIONS = ("IN_PLACE", "IN_GROUP_OF")
RELOPS = (">", ">=", "<", "<=", "==", "!=")
BOOL_OPS = ("AND", "OR", "NOT")
KEYWORDS = ("IF", "THEN", "DELIVER", "AND", "OR", "NOT")
MAX_DEPTH = 100
MAX_INT_DIGITS = 18


class RuleError(ValueError):
    kind = "RuleError"
    position: int | None = None


class RuleSyntaxError(RuleError):
    kind = "SyntaxError"

    def __init__(self, position: int, expected: str, found: str = ""):
        self.position = position
        self.expected = expected
        self.found = found
        detail = f", found {found}" if found else ""
        super().__init__(f"at offset {position}: expected {expected}{detail}")


class ArityError(RuleError):
    kind = "ArityError"


class RuleTypeError(RuleError):
    kind = "TypeError"


class IntervalCodeError(RuleError):
    kind = "IntervalCodeError"


# -- AST -----------------------------------------------------------------------

@dataclass(frozen=True)
class FunctionCall:
    name: str
    args: tuple[Union[int, str], ...]


@dataclass(frozen=True)
class Comparison:
    lhs: "Node"
    op: str
    rhs: int


@dataclass(frozen=True)
class BoolOp:
    op: str
    children: tuple["Node", ...]


Node = Union[FunctionCall, Comparison, BoolOp]


@dataclass(frozen=True)
class RuleAst:
    condition: Node
    message_id: str
    rule_id: str = ""
    topic_id: str = ""


def atoms(node: Node) -> Iterator[Node]:
    """Leaf conditions (comparisons and boolean calls), left to right."""
    if isinstance(node, BoolOp):
        for child in node.children:
            yield from atoms(child)
    else:
        yield node


# -- structural checks (shared by the parser and validate) ---------------------

def _is_int(v: object) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _call_error(call: FunctionCall) -> RuleError | None:
    if call.name not in FUNCTIONS:
        return RuleTypeError(f"unknown function {call.name}")
    if len(call.args) != 1:
        return ArityError(f"{call.name} takes exactly 1 argument, got {len(call.args)}")
    (arg,) = call.args
    if call.name == "SUBSCRIBED_TO":
        if not isinstance(arg, str):
            return RuleTypeError("SUBSCRIBED_TO takes a quoted topic id")
        return None
    if not _is_int(arg):
        return RuleTypeError(f"{call.name} takes an integer argument")
    if call.name in INTERVAL_FUNCTIONS and arg not in (0, 1, 2, 3):
        return IntervalCodeError(f"{call.name}({arg}): interval code must be 0, 1, 2 or 3")
    if call.name in POSITIVE_INT_FUNCTIONS and arg < 1:
        return RuleTypeError(f"{call.name} takes a positive integer")
    return None


def structure_errors(node: object) -> list[RuleError]:
    """Arity, type and interval-code problems of a condition tree."""
    out: list[RuleError] = []

    def walk(n: object, boolean_position: bool) -> None:
        if isinstance(n, BoolOp):
            if n.op not in BOOL_OPS:
                out.append(RuleTypeError(f"unknown boolean operator {n.op!r}"))
            elif n.op == "NOT" and len(n.children) != 1:
                out.append(ArityError("NOT takes exactly one operand"))
            elif n.op != "NOT" and len(n.children) < 2:
                out.append(ArityError(f"{n.op} needs at least two operands"))
            for c in n.children:
                walk(c, True)
        elif isinstance(n, Comparison):
            if n.op not in RELOPS:
                out.append(RuleTypeError(f"unknown comparison {n.op!r}"))
            if not _is_int(n.rhs):
                out.append(RuleTypeError("comparison right-hand side must be an integer"))
            if isinstance(n.lhs, FunctionCall) and n.lhs.name == "COUNTER":
                walk(n.lhs, False)
            elif isinstance(n.lhs, FunctionCall):
                out.append(RuleTypeError(f"boolean {n.lhs.name} compared to integer"))
                walk(n.lhs, False)
            else:
                out.append(RuleTypeError("only COUNTER can be compared"))
        elif isinstance(n, FunctionCall):
            err = _call_error(n)
            if err is not None:
                out.append(err)
            if boolean_position and n.name == "COUNTER":
                out.append(RuleTypeError("COUNTER is integer-valued; compare it"))
        else:
            out.append(RuleTypeError(f"not a condition node: {type(n).__name__}"))

    walk(node, True)
    return out


# -- tokenizer -----------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<int>[0-9]+)
  | (?P<str>"(?:[^"\\]|\\.)*")
  | (?P<relop>>=|<=|==|!=|>|<)
  | (?P<punct>[(){},])
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE | re.DOTALL,
)
_ESCAPE = re.compile(r"\\(.)", re.DOTALL)


@dataclass(frozen=True)
class _Tok:
    kind: str
    value: object
    pos: int
    text: str


def _unquote(raw: str, pos: int) -> str:
    def sub(m: re.Match) -> str:
        if m.group(1) not in ('"', "\\"):
            raise RuleSyntaxError(pos + m.start(), 'escape \\" or \\\\', repr(m.group(0)))
        return m.group(1)

    return _ESCAPE.sub(sub, raw[1:-1])


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i = 0
    while i < len(text):
        m = _TOKEN.match(text, i)
        if m is None:
            expected = "closing quote" if text[i] == '"' else "a token"
            raise RuleSyntaxError(i, expected, repr(text[i]))
        kind = m.lastgroup
        raw = m.group()
        if kind == "int":
            if len(raw) > MAX_INT_DIGITS:
                raise RuleSyntaxError(i, f"integer of at most {MAX_INT_DIGITS} digits")
            toks.append(_Tok("int", int(raw), i, raw))
        elif kind == "str":
            toks.append(_Tok("str", _unquote(raw, i), i, raw))
        elif kind == "word":
            toks.append(_Tok("word", raw.upper(), i, raw))
        elif kind != "ws":
            toks.append(_Tok(kind, raw, i, raw))
        i = m.end()
    toks.append(_Tok("eof", None, len(text), "end of input"))
    return toks


# -- parser --------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0
        self.depth = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, expected: str):
        raise RuleSyntaxError(self.tok.pos, expected, repr(self.tok.text))

    def at_word(self, word: str) -> bool:
        return self.tok.kind == "word" and self.tok.value == word

    def expect_word(self, word: str) -> None:
        if not self.at_word(word):
            self.fail(word)
        self.i += 1

    def expect_punct(self, p: str) -> None:
        if self.tok.kind != "punct" or self.tok.value != p:
            self.fail(repr(p))
        self.i += 1

    def expect(self, kind: str, what: str) -> _Tok:
        if self.tok.kind != kind:
            self.fail(what)
        tok = self.tok
        self.i += 1
        return tok

    def rule(self) -> tuple[Node, str]:
        self.expect_word("IF")
        cond = self.cond()
        self.expect_word("THEN")
        self.expect_punct("{")
        self.expect_word("DELIVER")
        target = self.expect("str", "quoted message id").value
        self.expect_punct("}")
        self.expect("eof", "end of input")
        return cond, target

    def cond(self) -> Node:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            self.fail(f"nesting shallower than {MAX_DEPTH}")
        try:
            return self.or_()
        finally:
            self.depth -= 1

    def or_(self) -> Node:
        items = [self.and_()]
        while self.at_word("OR"):
            self.i += 1
            items.append(self.and_())
        return items[0] if len(items) == 1 else BoolOp("OR", tuple(items))

    def and_(self) -> Node:
        items = [self.not_()]
        while self.at_word("AND"):
            self.i += 1
            items.append(self.not_())
        return items[0] if len(items) == 1 else BoolOp("AND", tuple(items))

    def not_(self) -> Node:
        if self.at_word("NOT"):
            self.i += 1
            self.depth += 1
            if self.depth > MAX_DEPTH:
                self.fail(f"nesting shallower than {MAX_DEPTH}")
            try:
                return BoolOp("NOT", (self.not_(),))
            finally:
                self.depth -= 1
        return self.atom()

    def atom(self) -> Node:
        if self.tok.kind == "punct" and self.tok.value == "(":
            self.i += 1
            node = self.cond()
            self.expect_punct(")")
            return node
        if self.tok.kind != "word" or self.tok.value not in FUNCTIONS:
            self.fail("function name or '('")
        start = self.tok.pos
        call = self.call()
        err = _call_error(call)
        if err is not None:
            err.position = start
            raise err
        if self.tok.kind == "relop":
            op_tok = self.tok
            if call.name != "COUNTER":
                err = RuleTypeError(f"boolean {call.name} compared to integer")
                err.position = op_tok.pos
                raise err
            self.i += 1
            rhs = self.expect("int", "integer").value
            return Comparison(call, op_tok.value, rhs)
        if call.name == "COUNTER":
            err = RuleTypeError("COUNTER is integer-valued; compare it")
            err.position = start
            raise err
        return call

    def call(self) -> FunctionCall:
        name = self.tok.value
        self.i += 1
        self.expect_punct("(")
        args: list[Union[int, str]] = []
        if not (self.tok.kind == "punct" and self.tok.value == ")"):
            while True:
                if self.tok.kind not in ("int", "str"):
                    self.fail("integer or quoted string argument")
                args.append(self.tok.value)
                self.i += 1
                if self.tok.kind == "punct" and self.tok.value == ",":
                    self.i += 1
                    continue
                break
        self.expect_punct(")")
        return FunctionCall(name, tuple(args))


def parse_condition(text: str) -> Node:
    p = _Parser(text)
    node = p.cond()
    p.expect("eof", "end of input")
    return node


def parse_rule(text: str | bytes, *, rule_id: str = "", topic_id: str = "") -> RuleAst:
    """Parse rule text into a checked :class:`RuleAst`.

    Raises a :class:`RuleError` subclass on any problem; never anything else.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise RuleSyntaxError(exc.start, "UTF-8 text") from None
    if not isinstance(text, str) or not text.strip():
        raise RuleSyntaxError(0, "IF")
    cond, target = _Parser(text).rule()
    return RuleAst(condition=cond, message_id=target, rule_id=rule_id, topic_id=topic_id)


# -- printer -------------------------------------------------------------------

def quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _arg(a: Union[int, str]) -> str:
    return quote(a) if isinstance(a, str) else str(a)


def format_condition(node: Node) -> str:
    if isinstance(node, FunctionCall):
        return f"{node.name}({', '.join(_arg(a) for a in node.args)})"
    if isinstance(node, Comparison):
        return f"({format_condition(node.lhs)} {node.op} {node.rhs})"
    if node.op == "NOT":
        return f"(NOT {format_condition(node.children[0])})"
    return "(" + f" {node.op} ".join(format_condition(c) for c in node.children) + ")"


def pretty_print(ast: RuleAst) -> str:
    """Canonical, fully parenthesized rule text."""
    return f"IF {format_condition(ast.condition)} THEN {{ deliver {quote(ast.message_id)} }}"


# -- validation against a registry ---------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    kind: str
    message: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "message": self.message}


class RegistryView(Protocol):
    def has_topic(self, topic_id: str) -> bool: ...

    def find_message(self, message_id: str): ...


def validate(ast: RuleAst, registry_view: RegistryView) -> list[Diagnostic]:
    diags = [Diagnostic(e.kind, str(e)) for e in structure_errors(ast.condition)]
    if ast.topic_id and not registry_view.has_topic(ast.topic_id):
        diags.append(Diagnostic("UnresolvedTopic", f"rule topic {ast.topic_id!r} does not exist"))
    msg = registry_view.find_message(ast.message_id)
    if msg is None:
        diags.append(
            Diagnostic("UnresolvedMessage", f"message {ast.message_id!r} does not exist")
        )
    elif ast.topic_id and msg.topic_id != ast.topic_id:
        diags.append(
            Diagnostic(
                "UnresolvedMessage",
                f"message {ast.message_id!r} belongs to another topic",
            )
        )
    for node in atoms(ast.condition):
        if (
            isinstance(node, FunctionCall)
            and node.name == "SUBSCRIBED_TO"
            and len(node.args) == 1
            and isinstance(node.args[0], str)
            and not registry_view.has_topic(node.args[0])
        ):
            diags.append(
                Diagnostic("UnresolvedTopic", f"SUBSCRIBED_TO topic {node.args[0]!r} does not exist")
            )
    return diags
