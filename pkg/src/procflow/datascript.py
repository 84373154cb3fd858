"""DataScript: the minimal deterministic scripting language for model scripts.

Statements (newline or ';' separated):

    data.<name> = <expr>
    endpoints.<key> = <expr>
    status(<code expr>, <text expr>)

Expressions cover JSON literals (numbers, strings, booleans, null, lists,
maps), the read-only names `result` (received payload) and `data.*` /
`endpoints.*`, dotted member access, indexing, arithmetic (+ - * / %),
comparisons, and boolean operators (and/or/not).  No loops, no user calls:
every script terminates and the same inputs always give the same outputs.

Conditions are single expressions that must evaluate to a boolean.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Optional


class ScriptError(Exception):
    """Syntax or runtime error in a script; carries the source location."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.message = message
        self.line = line
        self.column = column


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t]+)
  | (?P<newline>\r?\n)
  | (?P<comment>\#[^\n]*)
  | (?P<number>\d+\.\d+|\d+)
  | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|[-+*/%<>=(),.\[\]{}:;])
""", re.VERBOSE)

_KEYWORDS = {"and", "or", "not", "true", "false", "null", "status"}


@dataclass
class _Token:
    kind: str
    value: str
    line: int
    column: int


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, col = 1, 1
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if not m:
            raise ScriptError(f"unexpected character {source[pos]!r}", line, col)
        kind = m.lastgroup or ""
        text = m.group()
        if kind == "newline":
            tokens.append(_Token("newline", "\n", line, col))
            line += 1
            col = 1
        elif kind not in ("ws", "comment"):
            if kind == "name" and text in _KEYWORDS:
                kind = text
            tokens.append(_Token(kind, text, line, col))
            col += len(text)
        else:
            col += len(text)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


# AST: tuples ("lit", v) ("name", n) ("member", obj, name) ("index", obj, ix)
# ("binop", op, l, r) ("unary", op, x) ("list", items) ("map", pairs)
# statements: ("assign", target_ast, expr) ("status", code, text)


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, value: Optional[str] = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (value is not None and tok.value != value):
            raise ScriptError(f"expected {value or kind}, got {tok.value or tok.kind!r}",
                              tok.line, tok.column)
        return self.next()

    def skip_separators(self) -> None:
        while self.peek().kind == "newline" or \
                (self.peek().kind == "op" and self.peek().value == ";"):
            self.next()

    def parse_program(self) -> list[tuple]:
        stmts: list[tuple] = []
        self.skip_separators()
        while self.peek().kind != "eof":
            stmts.append(self.parse_statement())
            self.skip_separators()
        return stmts

    def parse_statement(self) -> tuple:
        tok = self.peek()
        if tok.kind == "status":
            self.next()
            self.expect("op", "(")
            code = self.parse_expr()
            self.expect("op", ",")
            text = self.parse_expr()
            self.expect("op", ")")
            return ("status", code, text)
        target = self.parse_postfix(self.parse_atom())
        eq = self.peek()
        if eq.kind == "op" and eq.value == "=":
            self.next()
            value = self.parse_expr()
            if target[0] not in ("member", "index"):
                raise ScriptError("assignment target must be data.<name> or "
                                  "endpoints.<key>", tok.line, tok.column)
            return ("assign", target, value)
        raise ScriptError("expected assignment or status(...)", tok.line, tok.column)

    # expression precedence: or < and < not < comparison < add < mul < unary
    def parse_expr(self) -> tuple:
        return self.parse_or()

    def parse_or(self) -> tuple:
        left = self.parse_and()
        while self.peek().kind == "or":
            self.next()
            left = ("binop", "or", left, self.parse_and())
        return left

    def parse_and(self) -> tuple:
        left = self.parse_not()
        while self.peek().kind == "and":
            self.next()
            left = ("binop", "and", left, self.parse_not())
        return left

    def parse_not(self) -> tuple:
        if self.peek().kind == "not":
            tok = self.next()
            return ("unary", "not", self.parse_not(), tok.line, tok.column)
        return self.parse_comparison()

    def parse_comparison(self) -> tuple:
        left = self.parse_add()
        while self.peek().kind == "op" and self.peek().value in \
                ("==", "!=", "<", "<=", ">", ">="):
            op = self.next().value
            left = ("binop", op, left, self.parse_add())
        return left

    def parse_add(self) -> tuple:
        left = self.parse_mul()
        while self.peek().kind == "op" and self.peek().value in ("+", "-"):
            op = self.next().value
            left = ("binop", op, left, self.parse_mul())
        return left

    def parse_mul(self) -> tuple:
        left = self.parse_unary()
        while self.peek().kind == "op" and self.peek().value in ("*", "/", "%"):
            op = self.next().value
            left = ("binop", op, left, self.parse_unary())
        return left

    def parse_unary(self) -> tuple:
        tok = self.peek()
        if tok.kind == "op" and tok.value == "-":
            self.next()
            return ("unary", "-", self.parse_unary(), tok.line, tok.column)
        return self.parse_postfix(self.parse_atom())

    def parse_postfix(self, expr: tuple) -> tuple:
        while True:
            tok = self.peek()
            if tok.kind == "op" and tok.value == ".":
                self.next()
                name = self.expect("name")
                expr = ("member", expr, name.value, name.line, name.column)
            elif tok.kind == "op" and tok.value == "[":
                self.next()
                index = self.parse_expr()
                self.expect("op", "]")
                expr = ("index", expr, index, tok.line, tok.column)
            else:
                return expr

    def parse_atom(self) -> tuple:
        tok = self.next()
        if tok.kind == "number":
            return ("lit", float(tok.value) if "." in tok.value else int(tok.value))
        if tok.kind == "string":
            body = tok.value[1:-1]
            return ("lit", body.replace("\\\"", "\"").replace("\\'", "'")
                    .replace("\\\\", "\\").replace("\\n", "\n"))
        if tok.kind == "true":
            return ("lit", True)
        if tok.kind == "false":
            return ("lit", False)
        if tok.kind == "null":
            return ("lit", None)
        if tok.kind == "name":
            return ("name", tok.value, tok.line, tok.column)
        if tok.kind == "op" and tok.value == "(":
            inner = self.parse_expr()
            self.expect("op", ")")
            return inner
        if tok.kind == "op" and tok.value == "[":
            items = []
            while not (self.peek().kind == "op" and self.peek().value == "]"):
                items.append(self.parse_expr())
                if self.peek().kind == "op" and self.peek().value == ",":
                    self.next()
            self.next()
            return ("list", items)
        if tok.kind == "op" and tok.value == "{":
            pairs = []
            while not (self.peek().kind == "op" and self.peek().value == "}"):
                key = self.parse_expr()
                self.expect("op", ":")
                pairs.append((key, self.parse_expr()))
                if self.peek().kind == "op" and self.peek().value == ",":
                    self.next()
            self.next()
            return ("map", pairs)
        raise ScriptError(f"unexpected {tok.value or tok.kind!r}", tok.line, tok.column)


@dataclass
class ScriptContext:
    """Evaluation context handed to scripts.

    `data` and `endpoints` are mutated in place by assignments; callers decide
    whether those writes are permanent (finalize/update/rescue) or scoped to
    the enactment (prepare).
    """
    data: dict[str, Any] = field(default_factory=dict)
    endpoints: dict[str, str] = field(default_factory=dict)
    result: Any = None
    status: Optional[tuple[int, str]] = None
    reads: set[str] = field(default_factory=set)   # dataelement names read


class _Evaluator:
    def __init__(self, ctx: ScriptContext):
        self.ctx = ctx

    def eval(self, ast: tuple) -> Any:
        op = ast[0]
        if op == "lit":
            return ast[1]
        if op == "name":
            return self._name(ast)
        if op == "member":
            return self._member(ast)
        if op == "index":
            _, obj_ast, ix_ast, line, col = ast
            obj = self.eval(obj_ast)
            ix = self.eval(ix_ast)
            try:
                return obj[ix]
            except (KeyError, IndexError, TypeError) as exc:
                raise ScriptError(f"bad index {ix!r}: {exc}", line, col) from exc
        if op == "list":
            return [self.eval(item) for item in ast[1]]
        if op == "map":
            return {self.eval(k): self.eval(v) for k, v in ast[1]}
        if op == "unary":
            _, sym, operand, line, col = ast
            val = self.eval(operand)
            if sym == "not":
                if not isinstance(val, bool):
                    raise ScriptError("not requires a boolean", line, col)
                return not val
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ScriptError("unary - requires a number", line, col)
            return -val
        if op == "binop":
            return self._binop(ast)
        raise ScriptError(f"internal: unknown ast node {op}")

    def _name(self, ast: tuple) -> Any:
        _, name, line, col = ast
        if name == "result":
            return self.ctx.result
        if name == "data":
            return _Namespace("data", self.ctx.data, self.ctx)
        if name == "endpoints":
            return _Namespace("endpoints", self.ctx.endpoints, self.ctx)
        raise ScriptError(f"undefined name {name!r}", line, col)

    def _member(self, ast: tuple) -> Any:
        _, obj_ast, name, line, col = ast
        obj = self.eval(obj_ast)
        if isinstance(obj, _Namespace):
            return obj.get(name, line, col)
        if isinstance(obj, dict):
            if name not in obj:
                raise ScriptError(f"no member {name!r}", line, col)
            return obj[name]
        raise ScriptError(f"cannot access member {name!r} of {type(obj).__name__}",
                          line, col)

    def _binop(self, ast: tuple) -> Any:
        _, sym, left_ast, right_ast = ast
        if sym in ("and", "or"):
            left = self.eval(left_ast)
            if not isinstance(left, bool):
                raise ScriptError(f"{sym} requires booleans")
            if sym == "and" and not left:
                return False
            if sym == "or" and left:
                return True
            right = self.eval(right_ast)
            if not isinstance(right, bool):
                raise ScriptError(f"{sym} requires booleans")
            return right
        left = self.eval(left_ast)
        right = self.eval(right_ast)
        if sym == "==":
            return left == right
        if sym == "!=":
            return left != right
        if sym in ("<", "<=", ">", ">="):
            try:
                return {"<": left < right, "<=": left <= right,
                        ">": left > right, ">=": left >= right}[sym]
            except TypeError as exc:
                raise ScriptError(f"cannot compare {type(left).__name__} "
                                  f"{sym} {type(right).__name__}") from exc
        if sym == "+":
            if isinstance(left, str) and isinstance(right, str):
                return left + right
            if isinstance(left, list) and isinstance(right, list):
                return left + right
        if sym in ("+", "-", "*", "/", "%"):
            if not isinstance(left, (int, float)) or isinstance(left, bool) or \
                    not isinstance(right, (int, float)) or isinstance(right, bool):
                raise ScriptError(f"operator {sym} requires numbers")
            if sym in ("/", "%") and right == 0:
                raise ScriptError("division by zero")
            return {"+": lambda: left + right, "-": lambda: left - right,
                    "*": lambda: left * right, "/": lambda: left / right,
                    "%": lambda: left % right}[sym]()
        raise ScriptError(f"internal: unknown operator {sym}")


class _Namespace:
    """`data` / `endpoints` read view that tracks dataelement reads."""

    def __init__(self, kind: str, store: dict, ctx: ScriptContext):
        self.kind = kind
        self.store = store
        self.ctx = ctx

    def get(self, name: str, line: int, col: int) -> Any:
        if self.kind == "data":
            self.ctx.reads.add(name)
        if name not in self.store:
            raise ScriptError(f"undefined {self.kind[:-1] if self.kind == 'endpoints' else 'dataelement'} "
                              f"{name!r}", line, col)
        return self.store[name]


def parse_script(source: str) -> list[tuple]:
    return _Parser(_tokenize(source)).parse_program()


def parse_expression(source: str) -> tuple:
    parser = _Parser(_tokenize(source))
    parser.skip_separators()
    expr = parser.parse_expr()
    parser.skip_separators()
    tok = parser.peek()
    if tok.kind != "eof":
        raise ScriptError(f"trailing input {tok.value!r}", tok.line, tok.column)
    return expr


def run_script(source: str, ctx: ScriptContext) -> ScriptContext:
    """Execute a script against ctx; assignments mutate ctx.data/ctx.endpoints."""
    for stmt in parse_script(source):
        if stmt[0] == "status":
            code = _Evaluator(ctx).eval(stmt[1])
            text = _Evaluator(ctx).eval(stmt[2])
            if not isinstance(code, int) or isinstance(code, bool):
                raise ScriptError("status code must be an integer")
            ctx.status = (code, str(text))
            continue
        _, target, value_ast = stmt
        value = _Evaluator(ctx).eval(value_ast)
        _assign(ctx, target, value)
    return ctx


def _assign(ctx: ScriptContext, target: tuple, value: Any) -> None:
    if target[0] == "member":
        _, obj_ast, name, line, col = target
        if obj_ast[0] == "name" and obj_ast[1] == "data":
            ctx.data[name] = value
            return
        if obj_ast[0] == "name" and obj_ast[1] == "endpoints":
            if not isinstance(value, str):
                raise ScriptError("endpoint values must be strings", line, col)
            ctx.endpoints[name] = value
            return
        container = _Evaluator(ctx).eval(obj_ast)
        if isinstance(container, _Namespace):
            container.store[name] = value
            return
        if isinstance(container, dict):
            container[name] = value
            return
        raise ScriptError(f"cannot assign member {name!r}", line, col)
    if target[0] == "index":
        _, obj_ast, ix_ast, line, col = target
        container = _Evaluator(ctx).eval(obj_ast)
        ix = _Evaluator(ctx).eval(ix_ast)
        try:
            container[ix] = value
        except (IndexError, TypeError) as exc:
            raise ScriptError(f"cannot assign index {ix!r}: {exc}", line, col) from exc
        return
    raise ScriptError("invalid assignment target")


def eval_condition(source: str, data: dict[str, Any],
                   endpoints: Optional[dict[str, str]] = None) -> tuple[bool, dict[str, Any]]:
    """Evaluate a condition expression.

    Returns the boolean result plus the dataelements the expression read
    (name -> value), which the condition event must carry.
    """
    ctx = ScriptContext(data=data, endpoints=endpoints or {})
    result = _Evaluator(ctx).eval(parse_expression(source))
    if not isinstance(result, bool):
        raise ScriptError("condition must evaluate to a boolean")
    involved = {name: data[name] for name in sorted(ctx.reads) if name in data}
    return result, involved
