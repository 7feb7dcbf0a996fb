"""Recursive-descent parser for ``.mini`` sources.

Grammar::

    program  = "fn" IDENT "(" [param {"," param}] ")" block
    param    = IDENT ":" ("int" | "bool" | "int" "[" "]")
    block    = "{" {stmt} "}"
    stmt     = IDENT ":=" expr ";"
             | IDENT "[" expr "]" ":=" expr ";"
             | "if" "(" expr ")" block ["else" (block | if-stmt)]
             | "while" "(" expr ")" block
             | "for" IDENT "in" expr ".." expr block
             | "return" expr ";"
    expr     = or
    or       = and {"||" and}
    and      = cmp {"&&" cmp}
    cmp      = sum [("<"|"<="|">"|">="|"=="|"!=") sum]
    sum      = term {("+"|"-") term}
    term     = unary {("*"|"/"|"%") unary}
    unary    = ("-"|"!") unary | primary
    primary  = INT | "true" | "false" | "len" "(" IDENT ")"
             | IDENT ["[" expr "]"] | "(" expr ")"

Line comments start with ``//``.
"""
from __future__ import annotations

import re

from . import ast as A


class MiniLangError(Exception):
    pass


class ParseError(MiniLangError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        super().__init__(f"{msg} at line {line}, column {col}")
        self.line = line
        self.col = col


class UndefinedIdentifierError(ParseError):
    def __init__(self, name: str, line: int = 0, col: int = 0):
        super().__init__(f"undefined identifier {name!r}", line, col)
        self.name = name


class TypeCheckError(ParseError):
    pass


KEYWORDS = {"fn", "if", "else", "while", "for", "in", "return", "true", "false", "len", "int", "bool"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>//[^\n]*)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>:=|\.\.|<=|>=|==|!=|&&|\|\||[-+*/%<>!(){}\[\];:,])
    """,
    re.VERBOSE,
)


def tokenize(source: str) -> list[tuple[str, str, int, int]]:
    toks = []
    line, line_start, pos = 1, 0, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "ident" and text in KEYWORDS:
            toks.append(("kw", text, line, col))
        elif kind not in ("ws", "comment"):
            toks.append((kind, text, line, col))
        pos = m.end()
    toks.append(("eof", "", line, pos - line_start + 1))
    return toks


_CMP = set(A.COMPARE_OPS)


class _Parser:
    def __init__(self, source: str):
        self.toks = tokenize(source)
        self.i = 0
        self.kinds: dict[str, str] = {}

    # -- token helpers
    def peek(self, k: int = 0):
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def at(self, text: str) -> bool:
        kind, t, _, _ = self.peek()
        return t == text and kind in ("op", "kw")

    def advance(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        if not self.at(text):
            _, t, line, col = self.peek()
            raise ParseError(f"expected {text!r}, found {t or 'end of input'!r}", line, col)
        return self.advance()

    def ident(self) -> tuple[str, int, int]:
        kind, t, line, col = self.peek()
        if kind != "ident":
            raise ParseError(f"expected identifier, found {t or 'end of input'!r}", line, col)
        self.advance()
        return t, line, col

    # -- program
    def program(self) -> A.Program:
        _, _, hline, _ = self.expect("fn")
        name, _, _ = self.ident()
        self.expect("(")
        params = []
        if not self.at(")"):
            while True:
                pname, line, col = self.ident()
                self.expect(":")
                kind = self.type_()
                if pname in self.kinds:
                    raise ParseError(f"duplicate parameter {pname!r}", line, col)
                self.kinds[pname] = kind
                params.append((pname, kind))
                if not self.at(","):
                    break
                self.advance()
        self.expect(")")
        body = self.block()
        kind, t, line, col = self.peek()
        if kind != "eof":
            raise ParseError(f"unexpected {t!r} after function body", line, col)
        return A.Program(name=name, params=params, body=body, header_line=hline)

    def type_(self) -> str:
        if self.at("bool"):
            self.advance()
            return A.BOOL
        self.expect("int")
        if self.at("["):
            self.advance()
            self.expect("]")
            return A.ARRAY
        return A.INT

    def block(self) -> list:
        self.expect("{")
        out = []
        while not self.at("}"):
            if self.peek()[0] == "eof":
                _, _, line, col = self.peek()
                raise ParseError("unterminated block", line, col)
            out.append(self.stmt())
        self.expect("}")
        return out

    def stmt(self):
        kind, t, line, col = self.peek()
        if kind == "kw" and t == "if":
            return self.if_()
        if kind == "kw" and t == "while":
            self.advance()
            self.expect("(")
            cond = self.expr()
            self.expect(")")
            self.want(cond, A.BOOL, line, col)
            return A.While(cond, self.block(), line=line)
        if kind == "kw" and t == "for":
            self.advance()
            var, vline, vcol = self.ident()
            self.expect("in")
            lo = self.expr()
            self.expect("..")
            hi = self.expr()
            self.want(lo, A.INT, line, col)
            self.want(hi, A.INT, line, col)
            self.bind(var, A.INT, vline, vcol)
            return A.For(var, lo, hi, self.block(), line=line)
        if kind == "kw" and t == "return":
            self.advance()
            e = self.expr()
            self.expect(";")
            return A.Return(e, line=line)
        if kind == "ident":
            name, nline, ncol = self.ident()
            if self.at("["):
                self.advance()
                idx = self.expr()
                self.expect("]")
                self.expect(":=")
                val = self.expr()
                self.expect(";")
                if name not in self.kinds:
                    raise UndefinedIdentifierError(name, nline, ncol)
                if self.kinds[name] != A.ARRAY:
                    raise TypeCheckError(f"{name!r} is not an array", nline, ncol)
                self.want(idx, A.INT, nline, ncol)
                self.want(val, A.INT, nline, ncol)
                return A.Store(name, idx, val, line=line)
            self.expect(":=")
            val = self.expr()
            self.expect(";")
            self.bind(name, self.type_of(val, nline, ncol), nline, ncol)
            return A.Assign(name, val, line=line)
        raise ParseError(f"unexpected {t or 'end of input'!r}", line, col)

    def if_(self):
        _, _, line, col = self.expect("if")
        self.expect("(")
        cond = self.expr()
        self.expect(")")
        self.want(cond, A.BOOL, line, col)
        then = self.block()
        orelse = []
        if self.at("else"):
            self.advance()
            orelse = [self.if_()] if self.at("if") else self.block()
        return A.If(cond, then, orelse, line=line)

    # -- typing / scoping
    def bind(self, name: str, kind: str, line: int, col: int):
        old = self.kinds.get(name)
        if old is not None and old != kind:
            raise TypeCheckError(f"{name!r} is {old}, cannot assign {kind}", line, col)
        self.kinds[name] = kind

    def want(self, e, kind: str, line: int, col: int):
        got = self.type_of(e, line, col)
        if got != kind:
            raise TypeCheckError(f"expected {kind} expression, got {got}", line, col)

    def type_of(self, e, line: int, col: int) -> str:
        if isinstance(e, A.Num):
            return A.INT
        if isinstance(e, A.BoolLit):
            return A.BOOL
        if isinstance(e, A.Var):
            return self.kinds[e.name]
        if isinstance(e, (A.Index, A.Len)):
            if self.kinds[e.name] != A.ARRAY:
                raise TypeCheckError(f"{e.name!r} is not an array", line, col)
            if isinstance(e, A.Index):
                self.want(e.index, A.INT, line, col)
            return A.INT
        if isinstance(e, A.Unary):
            kind = A.INT if e.op == "-" else A.BOOL
            self.want(e.operand, kind, line, col)
            return kind
        op = e.op
        if op in A.ARITH_OPS or op in ("<", "<=", ">", ">="):
            self.want(e.left, A.INT, line, col)
            self.want(e.right, A.INT, line, col)
            return A.INT if op in A.ARITH_OPS else A.BOOL
        if op in A.LOGIC_OPS:
            self.want(e.left, A.BOOL, line, col)
            self.want(e.right, A.BOOL, line, col)
            return A.BOOL
        lk = self.type_of(e.left, line, col)
        rk = self.type_of(e.right, line, col)
        if lk != rk or lk == A.ARRAY:
            raise TypeCheckError(f"cannot compare {lk} with {rk}", line, col)
        return A.BOOL

    # -- expressions
    def expr(self):
        return self.or_()

    def or_(self):
        e = self.and_()
        while self.at("||"):
            self.advance()
            e = A.Binary("||", e, self.and_())
        return e

    def and_(self):
        e = self.cmp()
        while self.at("&&"):
            self.advance()
            e = A.Binary("&&", e, self.cmp())
        return e

    def cmp(self):
        e = self.sum_()
        kind, t, _, _ = self.peek()
        if kind == "op" and t in _CMP:
            self.advance()
            e = A.Binary(t, e, self.sum_())
        return e

    def sum_(self):
        e = self.term()
        while self.at("+") or self.at("-"):
            op = self.advance()[1]
            e = A.Binary(op, e, self.term())
        return e

    def term(self):
        e = self.unary()
        while self.at("*") or self.at("/") or self.at("%"):
            op = self.advance()[1]
            e = A.Binary(op, e, self.unary())
        return e

    def unary(self):
        if self.at("-") or self.at("!"):
            op = self.advance()[1]
            return A.Unary(op, self.unary())
        return self.primary()

    def primary(self):
        kind, t, line, col = self.peek()
        if kind == "int":
            self.advance()
            return A.Num(int(t))
        if kind == "kw" and t in ("true", "false"):
            self.advance()
            return A.BoolLit(t == "true")
        if kind == "kw" and t == "len":
            self.advance()
            self.expect("(")
            name, nline, ncol = self.ident()
            self.expect(")")
            self.check_defined(name, nline, ncol)
            return A.Len(name)
        if kind == "ident":
            name, nline, ncol = self.ident()
            self.check_defined(name, nline, ncol)
            if self.at("["):
                self.advance()
                idx = self.expr()
                self.expect("]")
                return A.Index(name, idx)
            return A.Var(name)
        if self.at("("):
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        raise ParseError(f"unexpected {t or 'end of input'!r} in expression", line, col)

    def check_defined(self, name: str, line: int, col: int):
        if name not in self.kinds:
            raise UndefinedIdentifierError(name, line, col)


def parse(source: str, label: str | None = None) -> A.Program:
    """Parse ``source`` into a :class:`~tsl.minilang.ast.Program` with line numbers attached."""
    prog = _Parser(source).program()
    prog.source_lines = source.count("\n") + (0 if source.endswith("\n") else 1)
    prog.label = label
    return prog
