"""AST node types for the mini imperative language.

Line numbers are carried on statements but excluded from equality, so two
programs compare equal when they have the same structure regardless of layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

INT = "int"
BOOL = "bool"
ARRAY = "int[]"
KINDS = (INT, BOOL, ARRAY)


# -- expressions -------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class BoolLit:
    value: bool


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Index:
    name: str
    index: "Expr"


@dataclass(frozen=True)
class Len:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "!"
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Num, BoolLit, Var, Index, Len, Unary, Binary]

ARITH_OPS = ("+", "-", "*", "/", "%")
COMPARE_OPS = ("<", "<=", ">", ">=", "==", "!=")
LOGIC_OPS = ("&&", "||")


# -- statements --------------------------------------------------------------

@dataclass
class Assign:
    name: str
    expr: Expr
    line: int = field(default=0, compare=False)


@dataclass
class Store:
    name: str
    index: Expr
    expr: Expr
    line: int = field(default=0, compare=False)


@dataclass
class If:
    cond: Expr
    then: list
    orelse: list
    line: int = field(default=0, compare=False)


@dataclass
class While:
    cond: Expr
    body: list
    line: int = field(default=0, compare=False)


@dataclass
class For:
    """``for var in lo .. hi { body }``; the bound ``hi`` is re-evaluated at every head check."""

    var: str
    lo: Expr
    hi: Expr
    body: list
    line: int = field(default=0, compare=False)


@dataclass
class Return:
    expr: Expr
    line: int = field(default=0, compare=False)


Stmt = Union[Assign, Store, If, While, For, Return]
LOOPS = (While, For)


@dataclass
class Program:
    name: str
    params: list  # list of (identifier, kind)
    body: list
    source_lines: int = field(default=0, compare=False)
    header_line: int = field(default=1, compare=False)
    label: str | None = field(default=None, compare=False)

    @property
    def param_names(self) -> list[str]:
        return [p for p, _ in self.params]


def walk_stmts(body):
    """Yield every statement in ``body`` in textual (pre-)order."""
    for s in body:
        yield s
        if isinstance(s, If):
            yield from walk_stmts(s.then)
            yield from walk_stmts(s.orelse)
        elif isinstance(s, LOOPS):
            yield from walk_stmts(s.body)


def walk_expr(e):
    yield e
    if isinstance(e, Index):
        yield from walk_expr(e.index)
    elif isinstance(e, Unary):
        yield from walk_expr(e.operand)
    elif isinstance(e, Binary):
        yield from walk_expr(e.left)
        yield from walk_expr(e.right)


def stmt_exprs(s) -> list:
    if isinstance(s, Assign):
        return [s.expr]
    if isinstance(s, Store):
        return [s.index, s.expr]
    if isinstance(s, (If, While)):
        return [s.cond]
    if isinstance(s, For):
        return [s.lo, s.hi]
    if isinstance(s, Return):
        return [s.expr]
    raise TypeError(s)


def expr_reads(e) -> set[str]:
    out = set()
    for node in walk_expr(e):
        if isinstance(node, (Var, Index, Len)):
            out.add(node.name)
    return out


def loops(program: Program) -> list:
    return [s for s in walk_stmts(program.body) if isinstance(s, LOOPS)]


def executable_lines(program: Program) -> set[int]:
    return {program.header_line} | {s.line for s in walk_stmts(program.body)}
