"""Semantics-preserving source transforms used to grow each class into variants.

Each transform takes a program and a numpy ``Generator`` and returns a new
program, or raises :class:`NotApplicable` when the program has no suitable site.
Programs returned here still carry stale line numbers; callers re-render them.
"""
from __future__ import annotations

import copy
from dataclasses import replace

import numpy as np

from ..minilang import ast as A
from ..minilang.interp import make_layout


class NotApplicable(Exception):
    pass


# -- generic rewriting -------------------------------------------------------

def _map_expr(e, fn):
    """Bottom-up rebuild of an expression; ``fn`` may replace any node."""
    if isinstance(e, A.Index):
        e = A.Index(e.name, _map_expr(e.index, fn))
    elif isinstance(e, A.Unary):
        e = A.Unary(e.op, _map_expr(e.operand, fn))
    elif isinstance(e, A.Binary):
        e = A.Binary(e.op, _map_expr(e.left, fn), _map_expr(e.right, fn))
    return fn(e)


def _map_stmt_exprs(body, fn):
    for s in A.walk_stmts(body):
        if isinstance(s, A.Assign):
            s.expr = _map_expr(s.expr, fn)
        elif isinstance(s, A.Store):
            s.index = _map_expr(s.index, fn)
            s.expr = _map_expr(s.expr, fn)
        elif isinstance(s, (A.If, A.While)):
            s.cond = _map_expr(s.cond, fn)
        elif isinstance(s, A.For):
            s.lo = _map_expr(s.lo, fn)
            s.hi = _map_expr(s.hi, fn)
        elif isinstance(s, A.Return):
            s.expr = _map_expr(s.expr, fn)


def _blocks(body):
    """Every statement list in the program, outermost first."""
    yield body
    for s in body:
        if isinstance(s, A.If):
            yield from _blocks(s.then)
            yield from _blocks(s.orelse)
        elif isinstance(s, A.LOOPS):
            yield from _blocks(s.body)


def _all_names(p: A.Program) -> set[str]:
    return set(make_layout(p).variables)


def _fresh(p: A.Program, base: str) -> str:
    used = _all_names(p)
    if base not in used:
        return base
    k = 1
    while f"{base}{k}" in used:
        k += 1
    return f"{base}{k}"


def _writes(s) -> set[str]:
    if isinstance(s, (A.Assign, A.Store)):
        return {s.name}
    if isinstance(s, A.For):
        return {s.var} | {w for b in s.body for w in _writes(b)}
    if isinstance(s, A.If):
        return {w for b in s.then + s.orelse for w in _writes(b)}
    if isinstance(s, A.While):
        return {w for b in s.body for w in _writes(b)}
    return set()


def _reads(s) -> set[str]:
    out = set()
    for e in A.stmt_exprs(s):
        out |= A.expr_reads(e)
    if isinstance(s, A.Store):
        out.add(s.name)  # a partial write keeps the rest of the array
    return out


# -- transforms --------------------------------------------------------------

_NAME_POOL = ("x", "y", "z", "u", "w", "p", "q", "m", "acc", "idx", "cur", "val", "cnt", "pos",
              "res", "tmp", "aux", "arr", "lim", "ptr", "buf", "num", "step", "mark")


def rename_variables(p: A.Program, rng: np.random.Generator) -> A.Program:
    names = list(make_layout(p).variables)
    pool = list(_NAME_POOL)
    rng.shuffle(pool)
    mapping = {}
    for k, old in enumerate(names):
        base = pool[k % len(pool)]
        mapping[old] = base if k < len(pool) else f"{base}{k}"
    q = copy.deepcopy(p)

    def ren(e):
        if isinstance(e, (A.Var, A.Index, A.Len)):
            return replace(e, name=mapping[e.name])
        return e
    _map_stmt_exprs(q.body, ren)
    for s in A.walk_stmts(q.body):
        if isinstance(s, (A.Assign, A.Store)):
            s.name = mapping[s.name]
        elif isinstance(s, A.For):
            s.var = mapping[s.var]
    q.params = [(mapping[n], k) for n, k in q.params]
    return q


def add_temporary_variable(p: A.Program, rng: np.random.Generator) -> A.Program:
    q = copy.deepcopy(p)
    kinds = make_layout(q).kinds
    sites = [(blk, i) for blk in _blocks(q.body) for i, s in enumerate(blk)
             if isinstance(s, A.Assign) and kinds[s.name] != A.ARRAY]
    if not sites:
        raise NotApplicable("no scalar assignment")
    blk, i = sites[int(rng.integers(len(sites)))]
    s = blk[i]
    tmp = _fresh(q, "tmp")
    blk[i:i + 1] = [A.Assign(tmp, s.expr), A.Assign(s.name, A.Var(tmp))]
    return q


_FLIP = {"+": "+", "*": "*", "==": "==", "!=": "!=", "<": ">", ">": "<", "<=": ">=", ">=": "<="}


def swap_commutative_operands(p: A.Program, rng: np.random.Generator) -> A.Program:
    q = copy.deepcopy(p)
    count = [0]

    def census(e):
        if isinstance(e, A.Binary) and e.op in _FLIP:
            count[0] += 1
        return e
    _map_stmt_exprs(q.body, census)
    if count[0] == 0:
        raise NotApplicable("no commutative operator")
    target = int(rng.integers(count[0]))
    seen = [0]

    def swap(e):
        if isinstance(e, A.Binary) and e.op in _FLIP:
            hit = seen[0] == target
            seen[0] += 1
            if hit:
                return A.Binary(_FLIP[e.op], e.right, e.left)
        return e
    _map_stmt_exprs(q.body, swap)
    return q


def reorder_independent_statements(p: A.Program, rng: np.random.Generator) -> A.Program:
    q = copy.deepcopy(p)
    sites = []
    for blk in _blocks(q.body):
        for i in range(len(blk) - 1):
            a, b = blk[i], blk[i + 1]
            if not (isinstance(a, (A.Assign, A.Store)) and isinstance(b, (A.Assign, A.Store))):
                continue
            wa, wb = _writes(a), _writes(b)
            if wa & (_reads(b) | wb) or wb & _reads(a):
                continue
            sites.append((blk, i))
    if not sites:
        raise NotApplicable("no independent adjacent statements")
    blk, i = sites[int(rng.integers(len(sites)))]
    blk[i], blk[i + 1] = blk[i + 1], blk[i]
    return q


def loop_counter_direction(p: A.Program, rng: np.random.Generator) -> A.Program:
    """Rewrite ``for i in lo .. hi`` as a down-counting ``while`` that recomputes ``i``."""
    q = copy.deepcopy(p)
    sites = []
    for blk in _blocks(q.body):
        for i, s in enumerate(blk):
            if not isinstance(s, A.For):
                continue
            body_writes = {w for b in s.body for w in _writes(b)}
            bound_reads = A.expr_reads(s.lo) | A.expr_reads(s.hi)
            if s.var in body_writes or body_writes & bound_reads or s.var in bound_reads:
                continue
            if _referenced_outside(q, s):
                continue
            sites.append((blk, i))
    if not sites:
        raise NotApplicable("no eligible for-loop")
    blk, i = sites[int(rng.integers(len(sites)))]
    s = blk[i]
    c = _fresh(q, "c")
    loop = A.While(
        A.Binary(">", A.Var(c), A.Num(0)),
        [A.Assign(s.var, A.Binary("-", s.hi, A.Var(c)))] + s.body + [A.Assign(c, A.Binary("-", A.Var(c), A.Num(1)))],
    )
    blk[i:i + 1] = [A.Assign(c, A.Binary("-", s.hi, s.lo)), loop]
    return q


def _referenced_outside(p: A.Program, loop: A.For) -> bool:
    inside = {id(s) for s in A.walk_stmts(loop.body)} | {id(loop)}
    for s in A.walk_stmts(p.body):
        if id(s) in inside:
            continue
        if loop.var in _reads(s) or (isinstance(s, (A.Assign, A.Store)) and s.name == loop.var) \
                or (isinstance(s, A.For) and s.var == loop.var):
            return True
    return any(n == loop.var for n, _ in p.params)


TRANSFORMS = {
    "rename-variables": rename_variables,
    "add-temporary-variable": add_temporary_variable,
    "swap-commutative-operands": swap_commutative_operands,
    "reorder-independent-statements": reorder_independent_statements,
    "loop-counter-direction-with-index-fixup": loop_counter_direction,
}

# transforms drawn to seed a lineage; renaming is reserved for members within one
STRUCTURAL = ("add-temporary-variable", "reorder-independent-statements",
              "loop-counter-direction-with-index-fixup", "swap-commutative-operands")
