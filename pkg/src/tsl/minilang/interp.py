"""Instrumented interpreter.

Program memory is the state vector itself: every variable owns a fixed range of
slots given by :func:`make_layout`, and each write that changes memory appends
a snapshot of the whole vector to the trace.  The AST is compiled once into
closures so that fuzzing thousands of inputs stays cheap.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from . import ast as A

MAX_ARRAY_LEN = 16
MAX_STATES = 1000
MAX_STEPS = 10_000
INT_MIN, INT_MAX = -(2**31), 2**31 - 1


class _Undef:
    __slots__ = ()

    def __repr__(self):
        return "U"

    def __reduce__(self):
        return "UNDEF"


UNDEF = _Undef()


class ExecutionError(Exception):
    """Raised inside the interpreter; ``kind`` ends up as the trace's error marker."""

    def __init__(self, kind: str, line: int = 0):
        super().__init__(f"{kind} at line {line}")
        self.kind = kind
        self.line = line


@dataclass(frozen=True)
class StateLayout:
    slots: tuple  # of (identifier, slot kind)
    offsets: dict = field(compare=False, repr=False)  # identifier -> first slot
    kinds: dict = field(compare=False, repr=False)  # identifier -> value kind
    variables: tuple = field(compare=False, repr=False)  # identifiers in slot order

    def __len__(self):
        return len(self.slots)

    def var_index(self) -> list[int]:
        """Position of each slot's variable in ``variables``."""
        pos = {v: i for i, v in enumerate(self.variables)}
        return [pos[v] for v, _ in self.slots]


def make_layout(program: A.Program, max_array_len: int = MAX_ARRAY_LEN) -> StateLayout:
    """Params in declaration order, then locals by first textual assignment."""
    order: dict[str, str] = {}
    for name, kind in program.params:
        order[name] = kind
    for s in A.walk_stmts(program.body):
        if isinstance(s, A.For) and s.var not in order:
            order[s.var] = A.INT
        elif isinstance(s, A.Assign) and s.name not in order:
            order[s.name] = _static_kind(s.expr, order)
    slots, offsets = [], {}
    for name, kind in order.items():
        offsets[name] = len(slots)
        if kind == A.ARRAY:
            slots.extend((name, f"elem:{k}") for k in range(max_array_len))
            slots.append((name, "len"))
        else:
            slots.append((name, kind))
    return StateLayout(tuple(slots), offsets, dict(order), tuple(order))


def _static_kind(e, kinds) -> str:
    if isinstance(e, (A.Num, A.Index, A.Len)):
        return A.INT
    if isinstance(e, A.BoolLit):
        return A.BOOL
    if isinstance(e, A.Var):
        return kinds[e.name]
    if isinstance(e, A.Unary):
        return A.INT if e.op == "-" else A.BOOL
    return A.INT if e.op in A.ARITH_OPS else A.BOOL


class ProgramState(NamedTuple):
    values: tuple
    step_line: int


@dataclass
class Trace:
    program: str
    input: tuple
    states: list
    output: Any = None
    error: str | None = None
    covered_lines: frozenset = frozenset()
    truncated: bool = False
    # (loop head line, number of states emitted so far, loop exited?)
    loop_events: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True)
class Limits:
    max_states: int = MAX_STATES
    max_steps: int = MAX_STEPS


class _Return(Exception):
    def __init__(self, value):
        self.value = value


def _check(v: int, line: int) -> int:
    if v < INT_MIN or v > INT_MAX:
        raise ExecutionError("integer-overflow", line)
    return v


def _div(a: int, b: int, line: int) -> int:
    if b == 0:
        raise ExecutionError("division-by-zero", line)
    q = abs(a) // abs(b)
    return _check(q if (a < 0) == (b < 0) else -q, line)


def _mod(a: int, b: int, line: int) -> int:
    if b == 0:
        raise ExecutionError("division-by-zero", line)
    q = abs(a) // abs(b)
    q = q if (a < 0) == (b < 0) else -q
    return a - b * q


class _Machine:
    __slots__ = ("slots", "states", "covered", "steps", "limits", "truncated", "events", "record")

    def __init__(self, n_slots: int, limits: Limits, record: bool = True):
        self.slots = [UNDEF] * n_slots
        self.record = record
        self.states = []
        self.covered = set()
        self.steps = 0
        self.limits = limits
        self.truncated = False
        self.events = []

    def tick(self, line: int):
        self.steps += 1
        if self.steps > self.limits.max_steps:
            raise ExecutionError("step-limit-exceeded", line)

    def emit(self, line: int):
        if not self.record:
            return
        if len(self.states) < self.limits.max_states:
            self.states.append(ProgramState(tuple(self.slots), line))
        else:
            self.truncated = True


class Compiled:
    """A program compiled against its layout; reusable across inputs."""

    def __init__(self, program: A.Program, max_array_len: int = MAX_ARRAY_LEN):
        self.program = program
        self.max_array_len = max_array_len
        self.layout = make_layout(program, max_array_len)
        self.body = self._block(program.body)

    # -- expressions
    def _expr(self, e, line: int):
        lay = self.layout
        if isinstance(e, (A.Num, A.BoolLit)):
            v = e.value
            return lambda m: v
        if isinstance(e, A.Var):
            off = lay.offsets[e.name]
            if lay.kinds[e.name] == A.ARRAY:
                lo = off + self.max_array_len

                def read_array(m):
                    n = m.slots[lo]
                    if n is UNDEF:
                        raise ExecutionError("undefined-read", line)
                    return tuple(m.slots[off:off + n])
                return read_array

            def read(m):
                v = m.slots[off]
                if v is UNDEF:
                    raise ExecutionError("undefined-read", line)
                return v
            return read
        if isinstance(e, A.Len):
            lo = lay.offsets[e.name] + self.max_array_len

            def length(m):
                n = m.slots[lo]
                if n is UNDEF:
                    raise ExecutionError("undefined-read", line)
                return n
            return length
        if isinstance(e, A.Index):
            off = lay.offsets[e.name]
            lo = off + self.max_array_len
            idx = self._expr(e.index, line)

            def index(m):
                n = m.slots[lo]
                if n is UNDEF:
                    raise ExecutionError("undefined-read", line)
                i = idx(m)
                if i < 0 or i >= n:
                    raise ExecutionError("index-out-of-bounds", line)
                return m.slots[off + i]
            return index
        if isinstance(e, A.Unary):
            f = self._expr(e.operand, line)
            if e.op == "!":
                return lambda m: not f(m)
            return lambda m: _check(-f(m), line)
        a, b = self._expr(e.left, line), self._expr(e.right, line)
        op = e.op
        if op == "&&":
            return lambda m: a(m) and b(m)
        if op == "||":
            return lambda m: a(m) or b(m)
        if op == "+":
            return lambda m: _check(a(m) + b(m), line)
        if op == "-":
            return lambda m: _check(a(m) - b(m), line)
        if op == "*":
            return lambda m: _check(a(m) * b(m), line)
        if op == "/":
            return lambda m: _div(a(m), b(m), line)
        if op == "%":
            return lambda m: _mod(a(m), b(m), line)
        if op == "<":
            return lambda m: a(m) < b(m)
        if op == "<=":
            return lambda m: a(m) <= b(m)
        if op == ">":
            return lambda m: a(m) > b(m)
        if op == ">=":
            return lambda m: a(m) >= b(m)
        if op == "==":
            return lambda m: a(m) == b(m)
        if op == "!=":
            return lambda m: a(m) != b(m)
        raise ValueError(op)

    # -- writes
    def _writer(self, name: str, line: int):
        off = self.layout.offsets[name]
        if self.layout.kinds[name] != A.ARRAY:
            def write(m, v):
                if m.slots[off] is UNDEF or m.slots[off] != v:
                    m.slots[off] = v
                    m.emit(line)
            return write
        lo = off + self.max_array_len

        def write_array(m, vals):
            n = m.slots[lo]
            if n is not UNDEF and n != len(vals):
                raise ExecutionError("array-resize", line)
            if n is UNDEF or tuple(m.slots[off:off + len(vals)]) != vals:
                m.slots[off:off + len(vals)] = vals
                m.slots[lo] = len(vals)
                m.emit(line)
        return write_array

    # -- statements
    def _block(self, stmts):
        fns = [self._stmt(s) for s in stmts]

        def run(m):
            for f in fns:
                f(m)
        return run

    def _stmt(self, s):
        line = s.line
        if isinstance(s, A.Assign):
            val = self._expr(s.expr, line)
            write = self._writer(s.name, line)

            def assign(m):
                m.tick(line)
                m.covered.add(line)
                write(m, val(m))
            return assign
        if isinstance(s, A.Store):
            off = self.layout.offsets[s.name]
            lo = off + self.max_array_len
            idx, val = self._expr(s.index, line), self._expr(s.expr, line)

            def store(m):
                m.tick(line)
                m.covered.add(line)
                n = m.slots[lo]
                if n is UNDEF:
                    raise ExecutionError("undefined-read", line)
                i = idx(m)
                if i < 0 or i >= n:
                    raise ExecutionError("index-out-of-bounds", line)
                v = val(m)
                if m.slots[off + i] != v:
                    m.slots[off + i] = v
                    m.emit(line)
            return store
        if isinstance(s, A.If):
            cond = self._expr(s.cond, line)
            then, orelse = self._block(s.then), self._block(s.orelse)

            def if_(m):
                m.tick(line)
                m.covered.add(line)
                if cond(m):
                    then(m)
                else:
                    orelse(m)
            return if_
        if isinstance(s, A.While):
            cond = self._expr(s.cond, line)
            body = self._block(s.body)

            def while_(m):
                m.covered.add(line)
                while True:
                    m.tick(line)
                    go = cond(m)
                    if m.record and not m.truncated:
                        m.events.append((line, len(m.states), not go))
                    if not go:
                        return
                    body(m)
            return while_
        if isinstance(s, A.For):
            lo_f, hi_f = self._expr(s.lo, line), self._expr(s.hi, line)
            write = self._writer(s.var, line)
            off = self.layout.offsets[s.var]
            body = self._block(s.body)

            def for_(m):
                m.covered.add(line)
                m.tick(line)
                write(m, lo_f(m))
                while True:
                    m.tick(line)
                    go = m.slots[off] < hi_f(m)
                    if m.record and not m.truncated:
                        m.events.append((line, len(m.states), not go))
                    if not go:
                        return
                    body(m)
                    write(m, _check(m.slots[off] + 1, line))
            return for_
        if isinstance(s, A.Return):
            val = self._expr(s.expr, line)

            def ret(m):
                m.tick(line)
                m.covered.add(line)
                raise _Return(val(m))
            return ret
        raise TypeError(s)

    # -- entry point
    def run(self, inputs, limits: Limits = Limits(), record: bool = True) -> Trace:
        """Execute on ``inputs``; with ``record=False`` only output and coverage are kept."""
        prog = self.program
        inputs = tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in inputs)
        _check_inputs(prog, inputs, self.max_array_len)
        m = _Machine(len(self.layout), limits, record)
        trace = Trace(prog.name, inputs, m.states)
        try:
            m.covered.add(prog.header_line)
            for (name, _), v in zip(prog.params, inputs):
                self._writer(name, prog.header_line)(m, v)
            self.body(m)
            trace.error = "missing-return"
        except _Return as r:
            trace.output = r.value
        except ExecutionError as err:
            trace.error = err.kind
        except RecursionError:
            trace.error = "step-limit-exceeded"
        trace.covered_lines = frozenset(m.covered)
        trace.truncated = m.truncated
        trace.loop_events = m.events
        return trace


def _check_inputs(prog: A.Program, inputs: tuple, max_array_len: int):
    if len(inputs) != len(prog.params):
        raise ValueError(f"{prog.name} takes {len(prog.params)} inputs, got {len(inputs)}")
    for (name, kind), v in zip(prog.params, inputs):
        if kind == A.BOOL:
            ok = isinstance(v, bool)
        elif kind == A.INT:
            ok = isinstance(v, int) and not isinstance(v, bool) and INT_MIN <= v <= INT_MAX
        else:
            ok = (isinstance(v, tuple) and len(v) <= max_array_len
                  and all(isinstance(x, int) and not isinstance(x, bool) and INT_MIN <= x <= INT_MAX for x in v))
        if not ok:
            raise ValueError(f"input for {name!r} is not a valid {kind}: {v!r}")


_CACHE: dict = {}


def compile_program(program: A.Program, max_array_len: int = MAX_ARRAY_LEN) -> Compiled:
    key = (id(program), max_array_len)
    hit = _CACHE.get(key)
    if hit is not None and hit[0]() is program:
        return hit[1]
    if len(_CACHE) > 4096:
        for k in [k for k, (ref, _) in _CACHE.items() if ref() is None]:
            del _CACHE[k]
    compiled = Compiled(program, max_array_len)
    _CACHE[key] = (weakref.ref(program), compiled)
    return compiled


def execute(program: A.Program, inputs, limits: Limits = Limits(),
            max_array_len: int = MAX_ARRAY_LEN) -> Trace:
    """Run ``program`` on ``inputs`` and return the recorded :class:`Trace`.

    Execution errors never raise; they are reported through ``Trace.error``.
    """
    return compile_program(program, max_array_len).run(inputs, limits)
