"""Random testing: input generation, coverage-ranked suite selection, filtering.

The shared suite for a problem is built by drawing ``100 * N`` random inputs,
scoring each by its mean line coverage over a sample of programs, and keeping
the top ``N``.  Programs that crash or disagree with the class oracle on any
suite input are dropped before traces are collected.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .minilang import MAX_ARRAY_LEN, Limits, Program, Trace, compile_program, executable_lines
from .minilang.traceio import decode_value, encode_value


class InputSpaceError(ValueError):
    """The input spec cannot produce the requested number of distinct inputs."""


@dataclass(frozen=True)
class IntGen:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty int range [{self.lo}, {self.hi}]")

    def size(self) -> int:
        return self.hi - self.lo + 1

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi, endpoint=True))

    def to_json(self):
        return {"kind": "int", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class BoolGen:
    def size(self) -> int:
        return 2

    def draw(self, rng: np.random.Generator) -> bool:
        return bool(rng.integers(0, 1, endpoint=True))

    def to_json(self):
        return {"kind": "bool"}


@dataclass(frozen=True)
class ArrayGen:
    len_lo: int
    len_hi: int
    elem_lo: int
    elem_hi: int

    def __post_init__(self):
        if not (0 <= self.len_lo <= self.len_hi <= MAX_ARRAY_LEN):
            raise ValueError(f"array length range [{self.len_lo}, {self.len_hi}] outside [0, {MAX_ARRAY_LEN}]")
        if self.elem_lo > self.elem_hi:
            raise ValueError(f"empty element range [{self.elem_lo}, {self.elem_hi}]")

    def size(self) -> int:
        k = self.elem_hi - self.elem_lo + 1
        return sum(k**n for n in range(self.len_lo, self.len_hi + 1))

    def draw(self, rng: np.random.Generator) -> tuple:
        n = int(rng.integers(self.len_lo, self.len_hi, endpoint=True))
        return tuple(int(x) for x in rng.integers(self.elem_lo, self.elem_hi, size=n, endpoint=True))

    def to_json(self):
        return {"kind": "array", "len": [self.len_lo, self.len_hi], "elem": [self.elem_lo, self.elem_hi]}


@dataclass(frozen=True)
class InputSpec:
    params: tuple
    seed: int = 0

    def size(self) -> int:
        return math.prod(g.size() for g in self.params)

    def with_seed(self, seed: int) -> "InputSpec":
        return InputSpec(self.params, seed)

    def to_json(self) -> dict:
        return {"seed": self.seed, "params": [g.to_json() for g in self.params]}

    @classmethod
    def from_json(cls, obj: dict) -> "InputSpec":
        gens = []
        for p in obj["params"]:
            if p["kind"] == "int":
                gens.append(IntGen(p["lo"], p["hi"]))
            elif p["kind"] == "bool":
                gens.append(BoolGen())
            elif p["kind"] == "array":
                gens.append(ArrayGen(p["len"][0], p["len"][1], p["elem"][0], p["elem"][1]))
            else:
                raise ValueError(f"unknown parameter kind {p['kind']!r}")
        return cls(tuple(gens), int(obj.get("seed", 0)))


def gen_inputs(spec: InputSpec, count: int) -> list[tuple]:
    """Draw ``count`` distinct inputs; the result for a smaller count is a prefix of a larger one."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if spec.size() < count:
        raise InputSpaceError(f"spec admits only {spec.size()} distinct inputs, {count} requested")
    rng = np.random.default_rng(spec.seed)
    seen: set = set()
    out = []
    while len(out) < count:
        inp = tuple(g.draw(rng) for g in spec.params)
        if inp not in seen:
            seen.add(inp)
            out.append(inp)
    return out


@dataclass
class TestSuite:
    inputs: list
    coverage_table: list  # mean per-input line coverage over the sample programs
    seed: int = 0
    problem: str = ""

    __test__ = False  # not a pytest class

    def __len__(self):
        return len(self.inputs)

    def to_json(self) -> str:
        return json.dumps({
            "problem": self.problem,
            "seed": self.seed,
            "n": len(self.inputs),
            "inputs": [[encode_value(v) for v in inp] for inp in self.inputs],
            "coverage": self.coverage_table,
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "TestSuite":
        obj = json.loads(text)
        inputs = [tuple(decode_value(v) for v in inp) for inp in obj["inputs"]]
        return cls(inputs, list(obj.get("coverage", [])), obj.get("seed", 0), obj.get("problem", ""))


def line_coverage(program: Program, trace: Trace) -> float:
    """Fraction of executable lines covered; an erroring run scores 0."""
    if trace.error is not None:
        return 0.0
    lines = executable_lines(program)
    return len(trace.covered_lines & lines) / len(lines)


def select_test_suite(sample_programs: list[Program], spec: InputSpec, n: int,
                      limits: Limits = Limits(), problem: str = "") -> TestSuite:
    if not sample_programs:
        raise ValueError("need at least one sample program")
    candidates = gen_inputs(spec, 100 * n)
    compiled = [compile_program(p) for p in sample_programs]
    scores = np.zeros(len(candidates))
    for c in compiled:
        lines = executable_lines(c.program)
        for k, inp in enumerate(candidates):
            t = c.run(inp, limits, record=False)
            if t.error is None:
                scores[k] += len(t.covered_lines & lines) / len(lines)
    scores /= len(compiled)
    # stable sort keeps the earlier candidate on ties
    top = np.argsort(-scores, kind="stable")[:n]
    return TestSuite([candidates[k] for k in top], [float(scores[k]) for k in top], spec.seed, problem)


def suite_coverage(programs: list[Program], suite: TestSuite, limits: Limits = Limits()) -> float:
    """Mean over ``programs`` of the fraction of executable lines covered by the whole suite."""
    total = 0.0
    for p in programs:
        c = compile_program(p)
        lines = executable_lines(p)
        covered = set()
        for inp in suite.inputs:
            t = c.run(inp, limits, record=False)
            covered |= t.covered_lines
        total += len(covered & lines) / len(lines)
    return total / len(programs)


def filter_programs(programs: list[Program], suite: TestSuite, oracle, limits: Limits = Limits()) -> list[Program]:
    """Keep programs that run cleanly on every suite input and match the oracle's output.

    ``oracle`` is either a single reference program or a mapping from class
    label to reference program.
    """
    expected: dict[int, list] = {}
    kept = []
    for p in programs:
        ref = oracle[p.label] if isinstance(oracle, dict) else oracle
        want = expected.get(id(ref))
        if want is None:
            c = compile_program(ref)
            want = expected[id(ref)] = [c.run(inp, limits, record=False) for inp in suite.inputs]
        c = compile_program(p)
        good = True
        for inp, ref_t in zip(suite.inputs, want):
            t = c.run(inp, limits, record=False)
            if t.error is not None or ref_t.error is not None or t.output != ref_t.output:
                good = False
                break
        if good:
            kept.append(p)
    return kept


def collect_traces(program: Program, suite: TestSuite, limits: Limits = Limits()) -> list[Trace]:
    c = compile_program(program)
    return [c.run(inp, limits) for inp in suite.inputs]


def load_spec(path) -> InputSpec:
    with open(path) as fh:
        return InputSpec.from_json(json.load(fh))
