"""Desk-scale labeled corpus: reference algorithms per class plus syntactic variants.

Each class is one (problem, algorithm) pair with a hand-checked oracle program.
Variants come in lineages: a lineage fixes a chain of structural transforms and
its members differ only by renaming and operand order, so members share traces.
Splits are assigned per lineage to keep near-duplicates out of held-out data.
"""
from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from ..fuzz import ArrayGen, InputSpec, IntGen, TestSuite, collect_traces, filter_programs, select_test_suite
from ..minilang import Program, parse, pretty_print
from .transforms import STRUCTURAL, TRANSFORMS, NotApplicable

PROBLEMS = {
    "maxdiff": InputSpec((ArrayGen(2, 14, 0, 20),)),
    "reverse": InputSpec((ArrayGen(0, 16, 0, 9),)),
    "sumtwo": InputSpec((IntGen(-50, 50), IntGen(-50, 50))),
    "paren": InputSpec((ArrayGen(0, 16, 0, 2),)),
}

SHIPPED = (
    ("maxdiff", "bubble"), ("maxdiff", "insertion"), ("maxdiff", "minmax"),
    ("reverse", "swap"), ("reverse", "copy"), ("reverse", "rotate"),
    ("sumtwo", "direct"), ("sumtwo", "increment"),
    ("paren", "counter"), ("paren", "stack"),
)


class CorpusError(RuntimeError):
    pass


def load_source(name: str) -> str:
    return resources.files(__package__).joinpath("programs", f"{name}.mini").read_text()


@dataclass
class SemanticClass:
    problem: str
    algorithm: str
    oracle: Program

    @property
    def label(self) -> str:
        return f"{self.problem}/{self.algorithm}"


def semantic_class(problem: str, algorithm: str) -> SemanticClass:
    label = f"{problem}/{algorithm}"
    return SemanticClass(problem, algorithm, parse(load_source(f"{problem}_{algorithm}"), label=label))


def shipped_classes() -> list[SemanticClass]:
    return [semantic_class(p, a) for p, a in SHIPPED]


def figure1_pair() -> tuple[Program, Program]:
    """Bubble-sort and insertion-sort max-difference functions (same problem, distinct classes)."""
    return semantic_class("maxdiff", "bubble").oracle, semantic_class("maxdiff", "insertion").oracle


def figure4_program() -> Program:
    """Nested-loop max-difference whose inner loop keeps ``max >= diff``."""
    return parse(load_source("figure4_maxdiff"), label="maxdiff/pairwise")


@dataclass
class CorpusProgram:
    program: Program
    label: str
    lineage: str
    split: str
    chain: tuple

    @property
    def source(self) -> str:
        return pretty_print(self.program)


@dataclass
class Corpus:
    classes: list
    programs: list
    suites: dict  # problem -> TestSuite
    seed: int
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = [c.label for c in self.classes]

    def split(self, name: str) -> list[CorpusProgram]:
        return [p for p in self.programs if p.split == name]

    def label_index(self, label: str) -> int:
        return self.labels.index(label)

    def problem_of(self, label: str) -> str:
        return label.split("/")[0]

    def suite_for(self, label: str) -> TestSuite:
        return self.suites[self.problem_of(label)]

    def oracles(self) -> dict:
        return {c.label: c.oracle for c in self.classes}

    def manifest(self) -> dict:
        out: dict = {}
        for k, cp in enumerate(self.programs):
            out.setdefault(cp.label, []).append({
                "file": _file_name(k, cp), "lineage": cp.lineage, "split": cp.split,
                "chain": list(cp.chain),
            })
        return out

    def save(self, directory) -> None:
        """Write ``.mini`` files, ``manifest.json`` and one suite file per problem."""
        from .._io import atomic_write_text
        os.makedirs(os.path.join(directory, "programs"), exist_ok=True)
        for k, cp in enumerate(self.programs):
            atomic_write_text(os.path.join(directory, "programs", _file_name(k, cp)), cp.source)
        atomic_write_text(os.path.join(directory, "manifest.json"),
                          json.dumps({"seed": self.seed, "labels": self.labels, "classes": self.manifest()},
                                     indent=1, sort_keys=True))
        for problem, suite in self.suites.items():
            atomic_write_text(os.path.join(directory, f"suite_{problem}.json"), suite.to_json())

    @classmethod
    def load(cls, directory) -> "Corpus":
        with open(os.path.join(directory, "manifest.json")) as fh:
            man = json.load(fh)
        classes = {}
        programs = []
        for label, entries in man["classes"].items():
            problem, algorithm = label.split("/")
            classes[label] = semantic_class(problem, algorithm)
            for e in entries:
                with open(os.path.join(directory, "programs", e["file"])) as fh:
                    prog = parse(fh.read(), label=label)
                programs.append((e["file"], CorpusProgram(prog, label, e["lineage"], e["split"], tuple(e["chain"]))))
        programs.sort(key=lambda kv: kv[0])
        suites = {}
        for problem in {lbl.split("/")[0] for lbl in classes}:
            with open(os.path.join(directory, f"suite_{problem}.json")) as fh:
                suites[problem] = TestSuite.from_json(fh.read())
        ordered = [classes[lbl] for lbl in man["labels"] if lbl in classes]
        return cls(ordered, [cp for _, cp in programs], suites, man["seed"], list(man["labels"]))


def _file_name(k: int, cp: CorpusProgram) -> str:
    return f"{k:04d}_{cp.label.replace('/', '_')}.mini"


def _rng(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng([seed] + [zlib.crc32(str(p).encode()) for p in parts])


def _apply_chain(oracle: Program, chain, rng) -> tuple[Program, tuple]:
    prog, applied = oracle, []
    for name in chain:
        try:
            prog = TRANSFORMS[name](prog, rng)
        except NotApplicable:
            continue
        applied.append(name)
    prog = parse(pretty_print(prog), label=oracle.label)
    return prog, tuple(applied)


def _lineage_chain(oracle: Program, rng) -> list[str]:
    k = int(rng.integers(1, 3))
    order = [STRUCTURAL[i] for i in rng.permutation(len(STRUCTURAL))]
    chain = []
    probe = np.random.default_rng(0)
    for name in order:
        try:
            TRANSFORMS[name](oracle, probe)
        except NotApplicable:
            continue
        chain.append(name)
        if len(chain) == k:
            break
    return chain


def make_variants(cls: SemanticClass, count: int, seed: int, lineage_size: int = 5) -> list[CorpusProgram]:
    """The oracle followed by ``count - 1`` transformed variants, grouped into lineages."""
    out = []
    chains = {}
    for v in range(count):
        lineage, member = divmod(v, lineage_size)
        if lineage not in chains:
            chains[lineage] = [] if lineage == 0 else _lineage_chain(cls.oracle, _rng(seed, cls.label, lineage))
        chain = list(chains[lineage])
        if member > 0:
            chain.append("rename-variables")
            if member % 2 == 0 and len(chain) < 3:
                chain.append("swap-commutative-operands")
        rng = _rng(seed, cls.label, lineage, member)
        if not chain:
            prog, applied = cls.oracle, ()
        else:
            prog, applied = _apply_chain(cls.oracle, chain, rng)
        out.append(CorpusProgram(prog, cls.label, f"{cls.label}#{lineage}", "", applied))
    return out


def traces_differ(a: list, b: list) -> bool:
    """True when two same-suite trace lists differ in some execution's state-value sequence."""
    for ta, tb in zip(a, b):
        sa = [tuple(map(repr, s.values)) for s in ta.states]
        sb = [tuple(map(repr, s.values)) for s in tb.states]
        if sa != sb:
            return True
    return False


def build_corpus(classes=None, variants_per_class: int = 60, seed: int = 0, n_inputs: int = 30,
                 sample_size: int = 10, lineage_size: int = 5,
                 split_fractions=(0.7, 0.15, 0.15)) -> Corpus:
    """Generate, verify and split the labeled corpus; a pure function of its arguments."""
    if variants_per_class < 1:
        raise ValueError("variants_per_class must be >= 1")
    classes = list(classes) if classes is not None else shipped_classes()
    if not classes:
        raise ValueError("need at least one class")
    variants = {c.label: make_variants(c, variants_per_class, seed, lineage_size) for c in classes}

    suites = {}
    for problem in dict.fromkeys(c.problem for c in classes):
        sample = [cp.program for c in classes if c.problem == problem for cp in variants[c.label][:sample_size]]
        spec = PROBLEMS[problem].with_seed(int(_rng(seed, "suite", problem).integers(2**62)))
        suites[problem] = select_test_suite(sample, spec, n_inputs, problem=problem)

    for c in classes:
        progs = [cp.program for cp in variants[c.label]]
        kept = {id(p) for p in filter_programs(progs, suites[c.problem], c.oracle)}
        for cp in variants[c.label]:
            if id(cp.program) not in kept:
                raise CorpusError(f"{c.label}: transform chain {list(cp.chain)} changed program semantics")

    by_problem: dict = {}
    for c in classes:
        by_problem.setdefault(c.problem, []).append(c)
    for problem, group in by_problem.items():
        traces = {c.label: collect_traces(c.oracle, suites[problem]) for c in group}
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                if not traces_differ(traces[a.label], traces[b.label]):
                    raise CorpusError(f"{a.label} and {b.label} produce identical traces on the suite")

    programs = []
    for c in classes:
        lineages = list(dict.fromkeys(cp.lineage for cp in variants[c.label]))
        split_of = _split_lineages(lineages, _rng(seed, "split", c.label), split_fractions)
        for cp in variants[c.label]:
            cp.split = split_of[cp.lineage]
            programs.append(cp)
    return Corpus(classes, programs, suites, seed)


def _split_lineages(lineages: list, rng, fractions) -> dict:
    order = [lineages[i] for i in rng.permutation(len(lineages))]
    n = len(order)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = int(round(fractions[1] * n)) if n - n_train > 1 else 0
    out = {}
    for k, lin in enumerate(order):
        out[lin] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    return out
