"""Likely loop invariants: template proposal, dynamic verification, mutation negatives, and a scoring head.

A candidate is a token sequence such as ``("max", ">=", "diff")`` or
``("i", "<=", "n", "+", "1")``.  Tokens are variable names, decimal integer
literals, comparison and arithmetic operators, and parentheses.  A candidate
holds at a loop when it evaluates true at every loop-head check (including
the final, failing one that exits the loop) of every trace.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from . import tensor as T
from .minilang import INT, Program, Trace, loops, make_layout
from .model import OPERATORS, ModelParams, ProgramTraces, ValueVocab, embed_batch, make_batch
from .tensor import Tensor

MIN_ITERS = 3
COMPARISONS = ("<=", "<", ">=", ">", "==", "!=")
# the strict/non-strict (or equal/unequal) partner of each comparison
_PARTNER = {">=": ">", ">": ">=", "<=": "<", "<": "<=", "==": "!=", "!=": "=="}
_FLIP = {"<=": ">=", "<": ">", ">=": "<=", ">": "<", "==": "==", "!=": "!="}
_ARITH = ("+", "-", "*")
_INT = re.compile(r"-?\d+$")
_IDENT = re.compile(r"[A-Za-z_]\w*$")


class CandidateError(ValueError):
    pass


class NoMutantError(ValueError):
    """No single-token mutation of a candidate is falsified by the traces."""


@dataclass(frozen=True)
class LoopSite:
    program: str
    loop_id: int
    head_line: int
    variables: tuple  # int scalars of the layout, in layout order


@dataclass(frozen=True)
class InvariantCandidate:
    tokens: tuple
    site: LoopSite
    label: str | None = None  # "invariant" | "non-invariant"

    def text(self) -> str:
        return " ".join(self.tokens)


def loop_sites(program: Program) -> list[LoopSite]:
    layout = make_layout(program)
    scalars = tuple(v for v in layout.variables if layout.kinds[v] == INT)
    return [LoopSite(program.name, k, s.line, scalars) for k, s in enumerate(loops(program))]


# -- expressions over tokens ---------------------------------------------------

def _parse(tokens) -> tuple:
    """Parse ``arith cmp arith``; returns a nested tuple tree."""
    toks = list(tokens)
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else None

    def take():
        nonlocal pos
        pos += 1
        return toks[pos - 1]

    def atom():
        t = peek()
        if t == "(":
            take()
            e = arith()
            if peek() != ")":
                raise CandidateError("unbalanced parentheses")
            take()
            return e
        if t is None:
            raise CandidateError("unexpected end of candidate")
        if _INT.match(t):
            take()
            return ("lit", int(t))
        if _IDENT.match(t):
            take()
            return ("var", t)
        raise CandidateError(f"unexpected token {t!r}")

    def term():
        e = atom()
        while peek() == "*":
            take()
            e = ("*", e, atom())
        return e

    def arith():
        e = term()
        while peek() in ("+", "-"):
            op = take()
            e = (op, e, term())
        return e

    left = arith()
    op = peek()
    if op not in COMPARISONS:
        raise CandidateError("candidate must be a comparison")
    take()
    right = arith()
    if pos != len(toks):
        raise CandidateError(f"trailing tokens in {' '.join(toks)!r}")
    return (op, left, right)


def _eval(node, env: dict):
    kind = node[0]
    if kind == "lit":
        return node[1]
    if kind == "var":
        v = env.get(node[1])
        if v is None:
            raise CandidateError(f"variable {node[1]} is undefined")
        return v
    a, b = _eval(node[1], env), _eval(node[2], env)
    return {"+": lambda: a + b, "-": lambda: a - b, "*": lambda: a * b, "<=": lambda: a <= b, "<": lambda: a < b,
            ">=": lambda: a >= b, ">": lambda: a > b, "==": lambda: a == b, "!=": lambda: a != b}[kind]()


def candidate_variables(tokens) -> list[str]:
    return [t for t in tokens if _IDENT.match(t)]


def check_candidate(tokens, site: LoopSite):
    _parse(tokens)
    for v in candidate_variables(tokens):
        if v not in site.variables:
            raise CandidateError(f"variable {v} is not an int scalar of {site.program}")


# -- trace access ----------------------------------------------------------------

def head_states(program: Program, traces: list[Trace], site: LoopSite) -> list[dict]:
    """Variable environments at every head check of ``site`` (entries and the exit check)."""
    layout = make_layout(program)
    offs = {v: layout.offsets[v] for v in site.variables}
    out = []
    for tr in traces:
        for line, n, _exited in tr.loop_events:
            if line != site.head_line:
                continue
            values = tr.states[n - 1].values if n else None
            env = {}
            for v, o in offs.items():
                x = values[o] if values is not None else None
                env[v] = x if isinstance(x, int) and not isinstance(x, bool) else None
            out.append(env)
    return out


def iterations(traces: list[Trace], site: LoopSite) -> int:
    return sum(1 for tr in traces for line, _n, exited in tr.loop_events if line == site.head_line and not exited)


def find_violation(candidate: InvariantCandidate, program: Program, traces: list[Trace]) -> str | None:
    """None if ``candidate`` holds at every head check, otherwise a diagnostic."""
    tree = _parse(candidate.tokens)
    envs = head_states(program, traces, candidate.site)
    if not envs:
        return "loop head never reached"
    for k, env in enumerate(envs):
        try:
            ok = _eval(tree, env)
        except CandidateError as err:
            return f"head check {k}: {err}"
        if not ok:
            return f"head check {k}: false at {env}"
    return None


def verify_on_traces(candidate: InvariantCandidate, program: Program, traces: list[Trace]) -> bool:
    return find_violation(candidate, program, traces) is None


# -- proposal ------------------------------------------------------------------------

def normalize(tokens, order) -> tuple:
    """Canonical orientation: a two-variable comparison puts the earlier variable (in ``order``) first."""
    toks = tuple(tokens)
    if len(toks) == 3 and toks[1] in COMPARISONS:
        a, op, b = toks
        a_var, b_var = a in order, b in order
        if (b_var and not a_var) or (a_var and b_var and order.index(b) < order.index(a)):
            return (b, _FLIP[op], a)
    return toks


def _literal(c: int) -> str:
    return str(int(c))


def propose_invariants(program: Program, traces: list[Trace], site: LoopSite,
                       min_iters: int = MIN_ITERS) -> list[InvariantCandidate]:
    """Template instances that hold at every head check, deduplicated after normalization."""
    if iterations(traces, site) < min_iters:
        return []
    envs = head_states(program, traces, site)
    names = [v for v in site.variables if envs and all(e[v] is not None for e in envs)]
    cols = {v: np.array([e[v] for e in envs], dtype=np.int64) for v in names}
    templates = []
    for v in names:
        for op in COMPARISONS:
            templates.append((v, op, "0"))
        for c in sorted({int(cols[v].min()), int(cols[v].max())}):
            for op in COMPARISONS:
                templates.append((v, op, _literal(c)))
    for v1, v2 in combinations(names, 2):
        for op in COMPARISONS:
            templates.append((v1, op, v2))
        diff = cols[v1] - cols[v2]
        for c in sorted({int(diff.min()), int(diff.max())} - {0}):
            for op in COMPARISONS:
                templates.append((v1, op, v2, "+" if c > 0 else "-", _literal(abs(c))))
    seen, out = set(), []
    for toks in templates:
        key = normalize(toks, list(site.variables))
        if key in seen:
            continue
        seen.add(key)
        if _holds(toks, cols):
            out.append(InvariantCandidate(key, site, "invariant"))
    return out


def _holds(toks, cols) -> bool:
    """Vectorised check of a template over all head checks."""
    def val(t):
        return cols[t] if t in cols else int(t)
    left = val(toks[0])
    right = val(toks[2])
    if len(toks) == 5:
        right = right + val(toks[4]) if toks[3] == "+" else right - val(toks[4])
    res = {"<=": np.less_equal, "<": np.less, ">=": np.greater_equal, ">": np.greater, "==": np.equal,
           "!=": np.not_equal}[toks[1]](left, right)
    return bool(np.all(res))


# -- negatives -----------------------------------------------------------------------

def mutants(candidate: InvariantCandidate):
    """Single-token mutations in a fixed order: operators, then constants +-1, then variables."""
    toks = list(candidate.tokens)
    seen = {tuple(toks)}

    def emit(i, new):
        m = tuple(toks[:i] + [new] + toks[i + 1:])
        if m not in seen:
            seen.add(m)
            return m
        return None

    out = []
    for i, t in enumerate(toks):
        if t in COMPARISONS:
            for new in (_PARTNER[t],) + COMPARISONS:
                out.append(emit(i, new))
    for i, t in enumerate(toks):
        if t in _ARITH:
            for new in _ARITH:
                out.append(emit(i, new))
    for i, t in enumerate(toks):
        if _INT.match(t):
            for new in (int(t) + 1, int(t) - 1):
                out.append(emit(i, str(new)))
    for i, t in enumerate(toks):
        if _IDENT.match(t):
            for new in candidate.site.variables:
                out.append(emit(i, new))
    return [InvariantCandidate(m, candidate.site, "non-invariant") for m in out if m is not None]


def mutate_negative(positive: InvariantCandidate, program: Program, traces: list[Trace]) -> InvariantCandidate:
    """First mutant of ``positive`` that the traces falsify."""
    for m in mutants(positive):
        try:
            _parse(m.tokens)
        except CandidateError:
            continue
        if not verify_on_traces(m, program, traces):
            return m
    raise NoMutantError(f"no falsifiable mutant of {positive.text()!r} at loop {positive.site.loop_id}")


# -- dataset -------------------------------------------------------------------------

@dataclass
class InvariantExample:
    program: str
    loop_id: int
    tokens: tuple
    label: int  # 1 invariant, 0 non-invariant
    split: str = "train"
    verification: str = "dynamic"

    def to_json(self) -> str:
        d = asdict(self)
        d["tokens"] = list(self.tokens)
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "InvariantExample":
        d = json.loads(line)
        d["tokens"] = tuple(d["tokens"])
        return cls(**d)


@dataclass
class InvariantDataset:
    examples: list = field(default_factory=list)

    @property
    def n_positive(self) -> int:
        return sum(e.label == 1 for e in self.examples)

    @property
    def n_negative(self) -> int:
        return sum(e.label == 0 for e in self.examples)

    def split(self, name: str) -> list:
        return [e for e in self.examples if e.split == name]

    def dumps(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.examples)

    @classmethod
    def loads(cls, text: str) -> "InvariantDataset":
        return cls([InvariantExample.from_json(l) for l in text.splitlines() if l.strip()])


def build_dataset(items, per_loop: int = 2, seed: int = 0) -> InvariantDataset:
    """Positive/negative pairs for every loop of every program.

    ``items`` yields ``(name, program, traces, split)``.  Per loop, up to
    ``per_loop`` verified proposals are drawn (seeded) and each is paired with
    its first falsified mutant; proposals without one are skipped.
    """
    out = []
    for name, program, traces, split in items:
        for site in loop_sites(program):
            props = propose_invariants(program, traces, site)
            if not props:
                continue
            rng = np.random.default_rng([seed, site.loop_id, _stable_hash(name)])
            kept = 0
            for k in rng.permutation(len(props)):
                if kept >= per_loop:
                    break
                pos = props[k]
                try:
                    neg = mutate_negative(pos, program, traces)
                except NoMutantError:
                    continue
                out.append(InvariantExample(name, site.loop_id, pos.tokens, 1, split))
                out.append(InvariantExample(name, site.loop_id, neg.tokens, 0, split))
                kept += 1
    return InvariantDataset(out)


def _stable_hash(text: str) -> int:
    import zlib
    return zlib.crc32(text.encode())


# -- model head ------------------------------------------------------------------------

class InvariantVocab:
    """Token ids over the concatenated value, variable-id and operator embedding tables."""

    def __init__(self, params: ModelParams):
        cfg = params.config
        self.values = ValueVocab(cfg.value_range)
        self.max_vars = cfg.max_vars
        self.var_base = self.values.size
        self.op_base = self.var_base + cfg.max_vars

    def encode(self, tokens, var_index: dict) -> list[int]:
        ids = []
        for t in tokens:
            if t in OPERATORS:
                ids.append(self.op_base + OPERATORS.index(t))
            elif _INT.match(t):
                ids.append(self.values.encode(int(t)))
            elif t in var_index:
                k = var_index[t]
                if k >= self.max_vars:
                    raise CandidateError(f"variable {t} has id {k}, beyond the {self.max_vars} variable embeddings")
                ids.append(self.var_base + k)
            else:
                raise CandidateError(f"unknown token {t!r}")
        return ids


def _token_table(params: ModelParams) -> Tensor:
    return T.concat([params["value_emb"], params["var_emb"], params["op_emb"]], axis=0)


def embed_invariants(params: ModelParams, token_ids: list) -> Tensor:
    """Final hidden of the invariant GRU for each id sequence, shape (n, k_inv)."""
    if any(len(t) == 0 for t in token_ids):
        raise CandidateError("empty candidate")
    L = max(len(t) for t in token_ids)
    ids = np.zeros((L, len(token_ids)), dtype=np.intp)
    valid = np.zeros((L, len(token_ids)), dtype=bool)
    for j, t in enumerate(token_ids):
        ids[:len(t), j] = t
        valid[:len(t), j] = True
    table = _token_table(params)
    proj = T.add(T.matmul(table, params["inv.w_in"]), params["inv.b_in"])
    hs = T.gru_scan(T.take(proj, ids), params["inv.w_hid"], params["inv.b_hid"], valid)
    return hs[L - 1]


def embed_invariant(params: ModelParams, token_ids) -> Tensor:
    return embed_invariants(params, [list(token_ids)])[0]


def head_scores(params: ModelParams, program_emb: Tensor, inv_emb: Tensor) -> Tensor:
    """Two-layer head over ``[h_P, invariant embedding]`` rows; returns (n,) scores."""
    x = T.concat([program_emb, inv_emb], axis=-1)
    a = T.tanh(T.add(T.matmul(x, params["head.w1"]), params["head.b1"]))
    return T.reshape(T.add(T.matmul(a, params["head.w2"]), params["head.b2"]), (-1,))


@dataclass
class InvariantBatch:
    programs: list  # ProgramTraces
    program_of: np.ndarray  # example -> position in programs
    token_ids: list
    labels: np.ndarray  # +1 / -1


def score_batch(params: ModelParams, batch: InvariantBatch) -> tuple[Tensor, Tensor | None]:
    """Scores for every example plus per-program mask sums."""
    emb = embed_batch(params, make_batch(batch.programs), inject_vars=True)
    hp = T.take(emb.program_emb, batch.program_of)
    scores = head_scores(params, hp, embed_invariants(params, batch.token_ids))
    return scores, emb.mask_sum


def invariant_loss(params: ModelParams, batch: InvariantBatch) -> tuple[Tensor, Tensor]:
    scores, mask_sum = score_batch(params, batch)
    loss = T.scale(T.tsum(T.hinge_loss(scores, batch.labels)), 1.0 / len(batch.labels))
    lam = params.config.lambda_mask
    if mask_sum is not None and lam:
        loss = T.add(loss, T.scale(T.tsum(mask_sum), lam / len(batch.programs)))
    return loss, scores


def predict_invariant(params: ModelParams, program_traces: ProgramTraces, var_index: dict, candidate_tokens) -> float:
    """Score of one candidate; positive means invariant (a score of exactly 0 is not)."""
    ids = InvariantVocab(params).encode(candidate_tokens, var_index)
    with T.no_grad():
        scores, _ = score_batch(params, InvariantBatch([program_traces], np.zeros(1, dtype=np.intp), [ids],
                                                       np.ones(1)))
    return float(scores.data[0])


def decide(score: float) -> bool:
    return score > 0
