import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
import tsl.invariant as I
from tsl import tensor as T
from tsl.corpus import figure4_program, shipped_classes
from tsl.fuzz import TestSuite, collect_traces, gen_inputs
from tsl.gradcheck import invariant_check
from tsl.invariant import (CandidateError, InvariantCandidate, InvariantDataset, InvariantExample, InvariantVocab,
                           NoMutantError, build_dataset, check_candidate, decide, embed_invariant, loop_sites,
                           mutate_negative, propose_invariants, verify_on_traces)
from tsl.minilang import parse
from tsl.model import ModelConfig, ModelParams, ProgramTraces, embed_batch, make_batch

from conftest import spec_for

SUM_LOOP = parse("fn f(n:int){ s := 0; for i in 0 .. n { s := s + i; } return s; }")
CLASSES = shipped_classes()


def traces_of(program, inputs):
    return collect_traces(program, TestSuite(list(inputs), []))


@pytest.fixture(scope="module")
def sum_loop():
    tr = traces_of(SUM_LOOP, [(3,), (5,)])
    return tr, loop_sites(SUM_LOOP)[0]


@pytest.fixture(scope="module")
def figure4():
    p = figure4_program()
    tr = traces_of(p, [((5, 1, 4),), ((3, 3),), ((2, 7, 1, 0),)])
    return p, tr, loop_sites(p)[1]


def cand(text, site):
    return InvariantCandidate(tuple(text.split()), site)


def texts(cands):
    return {c.text() for c in cands}


# -- propose / verify / mutate -----------------------------------------------------------

def test_loop_sites_point_at_loop_heads(figure4):
    p, _, inner = figure4
    outer = loop_sites(p)[0]
    assert (outer.head_line, inner.head_line) == (5, 6)
    assert "i" in inner.variables and "a" not in inner.variables


def test_counter_is_nonnegative_but_not_below_bound(sum_loop):
    tr, site = sum_loop
    got = texts(propose_invariants(SUM_LOOP, tr, site))
    assert "i >= 0" in got
    # i < n fails at the exit check where i == n, in either orientation
    assert "i < n" not in got and "n > i" not in got
    assert not verify_on_traces(cand("i < n", site), SUM_LOOP, tr)
    assert verify_on_traces(cand("i <= n", site), SUM_LOOP, tr)


def test_figure4_max_geq_diff(figure4):
    p, tr, site = figure4
    assert "max >= diff" in texts(propose_invariants(p, tr, site))
    strict = cand("max > diff", site)
    assert not verify_on_traces(strict, p, tr)
    assert "false" in I.find_violation(strict, p, tr)


def test_figure4_mutation_pair(figure4):
    p, tr, site = figure4
    neg = mutate_negative(cand("max >= diff", site), p, tr)
    assert neg.text() == "max > diff" and neg.label == "non-invariant"


def test_counter_mutation(sum_loop):
    tr, site = sum_loop
    assert mutate_negative(cand("i >= 0", site), SUM_LOOP, tr).text() == "i > 0"


def test_tautology_and_contradiction(sum_loop):
    tr, site = sum_loop
    assert verify_on_traces(cand("0 == 0", site), SUM_LOOP, tr)
    assert not verify_on_traces(cand("0 == 1", site), SUM_LOOP, tr)


def test_undefined_variable_at_head_is_false_with_diagnostic(figure4):
    p, tr, site = figure4
    # d is assigned inside the inner body, so it is UNDEF at the first head check
    c = cand("d >= 0", site)
    assert not verify_on_traces(c, p, tr)
    assert "undefined" in I.find_violation(c, p, tr)


def test_no_falsifiable_mutant_is_skipped(sum_loop, monkeypatch):
    tr, site = sum_loop
    monkeypatch.setattr(I, "verify_on_traces", lambda *a: True)
    with pytest.raises(NoMutantError):
        mutate_negative(cand("0 == 0", site), SUM_LOOP, tr)
    ds = build_dataset([("f", SUM_LOOP, tr, "train")])
    assert ds.examples == []


def test_too_few_iterations_propose_nothing():
    tr = traces_of(SUM_LOOP, [(1,), (0,)])
    assert propose_invariants(SUM_LOOP, tr, loop_sites(SUM_LOOP)[0]) == []


def test_mutation_order_is_fixed(figure4):
    _, _, site = figure4
    ms = [m.text() for m in I.mutants(cand("max >= diff", site))]
    assert ms[:6] == ["max > diff", "max <= diff", "max < diff", "max == diff", "max != diff", "diff >= diff"]


@pytest.mark.parametrize("text", ["max >=", "max >= (diff", "max + diff", "max >= diff diff", "max >= $"])
def test_malformed_candidates(text, figure4):
    with pytest.raises(CandidateError):
        check_candidate(text.split(), figure4[2])


def test_candidate_with_foreign_variable(figure4):
    with pytest.raises(CandidateError):
        check_candidate(["k", ">=", "0"], figure4[2])


# -- properties over the shipped oracles ------------------------------------------------------

@st.composite
def program_traces(draw):
    c = CLASSES[draw(st.integers(0, len(CLASSES) - 1))]
    seed = draw(st.integers(0, 2**32 - 1))
    return c.oracle, traces_of(c.oracle, gen_inputs(spec_for(c.label).with_seed(seed), 6))


@given(program_traces())
@settings(max_examples=30)
def test_proposals_sound_and_negatives_falsified(case):
    program, traces = case
    for site in loop_sites(program):
        for c in propose_invariants(program, traces, site):
            assert verify_on_traces(c, program, traces), c.text()
            try:
                neg = mutate_negative(c, program, traces)
            except NoMutantError:
                continue
            assert not verify_on_traces(neg, program, traces), neg.text()


@pytest.fixture(scope="module")
def small_dataset():
    items = []
    for k, c in enumerate(CLASSES):
        tr = traces_of(c.oracle, gen_inputs(spec_for(c.label).with_seed(k), 8))
        items.append((c.label, c.oracle, tr, "train" if k % 2 else "test"))
    return items, build_dataset(items, per_loop=3, seed=4)


def test_dataset_balanced_and_valid(small_dataset):
    items, ds = small_dataset
    assert ds.n_positive == ds.n_negative > 0
    by_name = {name: (p, tr) for name, p, tr, _ in items}
    for e in ds.examples:
        p, tr = by_name[e.program]
        site = loop_sites(p)[e.loop_id]
        assert verify_on_traces(InvariantCandidate(e.tokens, site), p, tr) == (e.label == 1)
        assert e.verification == "dynamic"


def test_dataset_deterministic(small_dataset):
    items, ds = small_dataset
    assert build_dataset(items, per_loop=3, seed=4).dumps() == ds.dumps()
    assert build_dataset(items, per_loop=3, seed=5).dumps() != ds.dumps()


def test_dataset_jsonl_roundtrip(small_dataset):
    import json
    _, ds = small_dataset
    text = ds.dumps()
    assert InvariantDataset.loads(text).dumps() == text
    first = json.loads(text.splitlines()[0])
    assert set(first) == {"program", "loop_id", "tokens", "label", "split", "verification"}
    assert InvariantExample.from_json(text.splitlines()[0]) == ds.examples[0]


# -- model head -----------------------------------------------------------------------------

def inv_params(seed=0):
    return ModelParams(ModelConfig(n_classes=2, invariant=True, k1=5, k_prime=4, k2=6, value_embed_dim=3,
                                   value_range=8, max_vars=4, k_inv=5), seed=seed)


def test_vocab_encodes_each_token_kind():
    p = inv_params()
    v = InvariantVocab(p)
    ids = v.encode(["max", ">=", "diff", "+", "3", "(", ")"], {"max": 0, "diff": 1})
    assert ids[0] == v.var_base and ids[2] == v.var_base + 1
    assert ids[1] >= v.op_base and ids[3] >= v.op_base
    assert ids[4] == v.values.encode(3)
    assert len(set(ids)) == len(ids)
    with pytest.raises(CandidateError):
        v.encode(["k", ">=", "0"], {"max": 0})
    with pytest.raises(CandidateError):
        v.encode(["x"], {"x": 4})


def test_single_token_embedding_is_one_step():
    p = inv_params(1)
    P = {n: p[n].data for n in p.names()}
    table = np.concatenate([P["value_emb"], P["var_emb"], P["op_emb"]])
    out = embed_invariant(p, [7]).data
    assert np.allclose(out, oracle.gru_step(P, "inv", table[7], np.zeros(5)), atol=1e-14)


def test_identical_tokens_identical_embeddings():
    p = inv_params(2)
    assert np.array_equal(embed_invariant(p, [3, 20, 4]).data, embed_invariant(p, [3, 20, 4]).data)
    batched = I.embed_invariants(p, [[3, 20, 4], [5]]).data
    assert np.array_equal(batched[0], embed_invariant(p, [3, 20, 4]).data)


def test_empty_candidate_rejected():
    with pytest.raises(CandidateError):
        embed_invariant(inv_params(), [])


def toy_traces(rng, n_exec=2):
    return ProgramTraces("p", [rng.integers(1, 20, (4, 3)).astype(np.int32) for _ in range(n_exec)],
                         np.array([0, 1, 2], dtype=np.int32), 0, ("x", "y", "z"))


def test_zero_head_scores_zero_and_is_not_invariant():
    p = inv_params(3)
    for n in ("head.w1", "head.b1", "head.w2", "head.b2"):
        p[n].data[:] = 0.0
    score = I.predict_invariant(p, toy_traces(np.random.default_rng(0)), {"x": 0, "y": 1}, ["x", ">=", "y"])
    assert score == 0.0 and decide(score) is False
    assert decide(1e-300) is True


def test_prediction_rejects_unknown_variable():
    with pytest.raises(CandidateError):
        I.predict_invariant(inv_params(), toy_traces(np.random.default_rng(0)), {"x": 0}, ["q", ">=", "0"])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15)
def test_injection_with_zero_ids_matches_classification_embedding(seed):
    rng = np.random.default_rng(seed)
    p = inv_params(seed % 101)
    p["var_emb"].data[:] = 0.0
    batch = make_batch([toy_traces(rng, 3), toy_traces(rng, 1)])
    a = embed_batch(p, batch, inject_vars=True).program_emb.data
    b = embed_batch(p, batch, inject_vars=False).program_emb.data
    assert np.array_equal(a, b)


def test_injection_changes_embedding_when_ids_nonzero():
    rng = np.random.default_rng(1)
    p = inv_params(4)
    batch = make_batch([toy_traces(rng)])
    assert not np.array_equal(embed_batch(p, batch, inject_vars=True).program_emb.data,
                              embed_batch(p, batch, inject_vars=False).program_emb.data)


def test_invariant_head_gradient():
    assert invariant_check(seed=0, probes=2) < 1e-4


def test_hinge_examples():
    assert T.hinge_loss(np.array([2.0, 0.0, -0.5]), [1, 1, 1]).data.tolist() == [0.0, 1.0, 1.5]
    assert T.hinge_loss(np.array([0.5]), [-1]).data.tolist() == [1.5]
