import json
import math
from dataclasses import replace

import numpy as np
import pytest

from tsl import tensor as T
from tsl.corpus import shipped_classes
from tsl.fuzz import TestSuite, collect_traces, gen_inputs
from tsl.invariant import build_dataset
from tsl.minilang import make_layout
from tsl.model import ModelConfig, ModelParams, ProgramTraces, ValueVocab, encode_program_traces
from tsl.train import (Adam, Predictions, TrainConfig, TrainingError, _macro_f1, bucket_accuracy, clip_gradients,
                       evaluate, evaluate_invariants, fit, fit_invariants, global_norm, load_trace_cache, make_batches,
                       save_trace_cache, subset, train_epoch, training_data_curve)

from conftest import spec_for

TINY = dict(k1=6, k_prime=4, k2=6, value_embed_dim=4, value_range=16)


def toy_data(rng, n, n_classes=2, n_slots=3):
    """Programs whose token range reveals the label, so a tiny model can learn them."""
    out = []
    for k in range(n):
        label = k % n_classes
        lo = 1 + 8 * label
        toks = [rng.integers(lo, lo + 8, size=(int(rng.integers(2, 6)), n_slots)).astype(np.int32)
                for _ in range(int(rng.integers(1, 3)))]
        out.append(ProgramTraces(f"p{k:03d}", toks, np.arange(n_slots, dtype=np.int32), label))
    return out


def cfg(**over):
    return ModelConfig(**{**TINY, **over})


# -- optimisation primitives ------------------------------------------------------------

def test_clip_rescales_to_threshold():
    a, b = T.parameter(np.zeros(3)), T.parameter(np.zeros((2, 2)))
    a.grad = np.array([6.0, 0.0, 0.0])
    b.grad = np.full((2, 2), 4.0)
    assert clip_gradients([a, b], 0.9) == pytest.approx(10.0)
    assert global_norm([a.grad, b.grad]) == pytest.approx(0.9, abs=1e-12)
    assert np.allclose(a.grad, [0.54, 0, 0])


def test_clip_leaves_small_gradients():
    a = T.parameter(np.zeros(2))
    a.grad = np.array([0.3, 0.4])
    clip_gradients([a], 0.9)
    assert a.grad.tolist() == [0.3, 0.4]


def test_adam_zero_gradient_is_a_no_op():
    w = T.parameter(np.arange(4.0))
    w.grad = np.zeros(4)
    opt = Adam([w], lr=0.1)
    opt.step()
    opt.step()
    assert w.data.tolist() == [0.0, 1.0, 2.0, 3.0]


def test_adam_first_step():
    w = T.parameter(np.array([1.0, -2.0]))
    g = np.array([0.5, -4.0])
    w.grad = g.copy()
    Adam([w], lr=0.01).step()
    assert np.allclose(w.data, np.array([1.0, -2.0]) - 0.01 * g / (np.abs(g) + 1e-8), atol=1e-15)


@pytest.mark.parametrize("bad", [dict(clip_norm=0), dict(train_fraction=0.0), dict(train_fraction=1.5),
                                 dict(batch_size=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_post_clip_norm_bound_every_step(monkeypatch):
    import tsl.train as tr
    seen = []
    real = tr.clip_gradients

    def spy(params, clip_norm):
        out = real(params, clip_norm)
        seen.append(global_norm([p.grad for p in params if p.grad is not None]))
        return out
    monkeypatch.setattr(tr, "clip_gradients", spy)
    fit(cfg(), toy_data(np.random.default_rng(0), 12), None, TrainConfig(lr=0.05, batch_size=4, max_epochs=2))
    assert len(seen) == 6 and max(seen) <= 0.9 + 1e-9


# -- metrics ------------------------------------------------------------------------------

def test_perfect_predictions():
    y = [0, 1, 1, 0, 2]
    assert _macro_f1(y, y) == 1.0


def test_constant_predictor_on_balanced_split():
    params = ModelParams(cfg(), seed=0)
    params["cls.w"].data[:] = 0.0
    params["cls.b"].data[:] = [1.0, 0.0]
    rec = evaluate(params, toy_data(np.random.default_rng(1), 10))
    assert rec.acc == 0.5
    assert rec.f1_macro == pytest.approx(1 / 3, abs=1e-12)
    assert 0 <= rec.reduction_mean <= 1 and 0 <= rec.reduction_median <= 1


def test_evaluate_loss_terms_are_consistent():
    params = ModelParams(cfg(lambda_mask=0.01), seed=2)
    rec = evaluate(params, toy_data(np.random.default_rng(2), 6))
    assert rec.loss == pytest.approx(rec.H + 0.01 * rec.sumM, abs=1e-12)


def test_bucket_accuracy():
    pred = Predictions(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0]), np.array([10, 60, 250, 40]))
    rows = bucket_accuracy(pred, edges=(0, 50, 100, 200))
    assert [(r["lo"], r["n"]) for r in rows] == [(0, 2), (50, 1), (100, 0), (200, 1)]
    assert rows[0]["acc"] == 1.0 and rows[3]["acc"] == 0.0 and math.isnan(rows[2]["acc"])
    assert rows[-1]["hi"] == math.inf
    with pytest.raises(ValueError):
        bucket_accuracy(pred, edges=(0, 100, 50))


# -- training loop --------------------------------------------------------------------------

def test_loss_decreases_on_fixed_batch():
    rng = np.random.default_rng(3)
    data = toy_data(rng, 8)
    params = ModelParams(cfg(), seed=1)
    config = TrainConfig(lr=0.02, batch_size=8)
    opt = Adam(list(params), config.lr)
    losses = [train_epoch(params, [data], config, opt, e).loss for e in range(1, 7)]
    rises = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert rises <= 1 and losses[-1] < losses[0]


def test_identity_mask_runs_match_first_epoch():
    data = toy_data(np.random.default_rng(4), 8)
    config = TrainConfig(lr=0.01, batch_size=4)

    def first_epoch(off):
        params = ModelParams(cfg(lambda_mask=0.0), seed=3)
        params["mask.w2"].data[:] = 0.0
        params["mask.b2"].data[:] = 50.0
        return train_epoch(params, make_batches(data, 4), replace(config, disable_reduction=off),
                           Adam(list(params), config.lr), 1)
    on, off = first_epoch(False), first_epoch(True)
    assert on.loss == off.loss and on.H == off.H and on.acc == off.acc


def test_nan_loss_aborts_with_batch_id():
    params = ModelParams(cfg(), seed=0)
    params["cls.w"].data[0, 0] = np.nan
    with pytest.raises(TrainingError, match="batch 0"):
        train_epoch(params, [toy_data(np.random.default_rng(0), 2)], TrainConfig(), Adam(list(params)))


def test_seeded_runs_are_bit_identical(tmp_path):
    data = toy_data(np.random.default_rng(5), 12)
    val = toy_data(np.random.default_rng(6), 4)
    config = TrainConfig(lr=0.02, batch_size=4, max_epochs=3, seed=9)
    a = fit(cfg(), data, val, config, metrics_path=tmp_path / "a.jsonl")
    b = fit(cfg(), data, val, config, metrics_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for n in a.params.names():
        assert a.params[n].data.tobytes() == b.params[n].data.tobytes()
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == 6 and set(json.loads(lines[0])) >= {"H", "sumM", "acc", "f1_macro", "reduction_mean"}


def test_resume_matches_uninterrupted_run(tmp_path):
    data = toy_data(np.random.default_rng(7), 10)
    config = TrainConfig(lr=0.02, batch_size=4, max_epochs=4, checkpoint_every=2, seed=1)
    straight = fit(cfg(), data, None, config)
    prefix = str(tmp_path / "ck")
    fit(cfg(), data, None, replace(config, max_epochs=2), checkpoint_prefix=prefix)
    resumed = fit(cfg(), data, None, config, checkpoint_prefix=prefix, resume=True)
    assert [r.to_json() for r in resumed.history] == [r.to_json() for r in straight.history]
    for n in straight.params.names():
        assert resumed.params[n].data.tobytes() == straight.params[n].data.tobytes()


def test_patience_restores_best_epoch():
    data = toy_data(np.random.default_rng(8), 8)
    val = toy_data(np.random.default_rng(9), 4)
    res = fit(cfg(), data, val, TrainConfig(lr=0.05, batch_size=4, max_epochs=30, patience=2))
    accs = [r.acc for r in res.history if r.split == "val"]
    assert len(accs) < 30 or res.best_epoch
    assert evaluate(res.params, val).acc == max(accs)


def test_overfits_ten_programs():
    rng = np.random.default_rng(10)
    data = [ProgramTraces(f"q{k}", [rng.integers(1, 30, (int(rng.integers(2, 7)), 3)).astype(np.int32)
                                    for _ in range(2)], np.arange(3, dtype=np.int32), int(rng.integers(0, 3)))
            for k in range(10)]
    seen = []
    fit(cfg(n_classes=3, k1=16, k2=16), data, None, TrainConfig(lr=0.01, batch_size=5, max_epochs=200),
        on_epoch=lambda recs: seen.append(recs[0].acc))
    assert 1.0 in seen


def test_subset_is_seeded_and_sized():
    items = list(range(20))
    assert subset(items, 1.0, 0) == items
    a = subset(items, 0.3, 4)
    assert a == subset(items, 0.3, 4) and len(a) == 6 and a == sorted(a)


def test_fraction_one_reproduces_base_run():
    rng = np.random.default_rng(11)
    train, test = toy_data(rng, 10), toy_data(rng, 6)
    config = TrainConfig(lr=0.02, batch_size=4, max_epochs=2)
    rows = training_data_curve(cfg(), train, test, config, [1.0, 0.5])
    assert [r.split for r in rows] == ["test@0.5", "test@1"]
    base = evaluate(fit(cfg(), train, None, config).params, test)
    assert (rows[1].acc, rows[1].loss, rows[1].f1_macro) == (base.acc, base.loss, base.f1_macro)
    with pytest.raises(ValueError):
        training_data_curve(cfg(), train, test, config, [0.0])


def test_trace_cache_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    splits = {"train": toy_data(rng, 3), "test": toy_data(rng, 2)}
    splits["train"][0] = replace(splits["train"][0], variables=("a", "b", "c"))
    save_trace_cache(tmp_path / "c.npz", splits)
    back = load_trace_cache(tmp_path / "c.npz")
    for name, progs in splits.items():
        for p, q in zip(progs, back[name]):
            assert (p.name, p.label, tuple(p.variables)) == (q.name, q.label, tuple(q.variables))
            assert all(np.array_equal(a, b) for a, b in zip(p.tokens, q.tokens))


# -- invariant head training ------------------------------------------------------------------

def test_invariant_training_runs_and_reports():
    vocab = ValueVocab(16)
    items, programs = [], {}
    for c in shipped_classes()[:4]:
        traces = collect_traces(c.oracle, TestSuite(gen_inputs(spec_for(c.label).with_seed(1), 6), []))
        items.append((c.label, c.oracle, traces, "train"))
        programs[c.label] = encode_program_traces(c.label, traces, make_layout(c.oracle), vocab)
    ds = build_dataset(items, per_loop=2)
    assert ds.examples
    model = cfg(max_vars=16, k_inv=6)
    params, history = fit_invariants(model, ds.examples, programs, TrainConfig(lr=0.01, max_epochs=3, batch_size=2),
                                     val=ds.examples)
    assert [(r.epoch, r.split) for r in history] == [(1, "train"), (1, "val"), (2, "train"), (2, "val"),
                                                     (3, "train"), (3, "val")]
    assert all(math.isfinite(r.loss) and 0 <= r.acc <= 1 for r in history)
    rec = evaluate_invariants(params, ds.examples, programs, batch_size=2)
    assert rec == replace(history[-1], split="test", epoch=0)
