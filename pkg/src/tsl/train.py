"""Training and evaluation: Adam with global-norm clipping, metrics, ablations."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from . import tensor as T
from ._io import atomic_write_text
from .model import ModelConfig, ModelParams, ProgramTraces, encode_program_traces, forward, make_batch, ValueVocab


class TrainingError(RuntimeError):
    pass


# Hyperparameter presets: model overrides and training overrides.  "paper"
# keeps the published sizes; "desk" is what fits a laptop CPU in minutes.
PRESETS = {
    "paper": ({}, {}),
    "desk": (dict(k1=32, k_prime=32, k2=32, value_embed_dim=32, k_inv=32, normalize_mask_sum=True,
                  lambda_mask=5e-3),
             dict(lr=3e-3, max_epochs=6)),
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.9
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 0  # epochs without validation improvement before stopping; 0 disables
    seed: int = 0
    disable_reduction: bool = False
    train_fraction: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    H: float
    sumM: float
    acc: float
    f1_macro: float
    reduction_mean: float
    reduction_median: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# -- optimisation ----------------------------------------------------------------

def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))


def clip_gradients(params, clip_norm: float) -> float:
    """Rescale all gradients in place so their joint norm is at most ``clip_norm``; returns the norm before."""
    tensors = [p for p in params if p.grad is not None]
    norm = global_norm([p.grad for p in tensors])
    if norm > clip_norm:
        factor = clip_norm / norm
        for p in tensors:
            p.grad = p.grad * factor
    return norm


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state(self, arrays: dict, t: int):
        self.t = t
        self.m = [np.array(arrays[f"adam.m.{i}"]) for i in range(len(self.params))]
        self.v = [np.array(arrays[f"adam.v.{i}"]) for i in range(len(self.params))]


# -- data --------------------------------------------------------------------------

def _encode_one(args):
    from .fuzz import collect_traces
    from .minilang import make_layout
    name, program, suite, limits, vocab, label = args
    return encode_program_traces(name, collect_traces(program, suite, limits), make_layout(program), vocab, label)


def encode_corpus(corpus, limits=None, vocab: ValueVocab | None = None, workers: int = 1) -> dict[str, list[ProgramTraces]]:
    """Run every corpus program on its problem's suite once; token matrices per split."""
    from .minilang import Limits
    limits = limits or Limits()
    vocab = vocab or ValueVocab()
    jobs = [(f"{k:04d}:{cp.label}", cp.program, corpus.suite_for(cp.label), limits, vocab, corpus.label_index(cp.label))
            for k, cp in enumerate(corpus.programs)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            encoded = list(pool.map(_encode_one, jobs, chunksize=8))
    else:
        encoded = [_encode_one(j) for j in jobs]
    out = {"train": [], "val": [], "test": []}
    for cp, pt in zip(corpus.programs, encoded):
        out.setdefault(cp.split, []).append(pt)
    return out


def corpus_trace_items(corpus, limits=None):
    """``(name, program, traces, split)`` per corpus program, named as in :func:`encode_corpus`."""
    from .fuzz import collect_traces
    from .minilang import Limits
    limits = limits or Limits()
    for k, cp in enumerate(corpus.programs):
        yield f"{k:04d}:{cp.label}", cp.program, collect_traces(cp.program, corpus.suite_for(cp.label), limits), cp.split


def save_trace_cache(path, splits: dict[str, list[ProgramTraces]]):
    """Persist token matrices as a single ``.npz`` (no pickling)."""
    arrays, meta = {}, {}
    for split, progs in splits.items():
        meta[split] = []
        for i, p in enumerate(progs):
            key = f"{split}.{i}"
            arrays[key + ".tokens"] = (np.concatenate(p.tokens, axis=0) if p.tokens
                                       else np.zeros((0, p.n_slots), dtype=np.int32)).reshape(-1, p.n_slots)
            arrays[key + ".lengths"] = np.array(p.lengths, dtype=np.int64)
            arrays[key + ".slot_vars"] = p.slot_vars
            meta[split].append({"name": p.name, "label": int(p.label), "variables": list(p.variables)})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_trace_cache(path) -> dict[str, list[ProgramTraces]]:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        out = {}
        for split, items in meta.items():
            progs = []
            for i, item in enumerate(items):
                key = f"{split}.{i}"
                toks = z[key + ".tokens"]
                cuts = np.cumsum(z[key + ".lengths"])[:-1]
                progs.append(ProgramTraces(item["name"], list(np.split(toks, cuts)) if len(z[key + ".lengths"]) else [],
                                           z[key + ".slot_vars"], item["label"], tuple(item.get("variables", ()))))
            out[split] = progs
    return out


def make_batches(programs: list[ProgramTraces], batch_size: int, rng=None) -> list[list[ProgramTraces]]:
    order = np.arange(len(programs)) if rng is None else rng.permutation(len(programs))
    return [[programs[i] for i in order[k:k + batch_size]] for k in range(0, len(order), batch_size)]


def subset(programs: list, fraction: float, seed: int) -> list:
    if fraction >= 1.0:
        return list(programs)
    rng = np.random.default_rng([seed, 7])
    n = max(1, int(round(fraction * len(programs))))
    keep = np.sort(rng.permutation(len(programs))[:n])
    return [programs[i] for i in keep]


# -- loops -----------------------------------------------------------------------------

def _macro_f1(y_true, y_pred) -> float:
    return float(f1_score(y_true, y_pred, average="macro", zero_division=0))


def _reduction(mask_cols: list) -> tuple[float, float]:
    if not mask_cols:
        return 0.0, 0.0
    return float(np.mean(mask_cols)), float(np.median(mask_cols))


def train_epoch(params: ModelParams, batches, config: TrainConfig, optimizer: Adam, epoch: int = 0) -> MetricsRecord:
    """One pass over ``batches``: forward, backward, clip, Adam step per batch."""
    threshold = params.config.mask_threshold
    losses, Hs, sums, y_true, y_pred, rates = [], [], [], [], [], []
    for i, group in enumerate(batches):
        batch = make_batch(group)
        params.zero_grad()
        out = forward(params, batch, use_reduction=not config.disable_reduction and params.config.use_reduction)
        value = float(out.loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} in batch {i} of epoch {epoch} ({', '.join(batch.names)})")
        T.backward(out.loss)
        clip_gradients(params, config.clip_norm)
        optimizer.step()
        losses.extend([value] * batch.n_programs)
        Hs.extend(out.ce.data.tolist())
        if out.mask_sum is not None:
            sums.extend(out.mask_sum.data.tolist())
            rates.extend(_trace_rates(out.masks, threshold))
        y_true.extend(batch.labels.tolist())
        y_pred.extend(out.predictions().tolist())
    rm, rmed = _reduction(rates)
    return MetricsRecord(epoch, "train", float(np.mean(losses)) if losses else 0.0, float(np.mean(Hs)) if Hs else 0.0,
                         float(np.mean(sums)) if sums else 0.0, float(accuracy_score(y_true, y_pred)) if y_true else 0.0,
                         _macro_f1(y_true, y_pred) if y_true else 0.0, rm, rmed)


def _trace_rates(masks: np.ndarray, threshold: float) -> list[float]:
    out = []
    for col in masks.T:
        col = col[~np.isnan(col)]
        if len(col):
            out.append(float(np.mean(col < threshold)))
    return out


@dataclass
class Predictions:
    labels: np.ndarray
    predicted: np.ndarray
    max_lengths: np.ndarray  # longest trace per program


def predict(params: ModelParams, programs: list[ProgramTraces], batch_size: int = 8, use_reduction=None,
            hard_mask: bool = False):
    """Inference over ``programs``; returns (Predictions, per-program losses, H, sumM, per-trace reduction rates)."""
    labels, preds, lengths, losses, Hs, sums, rates = [], [], [], [], [], [], []
    with T.no_grad():
        for group in make_batches(programs, batch_size):
            batch = make_batch(group)
            out = forward(params, batch, use_reduction=use_reduction, hard_mask=hard_mask)
            labels.extend(batch.labels.tolist())
            preds.extend(out.predictions().tolist())
            lengths.extend(max(p.lengths, default=0) for p in group)
            Hs.extend(out.ce.data.tolist())
            if out.mask_sum is not None:
                sums.extend(out.mask_sum.data.tolist())
                losses.extend((out.ce.data + params.config.lambda_mask * out.mask_sum.data).tolist())
                rates.extend(_trace_rates(out.masks, params.config.mask_threshold))
            else:
                losses.extend(out.ce.data.tolist())
    return Predictions(np.array(labels), np.array(preds), np.array(lengths)), losses, Hs, sums, rates


def evaluate(params: ModelParams, programs: list[ProgramTraces], split: str = "test", epoch: int = 0,
             batch_size: int = 8, use_reduction=None) -> MetricsRecord:
    """Accuracy, macro-F1, loss terms and reduction rates of argmax predictions."""
    pr, losses, Hs, sums, rates = predict(params, programs, batch_size, use_reduction)
    rm, rmed = _reduction(rates)
    mean = lambda xs: float(np.mean(xs)) if len(xs) else 0.0
    if not len(pr.labels):
        return MetricsRecord(epoch, split, 0.0, 0.0, 0.0, 0.0, 0.0, rm, rmed)
    return MetricsRecord(epoch, split, mean(losses), mean(Hs), mean(sums), float(accuracy_score(pr.labels, pr.predicted)),
                         _macro_f1(pr.labels, pr.predicted), rm, rmed)


@dataclass
class FitResult:
    params: ModelParams
    history: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int = 0


def fit(model_cfg: ModelConfig, train: list[ProgramTraces], val: list[ProgramTraces] | None, config: TrainConfig,
        metrics_path=None, checkpoint_prefix=None, resume: bool = False, on_epoch=None) -> FitResult:
    """Train from seeded initial weights; returns the final parameters and the metric stream.

    With a validation set and ``patience > 0``, stops after ``patience``
    epochs without a validation-accuracy gain and restores the best weights.
    """
    if config.disable_reduction:
        model_cfg = replace(model_cfg, use_reduction=False)
    params = ModelParams(model_cfg, seed=config.seed)
    opt = Adam(list(params), config.lr, config.beta1, config.beta2, config.eps)
    train = subset(train, config.train_fraction, config.seed)
    result = FitResult(params)
    start = 1
    if resume and checkpoint_prefix and Path(f"{checkpoint_prefix}.json").exists():
        start = _load_training_state(checkpoint_prefix, params, opt, result) + 1
    best = (-1.0, None)
    stale = 0
    for epoch in range(start, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        t0 = time.perf_counter()
        rec = train_epoch(params, make_batches(train, config.batch_size, rng), config, opt, epoch)
        result.epoch_seconds.append(time.perf_counter() - t0)
        records = [rec]
        if val:
            vrec = evaluate(params, val, "val", epoch, config.batch_size)
            records.append(vrec)
        result.history.extend(records)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                for r in records:
                    fh.write(r.to_json() + "\n")
        if on_epoch:
            on_epoch(records)
        if checkpoint_prefix and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            _save_training_state(checkpoint_prefix, params, opt, epoch, result)
        if val and config.patience:
            if vrec.acc > best[0]:
                best, stale = (vrec.acc, {n: a.copy() for n, a in params.arrays().items()}), 0
                result.best_epoch = epoch
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best[1] is not None:
        params.load_arrays(best[1])
    return result


def _save_training_state(prefix, params: ModelParams, opt: Adam, epoch: int, result: FitResult):
    arrays = {f"param.{n}": a for n, a in params.arrays().items()}
    arrays.update(opt.state())
    T.save_checkpoint(f"{prefix}.state", arrays)
    meta = {"epoch": epoch, "adam_t": opt.t, "config": params.config.to_dict(),
            "history": [asdict(r) for r in result.history], "epoch_seconds": result.epoch_seconds}
    atomic_write_text(f"{prefix}.json", json.dumps(meta, indent=1))


def _load_training_state(prefix, params: ModelParams, opt: Adam, result: FitResult) -> int:
    meta = json.loads(Path(f"{prefix}.json").read_text())
    arrays = T.load_checkpoint(f"{prefix}.state")
    params.load_arrays({n: arrays[f"param.{n}"] for n in params.names()})
    opt.load_state(arrays, meta["adam_t"])
    result.history = [MetricsRecord(**r) for r in meta["history"]]
    result.epoch_seconds = list(meta["epoch_seconds"])
    return int(meta["epoch"])


# -- experiments ---------------------------------------------------------------------

def bucket_accuracy(pred: Predictions, edges=(0, 50, 100, 200)) -> list[dict]:
    """Accuracy per bucket of longest-trace length; the last bucket is open-ended."""
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must increase")
    rows = []
    for k, lo in enumerate(edges):
        hi = edges[k + 1] if k + 1 < len(edges) else math.inf
        sel = (pred.max_lengths >= lo) & (pred.max_lengths < hi)
        n = int(sel.sum())
        acc = float(np.mean(pred.labels[sel] == pred.predicted[sel])) if n else float("nan")
        rows.append({"lo": lo, "hi": hi, "n": n, "acc": acc})
    return rows


def ablation_reduction(model_cfg: ModelConfig, train: list, test: list, config: TrainConfig, val=None,
                       edges=(0, 50, 100, 200)) -> dict:
    """Train with and without the reduction layer on identical data and seeds."""
    report = {}
    for name, off in (("reduction_on", False), ("reduction_off", True)):
        res = fit(model_cfg, train, val, replace(config, disable_reduction=off))
        pred, *_ = predict(res.params, test, config.batch_size)
        report[name] = {
            "test": asdict(evaluate(res.params, test, "test", len(res.history), config.batch_size)),
            "buckets": bucket_accuracy(pred, edges),
            "epoch_seconds": float(np.mean(res.epoch_seconds)) if res.epoch_seconds else 0.0,
            "history": [asdict(r) for r in res.history],
        }
    return report


def training_data_curve(model_cfg: ModelConfig, train: list, test: list, config: TrainConfig, fractions,
                        val=None) -> list[MetricsRecord]:
    """One model per training fraction (seeded subsets), evaluated on ``test``; rows ordered by fraction."""
    fractions = sorted(float(f) for f in fractions)
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    rows = []
    for f in fractions:
        res = fit(model_cfg, train, val, replace(config, train_fraction=f))
        rec = evaluate(res.params, test, f"test@{f:g}", len(res.history), config.batch_size)
        rows.append(rec)
    return rows


# -- invariant detection ---------------------------------------------------------------

@dataclass
class InvariantRecord:
    epoch: int
    split: str
    loss: float
    acc: float
    f1_macro: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def invariant_batches(examples: list, programs: dict, params: ModelParams, batch_size: int, rng=None) -> list:
    """Group examples by program; each batch holds every example of up to ``batch_size`` programs."""
    from .invariant import InvariantBatch, InvariantVocab
    vocab = InvariantVocab(params)
    by_prog: dict = {}
    for e in examples:
        by_prog.setdefault(e.program, []).append(e)
    names = sorted(by_prog)
    if rng is not None:
        names = [names[i] for i in rng.permutation(len(names))]
    out = []
    for k in range(0, len(names), batch_size):
        group = names[k:k + batch_size]
        progs, owner, ids, labels = [], [], [], []
        for j, name in enumerate(group):
            pt = programs[name]
            var_index = {v: i for i, v in enumerate(pt.variables)}
            progs.append(pt)
            for e in by_prog[name]:
                owner.append(j)
                ids.append(vocab.encode(e.tokens, var_index))
                labels.append(1.0 if e.label == 1 else -1.0)
        out.append(InvariantBatch(progs, np.array(owner, dtype=np.intp), ids, np.array(labels)))
    return out


def evaluate_invariants(params: ModelParams, examples: list, programs: dict, split: str = "test", epoch: int = 0,
                        batch_size: int = 8) -> InvariantRecord:
    from .invariant import invariant_loss
    losses, y_true, y_pred = [], [], []
    with T.no_grad():
        for b in invariant_batches(examples, programs, params, batch_size):
            loss, scores = invariant_loss(params, b)
            losses.append(float(loss.data) * len(b.labels))
            y_true.extend((b.labels > 0).astype(int).tolist())
            y_pred.extend((scores.data > 0).astype(int).tolist())
    if not y_true:
        return InvariantRecord(epoch, split, 0.0, 0.0, 0.0)
    return InvariantRecord(epoch, split, float(np.sum(losses) / len(y_true)), float(accuracy_score(y_true, y_pred)),
                           _macro_f1(y_true, y_pred))


def fit_invariants(model_cfg: ModelConfig, train: list, programs: dict, config: TrainConfig, val: list | None = None,
                   metrics_path=None, on_epoch=None) -> tuple[ModelParams, list]:
    """Train the invariant head (and the trace encoder under it) with the hinge loss."""
    from .invariant import invariant_loss
    params = ModelParams(replace(model_cfg, invariant=True), seed=config.seed)
    opt = Adam(list(params), config.lr, config.beta1, config.beta2, config.eps)
    history = []
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        losses, y_true, y_pred = [], [], []
        for i, b in enumerate(invariant_batches(train, programs, params, config.batch_size, rng)):
            params.zero_grad()
            loss, scores = invariant_loss(params, b)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} in batch {i} of epoch {epoch}")
            T.backward(loss)
            clip_gradients(params, config.clip_norm)
            opt.step()
            losses.append(value * len(b.labels))
            y_true.extend((b.labels > 0).astype(int).tolist())
            y_pred.extend((scores.data > 0).astype(int).tolist())
        records = [InvariantRecord(epoch, "train", float(np.sum(losses) / max(1, len(y_true))),
                                   float(accuracy_score(y_true, y_pred)) if y_true else 0.0,
                                   _macro_f1(y_true, y_pred) if y_true else 0.0)]
        if val:
            records.append(evaluate_invariants(params, val, programs, "val", epoch, config.batch_size))
        history.extend(records)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                for r in records:
                    fh.write(r.to_json() + "\n")
        if on_epoch:
            on_epoch(records)
    return params, history
