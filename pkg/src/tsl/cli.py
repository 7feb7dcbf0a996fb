"""Command-line entry point: ``tsl <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every artifact is
written to a temporary file and renamed into place.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, replace

from ._io import atomic_write_text

COVERAGE_NS = (1, 2, 4, 8, 16, 30)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _default_seed() -> int:
    try:
        return int(os.environ.get("TSL_SEED", "0"))
    except ValueError:
        raise UsageError("TSL_SEED must be an integer") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _write_csv(path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] for h in header] if isinstance(r, dict) else r)
    atomic_write_text(path, buf.getvalue())


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _out(text: str) -> None:
    sys.stdout.write(text + "\n")


# -- model construction ----------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--preset", choices=("desk", "paper"), default="desk",
                   help="hyperparameter preset (desk: hidden 32, lr 3e-3, normalized mask sum, lambda 5e-3; paper: hidden 100, lr 1e-3, lambda 1e-3)")
    p.add_argument("--hidden", type=int, help="override every hidden/embedding size")
    p.add_argument("--lambda-mask", type=float, help="mask regularizer weight")
    p.add_argument("--normalize-mask-sum", choices=("on", "off"),
                   help="divide the mask sum by the program's state count")
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, help="programs per batch")
    p.add_argument("--patience", type=int, help="early-stop patience on validation accuracy (0 disables)")
    p.add_argument("--seed", type=int, default=None, help="seed (default: $TSL_SEED or 0)")


def _configs(args, n_classes: int, invariant: bool = False):
    from .model import ModelConfig
    from .train import PRESETS, TrainConfig
    model_over, train_over = PRESETS[args.preset]
    m = dict(model_over, n_classes=n_classes, invariant=invariant)
    if args.hidden:
        m.update(k1=args.hidden, k_prime=args.hidden, k2=args.hidden, value_embed_dim=args.hidden, k_inv=args.hidden)
    if args.lambda_mask is not None:
        m["lambda_mask"] = args.lambda_mask
    if args.normalize_mask_sum:
        m["normalize_mask_sum"] = args.normalize_mask_sum == "on"
    t = dict(train_over, seed=_seed(args))
    for flag, key in (("epochs", "max_epochs"), ("lr", "lr"), ("batch_size", "batch_size"), ("patience", "patience")):
        if getattr(args, flag) is not None:
            t[key] = getattr(args, flag)
    for key in ("disable_reduction", "train_fraction", "checkpoint_every"):
        if getattr(args, key, None) is not None:
            t[key] = getattr(args, key)
    return ModelConfig(**m), TrainConfig(**t)


def _seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _n_classes(splits) -> int:
    return 1 + max(p.label for progs in splits.values() for p in progs)


def _save_model(directory, params) -> None:
    params.save(os.path.join(directory, "model"))
    _write_json(os.path.join(directory, "config.json"), params.config.to_dict())


def _load_model(directory):
    from .model import ModelConfig, ModelParams
    with open(os.path.join(directory, "config.json")) as fh:
        cfg = ModelConfig(**json.load(fh))
    params = ModelParams(cfg)
    params.load(os.path.join(directory, "model"))
    return params


# -- commands --------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    from .corpus import build_corpus
    corpus = build_corpus(variants_per_class=args.variants_per_class, seed=_seed(args), n_inputs=args.n_inputs,
                          sample_size=args.sample_size)
    corpus.save(args.out)
    counts = {s: len(corpus.split(s)) for s in ("train", "val", "test")}
    _out(json.dumps({"programs": len(corpus.programs), "classes": len(corpus.classes), **counts}))
    return 0


def cmd_suite(args) -> int:
    from .corpus import PROBLEMS, Corpus
    from .fuzz import load_spec, select_test_suite, suite_coverage
    from .minilang import parse
    if args.program:
        if not args.spec:
            raise UsageError("--program needs --spec")
        programs = []
        for path in args.program:
            with open(path) as fh:
                programs.append(parse(fh.read()))
        spec, problem = load_spec(args.spec), args.problem or ""
    else:
        if not (args.corpus and args.problem):
            raise UsageError("give --corpus with --problem, or --program with --spec")
        corpus = Corpus.load(args.corpus)
        if args.problem not in corpus.suites:
            raise UsageError(f"unknown problem {args.problem!r}; corpus has {sorted(corpus.suites)}")
        programs = [cp.program for cp in corpus.programs if corpus.problem_of(cp.label) == args.problem]
        spec, problem = PROBLEMS[args.problem], args.problem
    spec = spec.with_seed(_seed(args))
    sample = programs[:args.sample_size]
    suite = select_test_suite(sample, spec, args.n_inputs, problem=problem)
    atomic_write_text(args.out, suite.to_json())
    if args.curve:
        rows = [{"N": n, "coverage": suite_coverage(programs, select_test_suite(sample, spec, n, problem=problem))}
                for n in args.curve_n]
        _write_csv(args.curve, ["N", "coverage"], rows)
    _out(json.dumps({"n": len(suite), "coverage": suite_coverage(programs, suite)}))
    return 0


def cmd_trace(args) -> int:
    from .fuzz import TestSuite, collect_traces
    from .minilang import dumps_traces, parse
    if args.program:
        if not args.suite:
            raise UsageError("--program needs --suite")
        with open(args.program) as fh:
            program = parse(fh.read())
        with open(args.suite) as fh:
            suite = TestSuite.from_json(fh.read())
        traces = collect_traces(program, suite)
        atomic_write_text(args.out, dumps_traces(traces))
        _out(json.dumps({"traces": len(traces), "states": [len(t) for t in traces]}))
        return 0
    if not args.corpus:
        raise UsageError("give --program with --suite, or --corpus")
    from .corpus import Corpus
    from .train import encode_corpus, save_trace_cache
    splits = encode_corpus(Corpus.load(args.corpus), workers=args.workers)
    save_trace_cache(args.out, splits)
    if args.histogram:
        rows = [{"split": s, "program": p.name, "execution": e, "length": n}
                for s, progs in splits.items() for p in progs for e, n in enumerate(p.lengths)]
        _write_csv(args.histogram, ["split", "program", "execution", "length"], rows)
    _out(json.dumps({s: len(v) for s, v in splits.items()}))
    return 0


def cmd_train(args) -> int:
    from .train import fit, load_trace_cache
    splits = load_trace_cache(args.cache)
    mcfg, tcfg = _configs(args, _n_classes(splits))
    os.makedirs(args.out, exist_ok=True)
    metrics = os.path.join(args.out, "metrics.jsonl")
    if not args.resume and os.path.exists(metrics):
        os.unlink(metrics)
    res = fit(mcfg, splits["train"], splits.get("val"), tcfg, metrics_path=metrics,
              checkpoint_prefix=os.path.join(args.out, "checkpoint"), resume=args.resume,
              on_epoch=lambda recs: [_out(r.to_json()) for r in recs])
    _save_model(args.out, res.params)
    _write_json(os.path.join(args.out, "train_config.json"), asdict(tcfg))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate, load_trace_cache
    splits = load_trace_cache(args.cache)
    if args.split not in splits:
        raise UsageError(f"split {args.split!r} not in cache")
    rec = evaluate(_load_model(args.model), splits[args.split], args.split)
    _out(rec.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run
    errs = run(_seed(args), args.probes)
    worst = max(errs.values())
    _out(json.dumps({**errs, "max_relative_error": worst}))
    return 0 if worst < 1e-4 else 2


def cmd_invariants_build(args) -> int:
    from .corpus import Corpus
    from .invariant import build_dataset
    from .train import corpus_trace_items
    corpus = Corpus.load(args.corpus)
    ds = build_dataset(corpus_trace_items(corpus), per_loop=args.per_loop, seed=_seed(args))
    atomic_write_text(args.out, ds.dumps())
    _out(json.dumps({"examples": len(ds.examples), "positive": ds.n_positive, "negative": ds.n_negative}))
    return 0


def cmd_invariants_train(args) -> int:
    from .invariant import InvariantDataset
    from .train import evaluate_invariants, fit_invariants, load_trace_cache
    with open(args.dataset) as fh:
        ds = InvariantDataset.loads(fh.read())
    splits = load_trace_cache(args.cache)
    programs = {p.name: p for progs in splits.values() for p in progs}
    mcfg, tcfg = _configs(args, 2, invariant=True)
    os.makedirs(args.out, exist_ok=True)
    metrics = os.path.join(args.out, "metrics.jsonl")
    if os.path.exists(metrics):
        os.unlink(metrics)
    params, _ = fit_invariants(mcfg, ds.split("train"), programs, tcfg, val=ds.split("val"), metrics_path=metrics,
                               on_epoch=lambda recs: [_out(r.to_json()) for r in recs])
    _save_model(args.out, params)
    rec = evaluate_invariants(params, ds.split("test"), programs, "test", tcfg.max_epochs, tcfg.batch_size)
    _write_json(os.path.join(args.out, "test.json"), asdict(rec))
    _out(rec.to_json())
    return 0


def cmd_ablate(args) -> int:
    from .train import ablation_reduction, load_trace_cache, training_data_curve
    splits = load_trace_cache(args.cache)
    mcfg, tcfg = _configs(args, _n_classes(splits))
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "reduction":
        report = ablation_reduction(mcfg, splits["train"], splits["test"], tcfg, val=splits.get("val"),
                                    edges=tuple(args.edges))
        _write_json(os.path.join(args.out, "reduction.json"), report)
        rows = [{"run": run, "lo": b["lo"], "hi": b["hi"], "n": b["n"], "acc": b["acc"]}
                for run, r in report.items() for b in r["buckets"]]
        _write_csv(os.path.join(args.out, "reduction_buckets.csv"), ["run", "lo", "hi", "n", "acc"], rows)
        _out(json.dumps({run: {"acc": r["test"]["acc"], "epoch_seconds": r["epoch_seconds"]}
                         for run, r in report.items()}))
    elif args.kind == "fraction":
        recs = training_data_curve(mcfg, splits["train"], splits["test"], tcfg, args.fractions, val=splits.get("val"))
        rows = [dict(asdict(r), fraction=f) for f, r in zip(sorted(args.fractions), recs)]
        header = ["fraction"] + [k for k in asdict(recs[0]) if k != "split"]
        _write_csv(os.path.join(args.out, "fraction.csv"), header, rows)
        for row in rows:
            _out(json.dumps({"fraction": row["fraction"], "acc": row["acc"], "f1_macro": row["f1_macro"]}))
    else:
        rows = _coverage_ablation(args, mcfg, tcfg)
        _write_csv(os.path.join(args.out, "coverage.csv"), ["N", "coverage", "acc", "f1_macro"], rows)
        for row in rows:
            _out(json.dumps(row))
    return 0


def _coverage_ablation(args, mcfg, tcfg) -> list[dict]:
    """Retrain with suites of increasing size N; accuracy and F1 on the test split per N."""
    from .corpus import PROBLEMS, Corpus
    from .fuzz import select_test_suite, suite_coverage
    from .train import encode_corpus, evaluate, fit
    if not args.corpus:
        raise UsageError("ablate coverage needs --corpus")
    corpus = Corpus.load(args.corpus)
    rows = []
    for n in args.ns:
        suites, covs = {}, []
        for problem, base in corpus.suites.items():
            programs = [cp.program for cp in corpus.programs if corpus.problem_of(cp.label) == problem]
            spec = PROBLEMS[problem].with_seed(base.seed)
            suites[problem] = select_test_suite(programs[:args.sample_size], spec, n, problem=problem)
            covs.append(suite_coverage(programs, suites[problem]))
        splits = encode_corpus(replace(corpus, suites=suites), workers=args.workers)
        res = fit(mcfg, splits["train"], splits.get("val"), tcfg)
        rec = evaluate(res.params, splits["test"], "test", len(res.history), tcfg.batch_size)
        rows.append({"N": n, "coverage": sum(covs) / len(covs), "acc": rec.acc, "f1_macro": rec.f1_macro})
    return rows


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tsl", description="Program semantics from execution traces: corpus, fuzzing, training.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate, verify and split the labeled corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed (default: $TSL_SEED or 0)")
    p.add_argument("--variants-per-class", type=int, default=60, help="programs per class, oracle included")
    p.add_argument("--n-inputs", type=int, default=30, help="test inputs per problem")
    p.add_argument("--sample-size", type=int, default=10, help="programs per class used to rank candidate inputs")
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("suite", help="select a coverage-ranked test suite")
    p.add_argument("--corpus", help="corpus directory (with --problem)")
    p.add_argument("--problem", help="problem name inside the corpus")
    p.add_argument("--program", action="append", help="a .mini file (repeatable; needs --spec)")
    p.add_argument("--spec", help="input-space JSON for --program")
    p.add_argument("--n-inputs", type=int, default=30, help="suite size N")
    p.add_argument("--sample-size", type=int, default=10, help="sample programs used to rank inputs")
    p.add_argument("--seed", type=int, default=None, help="seed (default: $TSL_SEED or 0)")
    p.add_argument("--out", required=True, help="suite JSON path")
    p.add_argument("--curve", help="also write a coverage-vs-N CSV here")
    p.add_argument("--curve-n", type=_int_list, default=list(COVERAGE_NS), help="N values for --curve")
    p.set_defaults(fn=cmd_suite)

    p = sub.add_parser("trace", help="record traces of one program, or cache a whole corpus")
    p.add_argument("--program", help="a .mini file (with --suite)")
    p.add_argument("--suite", help="suite JSON")
    p.add_argument("--corpus", help="corpus directory; writes an .npz trace cache")
    p.add_argument("--out", required=True, help="JSON-lines trace file or .npz cache")
    p.add_argument("--histogram", help="CSV of per-execution trace lengths (corpus mode)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for corpus mode")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("train", help="train the trace classifier")
    p.add_argument("--cache", required=True, help="trace cache from `trace --corpus`")
    p.add_argument("--out", required=True, help="run directory")
    _add_model_flags(p)
    p.add_argument("--no-reduction", dest="disable_reduction", action="store_const", const=True,
                   help="bypass the state reduction layer")
    p.add_argument("--train-fraction", type=float, help="seeded fraction of the training split to use")
    p.add_argument("--checkpoint-every", type=int, help="checkpoint every K epochs")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on one split")
    p.add_argument("--cache", required=True, help="trace cache")
    p.add_argument("--model", required=True, help="run directory from `train`")
    p.add_argument("--split", default="test", help="train, val or test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss and the invariant head")
    p.add_argument("--seed", type=int, default=None, help="seed (default: $TSL_SEED or 0)")
    p.add_argument("--probes", type=int, default=10, help="probe points per check")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("invariants-build", help="propose, verify and mutate loop invariants over a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="dataset JSON path")
    p.add_argument("--per-loop", type=int, default=2, help="positive/negative pairs per loop")
    p.add_argument("--seed", type=int, default=None, help="seed (default: $TSL_SEED or 0)")
    p.set_defaults(fn=cmd_invariants_build)

    p = sub.add_parser("invariants-train", help="train the invariant detector")
    p.add_argument("--dataset", required=True, help="dataset from `invariants-build`")
    p.add_argument("--cache", required=True, help="trace cache of the same corpus")
    p.add_argument("--out", required=True, help="run directory")
    _add_model_flags(p)
    p.set_defaults(fn=cmd_invariants_train)

    p = sub.add_parser("ablate", help="reduction on/off, training-fraction or suite-size experiments")
    p.add_argument("kind", choices=("reduction", "fraction", "coverage"))
    p.add_argument("--cache", help="trace cache (reduction, fraction)")
    p.add_argument("--corpus", help="corpus directory (coverage)")
    p.add_argument("--out", required=True, help="output directory")
    _add_model_flags(p)
    p.add_argument("--edges", type=_int_list, default=[0, 50, 100, 200], help="trace-length bucket edges")
    p.add_argument("--fractions", type=_float_list, default=[0.1, 0.3, 0.5, 0.7, 1.0], help="training fractions")
    p.add_argument("--ns", type=_int_list, default=[1, 2, 4, 8, 16, 30], help="suite sizes for coverage")
    p.add_argument("--sample-size", type=int, default=10, help="sample programs for suite selection")
    p.add_argument("--workers", type=int, default=1, help="worker processes for re-tracing")
    p.set_defaults(fn=cmd_ablate)
    return ap


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.fn is cmd_ablate and args.kind != "coverage" and not args.cache:
            raise UsageError(f"ablate {args.kind} needs --cache")
        return args.fn(args)
    except UsageError as e:
        sys.stderr.write(f"tsl: error: {e}\n")
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:
        sys.stderr.write(f"tsl: {type(e).__name__}: {e}\n")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
