"""Train a small trace classifier on a reduced corpus.

Ten semantic classes over four problems, two dozen variants each.  The full
desk-scale run uses sixty per class; this one finishes in a few minutes.
"""
# %%
import time

from tsl.corpus import build_corpus
from tsl.model import ModelConfig
from tsl.train import PRESETS, TrainConfig, bucket_accuracy, encode_corpus, evaluate, fit, predict

corpus = build_corpus(variants_per_class=24, seed=0, n_inputs=12, sample_size=4)
splits = encode_corpus(corpus)
print({name: len(progs) for name, progs in splits.items()}, "programs;", len(corpus.labels), "classes")

# %% model and optimiser settings from the desk preset, a couple more epochs for the smaller data
model_over, train_over = PRESETS["desk"]
mcfg = ModelConfig(n_classes=len(corpus.labels), **model_over)
tcfg = TrainConfig(**{**train_over, "max_epochs": 8})

t0 = time.perf_counter()
res = fit(mcfg, splits["train"], splits["val"], tcfg,
          on_epoch=lambda recs: print(f"{time.perf_counter() - t0:5.0f}s",
                                      *(f"{r.split} acc {r.acc:.3f} loss {r.loss:.3f}" for r in recs)))

# %% held-out metrics and how much of each trace the masks discard
test = evaluate(res.params, splits["test"])
print(f"test acc {test.acc:.3f}  macro-F1 {test.f1_macro:.3f}")
print(f"states below the mask threshold: mean {test.reduction_mean:.2f}, median {test.reduction_median:.2f}")

pred, *_ = predict(res.params, splits["test"])
for row in bucket_accuracy(pred, edges=(0, 50, 100, 200)):
    print(f"longest trace in [{row['lo']}, {row['hi']}): n={row['n']:3d} acc={row['acc']:.3f}")
