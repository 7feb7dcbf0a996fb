"""Finite-difference checks of the full classification loss and the invariant head on toy batches."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .invariant import InvariantBatch, InvariantVocab, invariant_loss, score_batch
from .model import ModelConfig, ModelParams, ProgramTraces, forward, make_batch

TOY_CONFIG = dict(k1=4, k_prime=3, k2=4, value_embed_dim=3, value_range=8, max_vars=4, k_inv=3)
# Probe points use weights a few times larger than the initialisation: at
# init the toy activations are tiny, gradients reach 1e-8 and the check
# measures finite-difference roundoff rather than the backward pass.
PROBE_SCALE = 4.0
EPSILON = 1e-3
ORDER = 4
MAX_REDRAWS = 50


def _probe_params(config: ModelConfig, rng) -> ModelParams:
    params = ModelParams(config, seed=int(rng.integers(2**31)))
    for p in params:
        p.data *= PROBE_SCALE
    return params


def _tie_free(f) -> bool:
    """True when no max-pool decision of ``f`` is within reach of the stencil."""
    with T.no_grad(), T.track_ties(2 * EPSILON) as ties:
        f()
        return ties() == 0


def toy_programs(rng, n_programs: int = 2, n_exec: int = 2, max_states: int = 5, n_slots: int = 3,
                 n_tokens: int = 23) -> list[ProgramTraces]:
    """Random token traces; executions of a program are distinct so pooling has no exact ties."""
    progs = []
    for p in range(n_programs):
        toks = []
        while len(toks) < n_exec:
            m = int(rng.integers(2, max_states + 1))
            t = rng.integers(1, n_tokens, size=(m, n_slots)).astype(np.int32)
            if not any(t.shape == u.shape and np.array_equal(t, u) for u in toks):
                toks.append(t)
        progs.append(ProgramTraces(f"toy{p}", toks, np.arange(n_slots, dtype=np.int32) % 4, p % 2))
    return progs


def classification_check(seed: int, probes: int = 10, max_coords: int = 6, lambda_mask: float = 1e-2) -> float:
    """Worst relative error of d(loss)/d(all parameters) over ``probes`` seeded points."""
    worst = 0.0
    for k in range(probes):
        rng = np.random.default_rng([seed, k])
        for _ in range(MAX_REDRAWS):
            params = _probe_params(ModelConfig(n_classes=2, lambda_mask=lambda_mask, **TOY_CONFIG), rng)
            batch = make_batch(toy_programs(rng))
            f = lambda: forward(params, batch).loss
            if _tie_free(f):
                break
        else:
            raise RuntimeError("could not draw a tie-free probe point")
        err = T.grad_check(f, list(params), epsilon=EPSILON, max_coords=max_coords, rng=rng, order=ORDER)
        worst = max(worst, err)
    return worst


def invariant_check(seed: int, probes: int = 10, max_coords: int = 6) -> float:
    """Worst relative error of the hinge loss gradient through the invariant head."""
    worst = 0.0
    for k in range(probes):
        rng = np.random.default_rng([seed, 1000 + k])
        var_index = {"a": 0, "b": 1, "c": 2}
        # an odd count, so the bias gradient of the head cannot cancel to exactly zero
        cands = [("a", ">=", "b"), ("b", "<", "c", "+", "1"), ("a", "==", "0"), ("c", "!=", "a"), ("(", "a", "-", "b", ")", "*", "2", "<", "c")]
        for _ in range(MAX_REDRAWS):
            params = _probe_params(ModelConfig(n_classes=2, invariant=True, **TOY_CONFIG), rng)
            ids = [InvariantVocab(params).encode(c, var_index) for c in cands]
            batch = InvariantBatch(toy_programs(rng), np.array([0, 0, 1, 1, 1]), ids, np.ones(len(cands)))
            # labels opposite to the current scores keep every hinge far inside its linear region
            with T.no_grad():
                scores = score_batch(params, batch)[0].data
            batch.labels = np.where(scores > 0, -1.0, 1.0)
            f = lambda: invariant_loss(params, batch)[0]
            if _tie_free(f):
                break
        else:
            raise RuntimeError("could not draw a tie-free probe point")
        err = T.grad_check(f, list(params), epsilon=EPSILON, max_coords=max_coords, rng=rng, order=ORDER)
        worst = max(worst, err)
    return worst


def run(seed: int = 0, probes: int = 10) -> dict:
    return {"classification": classification_check(seed, probes), "invariant": invariant_check(seed, probes)}
