"""The trace-classification network.

Per program, every execution trace is a sequence of program states:

1. each state (a fixed-order tuple of slot values) is embedded by RNN1;
2. a forward and a backward RNN run over the state embeddings; for state
   ``t`` the forward context is the pooled forward hiddens of states before
   ``t`` and the backward context the pooled backward hiddens of states after
   ``t``; an MLP over ``[context_f, context_b, state]`` yields a soft mask in
   (0, 1) that scales the state embedding;
3. RNN2 runs over the masked states; its final hidden embeds the execution;
4. execution embeddings are max-pooled into the program embedding, which is
   classified with a softmax.

The loss is cross-entropy plus ``lambda_mask`` times the sum of all masks.

Batches hold several programs.  States are deduplicated per program before
RNN1, and every recurrence skips padded positions exactly, so padding never
changes a result.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .minilang import UNDEF, Trace
from .tensor import Tensor

PAD, UNDEF_ID, TRUE_ID, FALSE_ID, OOR_NEG, OOR_POS = range(6)
_FIRST_INT = 6

OPERATORS = ("<=", "<", ">=", ">", "==", "!=", "+", "-", "*", "(", ")")


@dataclass
class ModelConfig:
    n_classes: int = 2
    k1: int = 100
    k_prime: int = 100
    k2: int = 100
    value_embed_dim: int = 100
    value_range: int = 128
    lambda_mask: float = 1e-3
    mask_threshold: float = 0.5
    use_reduction: bool = True
    context_pooling: str = "max"  # or "mean"
    normalize_mask_sum: bool = False
    # invariant-detection head
    invariant: bool = False
    max_vars: int = 32
    k_inv: int = 100

    def __post_init__(self):
        for name in ("n_classes", "k1", "k_prime", "k2", "value_embed_dim", "value_range", "max_vars", "k_inv"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lambda_mask < 0:
            raise ValueError("lambda_mask must be >= 0")
        if not 0 < self.mask_threshold < 1:
            raise ValueError("mask_threshold must lie in (0, 1)")
        if self.context_pooling not in ("max", "mean"):
            raise ValueError("context_pooling must be 'max' or 'mean'")

    def to_dict(self) -> dict:
        return asdict(self)


class ValueVocab:
    """Token ids for slot values: PAD, UNDEF, booleans, out-of-range markers, and ints in [-V, V]."""

    def __init__(self, value_range: int = 128):
        self.V = value_range
        self.size = _FIRST_INT + 2 * value_range + 1

    def encode(self, v) -> int:
        if v is UNDEF:
            return UNDEF_ID
        if v is True:
            return TRUE_ID
        if v is False:
            return FALSE_ID
        if v > self.V:
            return OOR_POS
        if v < -self.V:
            return OOR_NEG
        return _FIRST_INT + v + self.V

    def encode_trace(self, trace: Trace) -> np.ndarray:
        """State-by-slot token matrix of shape (m, n_slots)."""
        if not trace.states:
            return np.zeros((0, 0), dtype=np.int32)
        enc = self.encode
        return np.array([[enc(v) for v in s.values] for s in trace.states], dtype=np.int32)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Named learnable tensors; iteration order is fixed by construction."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        E, k1, kp, k2 = c.value_embed_dim, c.k1, c.k_prime, c.k2
        vocab = ValueVocab(c.value_range)
        p: dict[str, np.ndarray] = {}
        p["value_emb"] = _uniform(rng, E, (vocab.size, E))
        self._gru(p, rng, "rnn1", E, k1)
        self._gru(p, rng, "fr", k1, kp)
        self._gru(p, rng, "br", k1, kp)
        p["mask.w1"] = _uniform(rng, 2 * kp + k1, (2 * kp + k1, kp))
        p["mask.b1"] = np.zeros(kp)
        p["mask.w2"] = _uniform(rng, kp, (kp, 1))
        p["mask.b2"] = np.zeros(1)
        self._gru(p, rng, "rnn2", k1, k2)
        p["cls.w"] = _uniform(rng, k2, (k2, c.n_classes))
        p["cls.b"] = np.zeros(c.n_classes)
        if c.invariant:
            p["var_emb"] = _uniform(rng, E, (c.max_vars, E))
            p["op_emb"] = _uniform(rng, E, (len(OPERATORS), E))
            self._gru(p, rng, "inv", E, c.k_inv)
            p["head.w1"] = _uniform(rng, k2 + c.k_inv, (k2 + c.k_inv, k2))
            p["head.b1"] = np.zeros(k2)
            p["head.w2"] = _uniform(rng, k2, (k2, 1))
            p["head.b2"] = np.zeros(1)
        self.tensors = {name: T.parameter(a, name=name) for name, a in p.items()}

    @staticmethod
    def _gru(p, rng, name, n_in, n_hid):
        p[f"{name}.w_in"] = _uniform(rng, n_in, (n_in, 3 * n_hid))
        p[f"{name}.w_hid"] = _uniform(rng, n_hid, (n_hid, 3 * n_hid))
        p[f"{name}.b_in"] = np.zeros(3 * n_hid)
        p[f"{name}.b_hid"] = np.zeros(3 * n_hid)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def group(self, prefix: str) -> list[Tensor]:
        return [t for n, t in self.tensors.items() if n.split(".")[0] == prefix]

    def arrays(self) -> dict:
        return {n: t.data for n, t in self.tensors.items()}

    def load_arrays(self, arrays: dict):
        for n, t in self.tensors.items():
            if arrays[n].shape != t.shape:
                raise ValueError(f"checkpoint array {n} has shape {arrays[n].shape}, expected {t.shape}")
            t.data = np.array(arrays[n], dtype=T.DTYPE)

    def save(self, prefix):
        T.save_checkpoint(prefix, self.arrays())

    def load(self, prefix):
        self.load_arrays(T.load_checkpoint(prefix))


# -- data --------------------------------------------------------------------

@dataclass
class ProgramTraces:
    """Token matrices for all executions of one program, ready for batching."""

    name: str
    tokens: list  # one (m_e, n_slots) int array per execution
    slot_vars: np.ndarray  # layout variable index of each slot
    label: int = 0
    variables: tuple = ()  # layout variable names, indexed by ``slot_vars``

    @property
    def n_slots(self) -> int:
        return len(self.slot_vars)

    @property
    def lengths(self) -> list[int]:
        return [len(t) for t in self.tokens]


def encode_program_traces(name, traces, layout, vocab: ValueVocab, label: int = 0) -> ProgramTraces:
    toks = []
    for tr in traces:
        m = vocab.encode_trace(tr)
        toks.append(m.reshape(len(tr.states), len(layout)))
    return ProgramTraces(name, toks, np.array(layout.var_index(), dtype=np.int32), label, tuple(layout.variables))


@dataclass
class StateTrie:
    """Prefix trie over the distinct states of a batch, stored level by level.

    RNN1 reads slots left to right, so states sharing a slot prefix share the
    hidden states along it.  ``leaf[u]`` is the node holding the full state
    ``u``, or -1 for states of a program with no slots.
    """

    tokens: np.ndarray  # (N,) value token per node
    vars: np.ndarray  # (N,) layout variable index per node
    parent: np.ndarray  # (N,) previous-level node, -1 at the first level
    level_starts: list
    leaf: np.ndarray  # (U,)

    @property
    def n_nodes(self) -> int:
        return len(self.tokens)


def build_trie(groups: list) -> StateTrie:
    """Trie over several groups of (sorted, distinct) state rows.

    Each group is ``(rows, slot_vars)`` with ``rows`` of shape (n, S).  Groups
    never share nodes, because variable ids may differ between programs.
    """
    depth = max([r.shape[1] for r, _ in groups if len(r)] + [0])
    per_level = [[] for _ in range(depth)]  # (tokens, vars, local parent, group)
    leaf_parts = []
    offsets = []
    for g, (rows, slot_vars) in enumerate(groups):
        n, S = rows.shape
        if n == 0 or S == 0:
            leaf_parts.append((g, None, n))
            continue
        differs = np.ones((n, S), dtype=bool)
        differs[1:] = np.cumsum(rows[1:] != rows[:-1], axis=1) > 0
        node_ids = np.cumsum(differs, axis=0) - 1  # node index within (group, level)
        for s in range(S):
            new = differs[:, s]
            par = node_ids[new, s - 1] if s else np.full(int(new.sum()), -1)
            per_level[s].append((rows[new, s], np.full(int(new.sum()), slot_vars[s]), par, g))
        leaf_parts.append((g, node_ids[:, S - 1], n))
    tokens, vars_, parent, starts = [], [], [], [0]
    base = {}  # (level, group) -> first global row
    for s, parts in enumerate(per_level):
        pos = starts[-1]
        for tok, var, par, g in parts:
            base[s, g] = pos
            tokens.append(tok)
            vars_.append(var)
            parent.append(par + base[s - 1, g] if s else par)
            pos += len(tok)
        starts.append(pos)
    leaf = []
    for g, ids, n in leaf_parts:
        if ids is None:
            leaf.append(np.full(n, -1))
        else:
            S = groups[g][0].shape[1]
            leaf.append(ids + base[S - 1, g])
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)
    return StateTrie(cat(tokens, np.int32), cat(vars_, np.int32), cat(parent, np.intp), starts, cat(leaf, np.intp))


@dataclass
class TraceBatch:
    trie: StateTrie  # distinct states of every program
    index: np.ndarray  # (T, E) distinct-state row per position; U (a zero row) at padding
    valid: np.ndarray  # (T, E) bool
    exec_counts: list  # executions per program
    labels: np.ndarray  # (P,)
    names: list = field(default_factory=list)

    @property
    def n_programs(self) -> int:
        return len(self.exec_counts)

    @property
    def n_states(self) -> int:
        return len(self.trie.leaf)


def make_batch(programs: list[ProgramTraces], pad_to: int | None = None) -> TraceBatch:
    """Stack programs into one padded batch; ``pad_to`` forces a minimum time length."""
    lengths = [m for p in programs for m in p.lengths]
    Tn = max(lengths + [pad_to or 0, 1])
    E = len(lengths)
    index = np.zeros((Tn, E), dtype=np.intp)
    valid = np.zeros((Tn, E), dtype=bool)
    groups = []
    base, e = 0, 0
    for p in programs:
        n_states = sum(p.lengths)
        if n_states and p.n_slots:
            allrows = np.concatenate([m for m in p.tokens if len(m)], axis=0)
            uniq, inv = np.unique(allrows, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
        else:
            uniq = np.zeros((1 if n_states else 0, p.n_slots), dtype=np.int32)
            inv = np.zeros(n_states, dtype=np.intp)
        groups.append((uniq, p.slot_vars))
        off = 0
        for m in p.tokens:
            n = len(m)
            index[:n, e] = base + inv[off:off + n]
            valid[:n, e] = True
            off += n
            e += 1
        base += len(uniq)
    index[~valid] = base
    return TraceBatch(build_trie(groups), index, valid, [len(p.tokens) for p in programs],
                      np.array([p.label for p in programs]), [p.name for p in programs])


# -- forward -------------------------------------------------------------------

@dataclass
class Forward:
    loss: Tensor
    ce: Tensor  # (P,)
    mask_sum: Tensor | None  # (P,)
    logits: Tensor
    program_emb: Tensor
    exec_emb: Tensor
    masks: np.ndarray | None  # (T, E) mask values, NaN at padding
    valid: np.ndarray

    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=1)


def _gru_inputs(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}.w_in"]), params[f"{name}.b_in"])


def _scan(gx, params, name, valid=None, reverse=False) -> Tensor:
    return T.gru_scan(gx, params[f"{name}.w_hid"], params[f"{name}.b_hid"], valid, reverse)


def exclusive_cummean(x: Tensor, valid, reverse: bool = False) -> Tensor:
    """Mean of valid positions strictly before (after, if ``reverse``) each position; zeros when empty."""
    v = np.asarray(valid, dtype=T.DTYPE)[..., None]
    xv = x.data * v
    if reverse:
        csum = np.cumsum(xv[::-1], axis=0)[::-1]
        ccnt = np.cumsum(v[::-1], axis=0)[::-1]
        csum = np.concatenate([csum[1:], np.zeros_like(csum[:1])])
        ccnt = np.concatenate([ccnt[1:], np.zeros_like(ccnt[:1])])
    else:
        csum = np.cumsum(xv, axis=0)
        ccnt = np.cumsum(v, axis=0)
        csum = np.concatenate([np.zeros_like(csum[:1]), csum[:-1]])
        ccnt = np.concatenate([np.zeros_like(ccnt[:1]), ccnt[:-1]])
    inv = np.where(ccnt > 0, 1.0 / np.maximum(ccnt, 1), 0.0)

    def cummean_backward(g):
        w = g * inv
        if reverse:
            # position s feeds every t < s
            acc = np.cumsum(w, axis=0)
            acc = np.concatenate([np.zeros_like(acc[:1]), acc[:-1]])
        else:
            acc = np.cumsum(w[::-1], axis=0)[::-1]
            acc = np.concatenate([acc[1:], np.zeros_like(acc[:1])])
        return (acc * v,)
    return T._node(csum * inv, (x,), cummean_backward)


def state_embeddings(params: ModelParams, trie: StateTrie, inject_vars: bool = False) -> Tensor:
    """RNN1 final hiddens of every distinct state in ``trie``, shape (U, k1)."""
    k1 = params.config.k1
    U = len(trie.leaf)
    if trie.n_nodes == 0:
        return Tensor(np.zeros((U, k1)))
    proj = _gru_inputs(params["value_emb"], params, "rnn1")  # (V, 3k1)
    gx = T.take(proj, trie.tokens)
    if inject_vars:
        gx = T.add(gx, T.take(T.matmul(params["var_emb"], params["rnn1.w_in"]), trie.vars))
    hs = T.gru_tree(gx, trie.parent, trie.level_starts, params["rnn1.w_hid"], params["rnn1.b_hid"])
    if np.all(trie.leaf >= 0):
        return T.take(hs, trie.leaf)
    table = T.concat([hs, Tensor(np.zeros((1, k1)))], axis=0)
    return T.take(table, np.where(trie.leaf >= 0, trie.leaf, trie.n_nodes))


def context_vectors(params: ModelParams, h: Tensor, valid: np.ndarray):
    """Forward/backward contexts of every position; returns (cf, cb, forward hiddens, backward hiddens)."""
    hf = _scan(_gru_inputs(h, params, "fr"), params, "fr", valid)
    hb = _scan(_gru_inputs(h, params, "br"), params, "br", valid, reverse=True)
    if params.config.context_pooling == "max":
        cf = T.exclusive_cummax(hf, valid)
        cb = T.exclusive_cummax(hb, valid, reverse=True)
    else:
        cf = exclusive_cummean(hf, valid)
        cb = exclusive_cummean(hb, valid, reverse=True)
    return cf, cb, hf, hb


def reduce_sequence(params: ModelParams, h: Tensor, valid: np.ndarray, force_mask: float | None = None):
    """Mask each state embedding using forward/backward context; returns (masked, mask).

    ``h`` has shape (T, E, k1).  The mask has shape (T, E, 1).
    """
    if force_mask is not None:
        m = Tensor(np.full(h.shape[:2] + (1,), float(force_mask)))
        return T.mul(h, m), m
    cf, cb, _, _ = context_vectors(params, h, valid)
    a = T.tanh(T.add(T.matmul(T.concat([cf, cb, h], axis=-1), params["mask.w1"]), params["mask.b1"]))
    m = T.sigmoid(T.add(T.matmul(a, params["mask.w2"]), params["mask.b2"]))
    return T.mul(h, m), m


@dataclass
class Embedding:
    program_emb: Tensor  # (P, k2)
    exec_emb: Tensor  # (E, k2)
    mask_sum: Tensor | None  # (P,)
    masks: np.ndarray | None  # (T, E), NaN at padding


def embed_batch(params: ModelParams, batch: TraceBatch, inject_vars: bool = False, hard_mask: bool = False,
                force_mask: float | None = None, use_reduction: bool | None = None) -> Embedding:
    """Program embeddings for every program in ``batch``."""
    cfg = params.config
    use_reduction = cfg.use_reduction if use_reduction is None else use_reduction
    uniq = state_embeddings(params, batch.trie, inject_vars)
    table = T.concat([uniq, Tensor(np.zeros((1, cfg.k1)))], axis=0)
    h = T.take(table, batch.index)  # (T, E, k1)
    valid = batch.valid
    masks = mask_sum = None
    if use_reduction:
        masked, m = reduce_sequence(params, h, valid, force_mask)
        if hard_mask:
            masked = T.mul(masked, (m.data >= cfg.mask_threshold).astype(T.DTYPE))
        masks = np.where(valid, m.data[..., 0], np.nan)
        vm = T.tsum(T.mul(m, valid[..., None].astype(T.DTYPE)), axis=0)  # (E, 1)
        mask_sum = T.reshape(T.matmul(T.reshape(vm, (1, -1)), _membership(batch)), (-1,))
        if cfg.normalize_mask_sum:
            mask_sum = T.mul(mask_sum, 1.0 / np.maximum(_states_per_program(batch), 1))
    else:
        masked = h
    hs2 = _scan(_gru_inputs(masked, params, "rnn2"), params, "rnn2", valid)
    exec_emb = hs2[hs2.shape[0] - 1]  # (E, k2)
    prog_emb = T.segment_max_pool(exec_emb, batch.exec_counts)
    return Embedding(prog_emb, exec_emb, mask_sum, masks)


def forward(params: ModelParams, batch: TraceBatch, inject_vars: bool = False, hard_mask: bool = False,
            force_mask: float | None = None, use_reduction: bool | None = None) -> Forward:
    """Classification forward pass with the mask-regularised loss averaged over programs."""
    cfg = params.config
    emb = embed_batch(params, batch, inject_vars, hard_mask, force_mask, use_reduction)
    logits = T.add(T.matmul(emb.program_emb, params["cls.w"]), params["cls.b"])
    ce = T.softmax_cross_entropy(logits, batch.labels)
    per_program = ce
    if emb.mask_sum is not None and cfg.lambda_mask != 0:
        per_program = T.add(ce, T.scale(emb.mask_sum, cfg.lambda_mask))
    loss = T.scale(T.tsum(per_program), 1.0 / batch.n_programs)
    return Forward(loss, ce, emb.mask_sum, logits, emb.program_emb, emb.exec_emb, emb.masks, batch.valid)


def _membership(batch: TraceBatch) -> np.ndarray:
    E = sum(batch.exec_counts)
    out = np.zeros((E, batch.n_programs))
    e = 0
    for p, q in enumerate(batch.exec_counts):
        out[e:e + q, p] = 1.0
        e += q
    return out


def _states_per_program(batch: TraceBatch) -> np.ndarray:
    per_exec = batch.valid.sum(axis=0)
    out, e = [], 0
    for q in batch.exec_counts:
        out.append(per_exec[e:e + q].sum())
        e += q
    return np.array(out, dtype=T.DTYPE)


# -- single-example operations -------------------------------------------------

def embed_state(params: ModelParams, state_tokens) -> Tensor:
    """Final RNN1 hidden over one state's slot tokens, shape (k1,)."""
    toks = np.asarray(state_tokens, dtype=np.int32).reshape(1, -1)
    if toks.size and (toks.min() < 0 or toks.max() >= params["value_emb"].shape[0]):
        raise IndexError("unknown token id")
    trie = build_trie([(toks, np.zeros(toks.shape[1], dtype=np.int32))])
    return state_embeddings(params, trie)[0]


def reduce_states(params: ModelParams, state_embeddings_: list):
    """Masked state embeddings and their masks for one execution."""
    h = T.reshape(T.concat([T.reshape(x, (1, -1)) for x in state_embeddings_], axis=0), (len(state_embeddings_), 1, -1))
    masked, m = reduce_sequence(params, h, np.ones((len(state_embeddings_), 1), dtype=bool))
    return [masked[t, 0] for t in range(len(state_embeddings_))], [m[t, 0, 0] for t in range(len(state_embeddings_))]


def embed_execution(params: ModelParams, masked: list) -> Tensor:
    """Final RNN2 hidden over one execution's masked states, shape (k2,)."""
    x = T.reshape(T.concat([T.reshape(v, (1, -1)) for v in masked], axis=0), (len(masked), 1, -1))
    hs = _scan(_gru_inputs(x, params, "rnn2"), params, "rnn2")
    return hs[len(masked) - 1, 0]


def embed_program(execution_embeddings: list) -> Tensor:
    """Coordinatewise max over a program's execution embeddings."""
    return T.max_pool(T.concat([T.reshape(v, (1, -1)) for v in execution_embeddings], axis=0), axis=0)


def classify(params: ModelParams, program_emb: Tensor) -> Tensor:
    return T.add(T.matmul(T.reshape(program_emb, (1, -1)), params["cls.w"]), params["cls.b"])[0]


def loss(logits: Tensor, label: int, masks: list, lambda_mask: float) -> Tensor:
    """Cross-entropy of one program plus ``lambda_mask`` times the sum of its masks."""
    ce = T.softmax_cross_entropy(T.reshape(logits, (1, -1)), [label])[0]
    if not masks or lambda_mask == 0:
        return ce
    total = masks[0]
    for m in masks[1:]:
        total = T.add(total, m)
    return T.add(ce, T.scale(total, lambda_mask))


def reduction_rate(masks, threshold: float = 0.5) -> dict:
    """Fraction of states whose mask is below ``threshold``: mean and median over traces.

    ``masks`` is either a list of per-trace mask sequences or a (T, E) array
    with NaN at padded positions.
    """
    if isinstance(masks, np.ndarray) and masks.ndim == 2:
        per_trace = [col[~np.isnan(col)] for col in masks.T]
    else:
        per_trace = [np.asarray(m, dtype=float).reshape(-1) for m in masks]
    rates = [float(np.mean(m < threshold)) for m in per_trace if len(m)]
    if not rates:
        return {"mean": 0.0, "median": 0.0}
    return {"mean": float(np.mean(rates)), "median": float(np.median(rates))}
