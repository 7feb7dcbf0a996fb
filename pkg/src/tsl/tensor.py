"""A small reverse-mode autodiff library on top of numpy.

Only the operations the trace model needs are provided.  Every op builds its
result with :func:`_node`, which records the parents and a closure mapping the
output gradient to parent gradients.  :func:`backward` walks the graph in
reverse topological order and accumulates into leaf ``.grad`` buffers.

All arrays are float64.
"""
from __future__ import annotations

import contextlib
import json
import warnings

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text

DTYPE = np.float64

_state = {"grad": True, "check_finite": False, "tie_tol": None, "ties": 0}


class TieWarning(UserWarning):
    """A max over a set saw (near-)equal candidates, where the gradient is only a subgradient."""


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def detect_anomaly():
    """Raise ``FloatingPointError`` as soon as any op produces NaN or Inf."""
    old = _state["check_finite"]
    _state["check_finite"] = True
    try:
        yield
    finally:
        _state["check_finite"] = old


@contextlib.contextmanager
def track_ties(tol: float):
    """Count max-pool decisions whose top two candidates are within ``tol``; yields a getter."""
    old = _state["tie_tol"], _state["ties"]
    _state["tie_tol"], _state["ties"] = tol, 0
    try:
        yield lambda: _state["ties"]
    finally:
        _state["tie_tol"], _state["ties"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {backward_fn.__qualname__.split('.')[0]}")
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def add_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _node(a.data + b.data, (a, b), add_backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def sub_backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _node(a.data - b.data, (a, b), sub_backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (e.g. a per-row mask over a matrix)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def mul_backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _node(a.data * b.data, (a, b), mul_backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    d = 1.0 + e
    return np.where(x >= 0, 1.0 / d, e / d)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


# -- shape ---------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def matmul_backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    return _node(a.data @ b.data, (a, b), matmul_backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ValueError(f"concat: {err}") from None
    cuts = np.cumsum(sizes)[:-1]

    def concat_backward(g):
        return tuple(np.split(g, cuts, axis=axis))
    return _node(data, tuple(tensors), concat_backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, key) -> Tensor:
    """Basic indexing (ints and slices)."""
    a = as_tensor(a)

    def getitem_backward(g):
        out = np.zeros_like(a.data)
        out[key] += g
        return (out,)
    return _node(a.data[key], (a,), getitem_backward)


def _scatter_rows(shape, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sum ``rows`` into a zero array of ``shape`` at first-axis positions ``idx``."""
    flat = np.ascontiguousarray(rows.reshape(len(idx), -1).T)
    cols = [np.bincount(idx, weights=c, minlength=shape[0]) for c in flat]
    if not cols:
        return np.zeros(shape)
    return np.stack(cols, axis=1).reshape(shape)


def take(table, idx) -> Tensor:
    """Gather rows of ``table`` (first axis) by an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take: index out of range for table with {table.shape[0]} rows")

    def take_backward(g):
        return (_scatter_rows(table.shape, idx.reshape(-1), g.reshape((-1,) + table.shape[1:])),)
    return _node(table.data[idx], (table,), take_backward)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def sum_backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _node(np.sum(a.data, axis=axis), (a,), sum_backward)


# -- pooling -------------------------------------------------------------------

def _count_ties(x: np.ndarray, axis: int):
    tol = _state["tie_tol"]
    if tol is None or x.shape[axis] < 2:
        return
    part = -np.partition(-x, 1, axis=axis)
    top = np.take(part, 0, axis=axis)
    second = np.take(part, 1, axis=axis)
    _state["ties"] += int(np.sum(top - second <= tol))


def max_pool(x, axis: int = 0) -> Tensor:
    """Coordinatewise max over a set; the gradient goes to the lowest index among equal maxima."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("max_pool over an empty set")
    _count_ties(x.data, axis)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def max_pool_backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)
    return _node(out, (x,), max_pool_backward)


def segment_max_pool(x, counts) -> Tensor:
    """Max over consecutive row groups of ``x``; group ``k`` has ``counts[k]`` rows."""
    x = as_tensor(x)
    counts = [int(c) for c in counts]
    if sum(counts) != x.shape[0] or min(counts) < 1:
        raise ValueError("segment_max_pool: counts must be positive and sum to the number of rows")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
    outs, args = [], []
    for s, c in zip(starts, counts):
        block = x.data[s:s + c]
        _count_ties(block, 0)
        a = np.argmax(block, axis=0)
        args.append(a + s)
        outs.append(np.take_along_axis(block, a[None], axis=0)[0])
    rows = np.stack(args)

    def segment_max_backward(g):
        gx = np.zeros_like(x.data)
        cols = np.indices(rows.shape)[1:]
        np.add.at(gx, (rows,) + tuple(cols), g)
        return (gx,)
    return _node(np.stack(outs), (x,), segment_max_backward)


def exclusive_cummax(x, valid=None, reverse: bool = False) -> Tensor:
    """Running max along axis 0, excluding the current position.

    For ``x`` of shape (T, B, H) and ``valid`` of shape (T, B), position ``t``
    receives the coordinatewise max of ``x[s]`` over valid ``s < t`` (``s > t``
    when ``reverse``), or zeros when that set is empty.  Among equal maxima the
    gradient goes to the lowest position.
    """
    x = as_tensor(x)
    T = x.shape[0]
    v = np.ones(x.shape[:2], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    run = np.full(x.shape[1:], -np.inf)
    arg = np.full(x.shape[1:], -1, dtype=np.intp)
    out = np.zeros_like(x.data)
    args = np.empty(x.shape, dtype=np.intp)
    tol = _state["tie_tol"]
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        out[t] = np.where(arg >= 0, run, 0.0)
        args[t] = arg
        xt = x.data[t]
        vt = v[t][:, None]
        if tol is not None:
            _state["ties"] += int(np.sum(vt & (arg >= 0) & (np.abs(xt - run) <= tol)))
        # scanning downward, >= hands ties to the lower index; scanning upward, > keeps it
        better = vt & ((xt >= run) if reverse else (xt > run))
        run = np.where(better, xt, run)
        arg = np.where(better, t, arg)

    def cummax_backward(g):
        gx = np.zeros_like(x.data)
        hit = args >= 0
        idx = np.nonzero(hit)
        np.add.at(gx, (args[hit],) + idx[1:], g[hit])
        return (gx,)
    return _node(out, (x,), cummax_backward)


# -- losses ------------------------------------------------------------------

def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-row cross-entropy of softmax(logits) against integer labels; shape (N,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(len(labels))
    loss = lse - z[rows, labels]

    def ce_backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * g[:, None],)
    return _node(loss, (logits,), ce_backward)


def hinge_loss(scores, labels) -> Tensor:
    """``max(0, 1 - y * s)`` per element for labels in {-1, +1}."""
    scores = as_tensor(scores)
    y = np.asarray(labels, dtype=DTYPE)
    margin = 1.0 - y * scores.data
    active = margin > 0
    return _node(np.where(active, margin, 0.0), (scores,), lambda g: (np.where(active, -y * g, 0.0),))


# -- recurrence ------------------------------------------------------------

def gru_cell(x, h, w_in, w_hid, b_in, b_hid) -> Tensor:
    """One GRU step composed from primitive ops (gate order r, z, n)."""
    H = w_hid.shape[0]
    gx = add(matmul(x, w_in), b_in)
    gh = add(matmul(h, w_hid), b_hid)
    r = sigmoid(add(gx[..., :H], gh[..., :H]))
    z = sigmoid(add(gx[..., H:2 * H], gh[..., H:2 * H]))
    n = tanh(add(gx[..., 2 * H:], mul(r, gh[..., 2 * H:])))
    return add(mul(sub(1.0, z), n), mul(z, h))


def gru_scan(gx, w_hid, b_hid, valid=None, reverse: bool = False) -> Tensor:
    """Run the GRU recurrence over pre-projected inputs as a single graph node.

    ``gx`` has shape (T, B, 3H) and already includes the input bias.  Steps
    where ``valid`` is False copy the previous hidden state unchanged, so
    padded positions never alter the result.  Returns all hidden states,
    shape (T, B, H), aligned with the input positions; with ``reverse`` the
    scan runs from ``T - 1`` down to 0.  Numerically identical to chaining
    :func:`gru_cell`.
    """
    gx, w_hid, b_hid = as_tensor(gx), as_tensor(w_hid), as_tensor(b_hid)
    T, B, H3 = gx.shape
    H = H3 // 3
    if w_hid.shape != (H, H3) or b_hid.shape != (H3,):
        raise ValueError(f"gru_scan: recurrent weights {w_hid.shape}/{b_hid.shape} do not match inputs {gx.shape}")
    v = np.ones((T, B), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    W, bh, X = w_hid.data, b_hid.data, gx.data
    hs = np.zeros((T, B, H))
    # per-step cache for the backward pass
    r_s, z_s, n_s, ghn_s = (np.zeros((T, B, H)) for _ in range(4))
    order = list(range(T - 1, -1, -1)) if reverse else list(range(T))
    h = np.zeros((B, H))
    for t in order:
        gh = h @ W + bh
        xt = X[t]
        r = _sigmoid(xt[:, :H] + gh[:, :H])
        z = _sigmoid(xt[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(xt[:, 2 * H:] + r * gh[:, 2 * H:])
        h_new = (1.0 - z) * n + z * h
        h = np.where(v[t][:, None], h_new, h)
        hs[t], r_s[t], z_s[t], n_s[t], ghn_s[t] = h, r, z, n, gh[:, 2 * H:]

    def gru_backward(g):
        dX = np.zeros_like(X)
        dW = np.zeros_like(W)
        dbh = np.zeros_like(bh)
        dh = np.zeros((B, H))
        for k in range(T - 1, -1, -1):
            t = order[k]
            h_prev = hs[order[k - 1]] if k > 0 else np.zeros((B, H))
            dh = dh + g[t]
            vt = v[t][:, None]
            dnew = np.where(vt, dh, 0.0)
            dh_prev = np.where(vt, 0.0, dh)
            r, z, n, ghn = r_s[t], z_s[t], n_s[t], ghn_s[t]
            dn = dnew * (1.0 - z)
            dz = dnew * (h_prev - n)
            dh_prev += dnew * z
            dan = dn * (1.0 - n * n)
            dar = dan * ghn * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
            dX[t] = np.concatenate([dar, daz, dan], axis=1)
            dW += h_prev.T @ dgh
            dbh += dgh.sum(axis=0)
            dh = dh_prev + dgh @ W.T
        return dX, dW, dbh
    return _node(hs, (gx, w_hid, b_hid), gru_backward)


def gru_tree(gx, parent, level_starts, w_hid, b_hid) -> Tensor:
    """GRU over the nodes of a forest, each node continuing from its parent's hidden state.

    Nodes are stored level by level: level ``s`` occupies rows
    ``level_starts[s]:level_starts[s + 1]`` of ``gx`` (N, 3H).  ``parent[i]``
    is the row of node ``i``'s parent in the previous level, or -1 for a root
    (zero initial state); within a level parents must be non-decreasing.
    A root-to-node path computes exactly what :func:`gru_scan` computes on the
    same input sequence.  Returns the hidden state of every node, (N, H).
    """
    gx, w_hid, b_hid = as_tensor(gx), as_tensor(w_hid), as_tensor(b_hid)
    N, H3 = gx.shape
    H = H3 // 3
    if w_hid.shape != (H, H3) or b_hid.shape != (H3,):
        raise ValueError(f"gru_tree: recurrent weights {w_hid.shape}/{b_hid.shape} do not match inputs {gx.shape}")
    parent = np.asarray(parent, dtype=np.intp)
    starts = [int(s) for s in level_starts]
    W, bh, X = w_hid.data, b_hid.data, gx.data
    hs = np.zeros((N, H))
    r_s, z_s, n_s, ghn_s = (np.zeros((N, H)) for _ in range(4))
    levels = []
    for s in range(len(starts) - 1):
        a, b = starts[s], starts[s + 1]
        par = parent[a:b]
        if s == 0:
            if np.any(par >= 0):
                raise ValueError("gru_tree: first-level nodes must be roots")
            h_prev = np.zeros((b - a, H))
            gh = np.broadcast_to(bh, (b - a, H3))
            groups = None
        else:
            lo = starts[s - 1]
            # distinct parents in order, and where each one's children begin
            first = np.flatnonzero(np.r_[True, par[1:] != par[:-1]])
            uniq = par[first]
            if uniq[0] < lo or uniq[-1] >= a or np.any(np.diff(par) < 0):
                raise ValueError("gru_tree: parents must be sorted nodes of the previous level")
            gh_u = hs[uniq] @ W + bh
            counts = np.diff(np.r_[first, b - a])
            gh = np.repeat(gh_u, counts, axis=0)
            h_prev = hs[par]
            groups = (first, uniq)
        xt = X[a:b]
        r = _sigmoid(xt[:, :H] + gh[:, :H])
        z = _sigmoid(xt[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(xt[:, 2 * H:] + r * gh[:, 2 * H:])
        hs[a:b] = (1.0 - z) * n + z * h_prev
        r_s[a:b], z_s[a:b], n_s[a:b], ghn_s[a:b] = r, z, n, gh[:, 2 * H:]
        levels.append((a, b, groups))

    def gru_tree_backward(g):
        dX = np.zeros_like(X)
        dW = np.zeros_like(W)
        dbh = np.zeros_like(bh)
        dh_all = np.array(g, dtype=DTYPE)
        for a, b, groups in reversed(levels):
            dnew = dh_all[a:b]
            r, z, n, ghn = r_s[a:b], z_s[a:b], n_s[a:b], ghn_s[a:b]
            dn = dnew * (1.0 - z)
            dan = dn * (1.0 - n * n)
            dar = dan * ghn * r * (1.0 - r)
            dX[a:b, 2 * H:] = dan
            dX[a:b, :H] = dar
            if groups is None:
                dz = dnew * (-n)
                daz = dz * z * (1.0 - z)
                dX[a:b, H:2 * H] = daz
                dbh += np.concatenate([dar, daz, dan * r], axis=1).sum(axis=0)
                continue
            first, uniq = groups
            h_prev = hs[parent[a:b]]
            dz = dnew * (h_prev - n)
            daz = dz * z * (1.0 - z)
            dX[a:b, H:2 * H] = daz
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
            dgh_u = np.add.reduceat(dgh, first, axis=0)
            dW += hs[uniq].T @ dgh_u
            dbh += dgh_u.sum(axis=0)
            dh_all[uniq] += np.add.reduceat(dnew * z, first, axis=0) + dgh_u @ W.T
        return dX, dW, dbh
    return _node(hs, (gx, w_hid, b_hid), gru_tree_backward)


# -- graph traversal -------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (parents first)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if not loss.requires_grad:
        raise RuntimeError("backward() on a tensor that is not part of a differentiable graph")
    if grad is None:
        if loss.data.size != 1:
            raise RuntimeError("backward() needs an explicit gradient for non-scalar outputs")
        grad = np.ones_like(loss.data)
    tape = build_tape(loss)
    grads = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp


# -- verification ------------------------------------------------------------

def grad_check(f, params, epsilon: float = 1e-6, max_coords: int | None = 20, rng=None, order: int = 2) -> float:
    """Compare autodiff and central-difference gradients of the scalar ``f()``.

    Returns the max over sampled coordinates of
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.  ``max_coords`` caps the
    coordinates probed per parameter (None probes all).  ``order=4`` uses the
    five-point central stencil, whose truncation error is small enough to
    allow a larger ``epsilon`` and so less roundoff on tiny gradients.
    Emits a :class:`TieWarning` when a max-pool decision is within
    ``epsilon`` of a tie.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    stencil = {2: ((1, 0.5),), 4: ((1, 8 / 12), (2, -1 / 12))}[order]
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.zero_grad()
    with track_ties(epsilon) as ties:
        loss = f()
        n_ties = ties()
    backward(loss)
    if n_ties:
        warnings.warn(f"{n_ties} max-pool decisions within {epsilon} of a tie; gradients there are subgradients",
                      TieWarning, stacklevel=2)
    worst = 0.0
    for p in params:
        g_ad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            old = flat[c]
            fd = 0.0
            with no_grad():
                for k, w in stencil:
                    flat[c] = old + k * epsilon
                    up = float(f().data)
                    flat[c] = old - k * epsilon
                    down = float(f().data)
                    fd += w * (up - down)
            flat[c] = old
            fd /= epsilon
            ad = float(g_ad.reshape(-1)[c])
            worst = max(worst, abs(ad - fd) / max(1e-8, abs(ad) + abs(fd)))
    return worst


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(prefix, arrays: dict) -> None:
    """Write ``prefix.bin`` (concatenated little-endian float64) and ``prefix.json`` (manifest)."""
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.array(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    atomic_write_bytes(f"{prefix}.bin", b"".join(chunks))
    atomic_write_text(f"{prefix}.json", json.dumps({"dtype": "<f8", "arrays": manifest}, indent=1))


def load_checkpoint(prefix) -> dict:
    with open(f"{prefix}.json") as fh:
        manifest = json.load(fh)
    with open(f"{prefix}.bin", "rb") as fh:
        blob = fh.read()
    out = {}
    for entry in manifest["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=entry["offset"])
        out[entry["name"]] = a.reshape(entry["shape"]).astype(DTYPE)
    return out
