"""The tape-based autodiff layer, checked against finite differences.

Everything the model needs (GRU scans over a prefix trie, exclusive running
maxima for the mask contexts, segment max pooling, cross-entropy and hinge
losses) is built from a handful of primitives with hand-written adjoints.
"""
# %%
import numpy as np

from tsl import tensor as T
from tsl.gradcheck import run

rng = np.random.default_rng(0)

# %% a GRU over a short batch, reverse direction, with padding
H, D = 4, 3
w_in, w_hid = T.parameter(rng.standard_normal((D, 3 * H))), T.parameter(rng.standard_normal((H, 3 * H)))
b_in, b_hid = T.parameter(np.zeros(3 * H)), T.parameter(np.zeros(3 * H))
x = T.parameter(rng.standard_normal((5, 2, D)))
valid = np.array([[1, 1], [1, 1], [1, 0], [1, 0], [1, 0]], dtype=bool)
probe = rng.standard_normal((5, 2, H))


def scalar():
    hs = T.gru_scan(T.add(T.matmul(x, w_in), b_in), w_hid, b_hid, valid, reverse=True)
    return T.tsum(T.mul(hs, probe))


print("GRU scan, worst relative error:", T.grad_check(scalar, [x, w_in, w_hid, b_in, b_hid], max_coords=None))

# %% exclusive running max: position t sees only what came before it
seq = np.array([3.0, 1.0, 4.0, 1.0, 5.0]).reshape(5, 1, 1)
print("forward contexts: ", T.exclusive_cummax(seq).data.ravel())
print("backward contexts:", T.exclusive_cummax(seq, reverse=True).data.ravel())

# %% the whole classification loss and the invariant head
print(run(seed=7, probes=3))
