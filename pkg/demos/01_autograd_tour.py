"""A short tour of the tape-based autograd in ``synprompt.tensor_core``.

Run with ``python demos/01_autograd_tour.py``.
"""
import numpy as np

from synprompt import tensor_core as tc
from synprompt.tensor_core import DiffValue

# %% A value only joins the tape when something upstream wants a gradient.
w = DiffValue(np.array([[0.5, -1.0], [2.0, 0.25]]), requires_grad=True, name="w")
x = DiffValue(np.array([[1.0, 2.0]]))

with tc.Tape() as tape:
    h = tc.gelu(tc.matmul(x, w))
    loss = tc.sum(tc.mul(h, h))
tc.backward(tape, loss)
print("loss      ", float(loss.data))
print("dloss/dw\n", w.grad)

# %% Central differences agree with the tape to roundoff.
err = tc.finite_diff_check(lambda: tc.sum(tc.mul(tc.gelu(tc.matmul(x, w)), tc.gelu(tc.matmul(x, w)))), [w])
print("finite-difference relative error", err)

# %% Gradients accumulate until cleared.
w.zero_grad()
for _ in range(2):
    with tc.Tape() as tape:
        out = tc.sum(tc.matmul(x, w))
    tc.backward(tape, out)
print("after two passes\n", w.grad)

# %% The sigmoid never reaches 0 or 1, even far in the tails.
s = tc.sigmoid(DiffValue(np.array([-800.0, 0.0, 800.0]))).data
print("sigmoid tails", s, (s > 0).all() and (s < 1).all())
