"""A short look at the tensor engine: build a graph, backprop, compare with finite differences."""

import numpy as np

from jetforge import gradcheck as G
from jetforge import tensor as T
from jetforge.tensor import Tensor

rng = np.random.default_rng(0)

# a one-layer softmax classifier on four points
x = Tensor(rng.normal(size=(4, 3)))
w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
b = Tensor(np.zeros(5), requires_grad=True)
labels = np.array([0, 2, 4, 1])

loss = T.nll_loss(T.log_softmax(T.linear(x, w, b), axis=-1), labels)
loss.backward()
print("loss", round(loss.item(), 6))
print("dL/db", np.round(b.grad, 6))

# the same gradient by central differences
def loss_of_bias(bias):
    return T.nll_loss(T.log_softmax(T.linear(x, Tensor(w.data), Tensor(bias)), axis=-1), labels).item()

numeric = G.numeric_grad(loss_of_bias, b.data)
print("relative error", G.rel_err(b.grad, numeric))

# every op in one sweep
worst = max(G.check_op(fn, arrays, rng) for _, fn, arrays in G.op_cases(rng))
print("worst op error this seed", f"{worst:.2e}")
