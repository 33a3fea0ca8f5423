"""
Reverse-mode gradients on numpy arrays
======================================

Build a small graph by hand, run backward, and compare against central
finite differences.
"""
import numpy as np

from perceiver_ts import tensor as T
from perceiver_ts.gradcheck import numerical_grad, rel_error
from perceiver_ts.tensor import Tensor

rng = np.random.default_rng(0)

# a one-layer softmax "attention" over four keys
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
target = rng.normal(size=(3, 4))


def loss_fn():
    return T.mse(T.softmax_rows(T.matmul(x, w)), target)


loss = loss_fn()
T.backward(loss)
print("loss", loss.item())


def f():
    with T.no_grad():
        return loss_fn().item()


for name, t in (("x", x), ("w", w)):
    num = numerical_grad(f, t.data)
    print(f"d loss / d {name}: relative error vs finite differences {rel_error(t.grad, num):.2e}")

# broadcasting works in both directions; gradients are summed back
b = Tensor(np.zeros(4), requires_grad=True)
T.backward(T.sum_all(T.add(x, b)))
print("bias gradient (one per row of x):", b.grad)
