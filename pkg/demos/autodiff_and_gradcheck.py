"""Reverse-mode autodiff on numpy arrays, checked against finite differences."""

import numpy as np

from artda import tensor as T
from artda import gradcheck

# a tiny two-layer graph: loss = sum(relu(x @ w) * c)
rng = np.random.default_rng(0)
x = T.Tensor(rng.standard_normal((4, 3)))
w = T.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
c = rng.standard_normal((4, 2))

loss = T.tsum(T.mul(T.relu(T.matmul(x, w)), c))
loss.backward()
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# the same gradient by hand: x^T (c * 1[xw > 0])
mask = (x.data @ w.data) > 0
print("matches hand-derived:", np.allclose(w.grad, x.data.T @ (c * mask)))

# gradient reversal: identity forward, negated backward
z = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
T.tsum(T.mul(T.grad_reverse(z), np.array([3.0, 5.0]))).backward()
print("grad through grad_reverse:", z.grad)  # [-3, -5]

# stop_gradient cuts the graph
z.grad = None
T.tsum(T.add(T.stop_gradient(z), z)).backward()
print("grad with one detached branch:", z.grad)  # [1, 1]

# the packaged suite: central differences in float64, a few trials per op
results = gradcheck.run_suite(["tensor", "bilinear"], trials=5)
print(gradcheck.format_results(results))
