"""Tour of the tensor library: ops, gradients, and the finite-difference habit.

Run: python demos/01_tensor_autodiff.py
"""

import numpy as np

from dualdistill import tensor as T

rng = np.random.default_rng(0)

# build a small expression: y = mean(softmax(x W) * M)
x = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
w = T.Tensor(rng.normal(size=(6, 6)) * 0.3, requires_grad=True)
mask = T.Tensor(rng.uniform(0, 1, (4, 6)))

y = T.reduce_mean(T.mul(T.softmax(T.matmul(x, w), axis=-1), mask))
print(f"loss = {float(y.data):.6f}")

T.backward(y)
print(f"grad wrt x has shape {x.grad.shape}, mean magnitude {np.abs(x.grad).mean():.2e}")

# check one entry against central differences, the way the test suite does
eps = 1e-5
orig = x.data[1, 2]
x.data[1, 2] = orig + eps
hi = float(T.reduce_mean(T.mul(T.softmax(T.matmul(T.Tensor(x.data), w), axis=-1), mask)).data)
x.data[1, 2] = orig - eps
lo = float(T.reduce_mean(T.mul(T.softmax(T.matmul(T.Tensor(x.data), w), axis=-1), mask)).data)
x.data[1, 2] = orig
numeric = (hi - lo) / (2 * eps)
print(f"x[1,2]: analytic {x.grad[1, 2]:.10f} vs finite-diff {numeric:.10f}")

# frozen evaluation: no graph is recorded inside no_grad
with T.no_grad():
    frozen = T.softmax(T.matmul(x, w), axis=-1)
print(f"no_grad output requires_grad={frozen.requires_grad}")

# non-finite values fail loudly rather than propagating
try:
    with np.errstate(over="ignore"):
        T.scale(T.Tensor([1e308]), 10.0)
except Exception as e:
    print(f"overflow is an error: {type(e).__name__}: {e}")
