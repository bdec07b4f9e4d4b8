"""Tour of the tensor tape: build a tiny expression, differentiate it, and
verify the gradients against central finite differences."""

import numpy as np

from cnagnn import Tensor, backward, finite_difference_check
from cnagnn.autodiff import matmul, mul, reduce_sum, relu

rng = np.random.default_rng(0)

# A tiny two-layer computation: loss = sum(relu(x W) * t)
x = Tensor(rng.uniform(-1, 1, (4, 3)))
w = Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
t = Tensor(rng.uniform(-1, 1, (4, 2)))

loss = reduce_sum(mul(relu(matmul(x, w)), t))
print("loss value:", loss.item())

backward(loss)
print("dL/dW:\n", w.grad)

# The same gradient, checked numerically. The tape and the finite-difference
# estimate agree to a few parts in a million.
err = finite_difference_check(
    lambda: reduce_sum(mul(relu(matmul(x, w)), t)), [w]
)
print(f"max relative error vs central differences: {err:.2e}")

# Gradients accumulate across shared uses: w appears twice below, and its
# gradient is the sum of both paths.
w.zero_grad()
loss2 = reduce_sum(mul(w, w)) + reduce_sum(w) * 3.0
backward(loss2)
print("d(sum(w*w) + 3 sum(w))/dw == 2w + 3:",
      np.allclose(w.grad, 2 * w.data + 3))
