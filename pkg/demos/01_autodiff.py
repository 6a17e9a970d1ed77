"""
Reverse-mode differentiation on numpy arrays
=============================================

Build a small graph, pull gradients back through it, then differentiate a
gradient norm a second time (the trick behind a gradient penalty).
"""
import numpy as np

from dualsynth import autodiff as ad

# float64 arrays stay float64; plain lists would take the default float32
x = ad.tensor(np.array([[0.5, -1.0, 2.0]]), requires_grad=True)
w = ad.tensor(np.array([[1.0], [2.0], [-0.5]]), requires_grad=True)

y = ad.sigmoid(ad.matmul(x, w))
grads = ad.backward(ad.sum_(y))
print("y =", y.data.ravel())
print("dy/dw =", grads[w].ravel())

# the same number by hand: sigmoid'(z) * x
z = x.data @ w.data
s = 1 / (1 + np.exp(-z))
print("by hand =", (s * (1 - s) * x.data).ravel())

# second order: d/dw of (||dy/dx|| - 1)^2
gx, = ad.grad(ad.sum_(y), [x], create_graph=True)
penalty = ad.sum_(ad.power(ad.sub(ad.sqrt(ad.sum_(ad.mul(gx, gx))), 1.0), 2.0))
print("penalty =", penalty.item(), " d penalty/dw =", ad.backward(penalty)[w].ravel())

# operators are registered by name and can be checked against central differences
rep = ad.finite_difference_check("conv2d", [np.random.default_rng(0).standard_normal((1, 2, 5, 5)),
                                            np.random.default_rng(1).standard_normal((3, 2, 3, 3))],
                                 attrs={"padding": 1})
print(rep)
