# %% Reverse-mode differentiation on a tape, checked against central differences.
import numpy as np

from cetn import autodiff as ad

rng = np.random.default_rng(0)

# %% a two-layer network by hand
t = ad.Tape()
x = t.constant(rng.normal(size=(5, 3)))
w1 = t.var(rng.normal(size=(3, 4)))
w2 = t.var(rng.normal(size=(4, 1)))
h = ad.leaky_relu(ad.matmul(x, w1))
y = ad.sum(ad.tanh(ad.matmul(h, w2)))
ad.backward(t, y)
print("loss", float(y.value))
print("dL/dw2", w2.grad.ravel())

# %% the same graph through grad_check
def loss(tape, v):
    xc = tape.constant(x.value)
    return ad.sum(ad.tanh(ad.matmul(ad.leaky_relu(ad.matmul(xc, v["w1"])), v["w2"])))

rep = ad.grad_check(loss, {"w1": w1.value.copy(), "w2": w2.value.copy()})
print("grad_check passed:", rep.passed, "max rel err %.2e" % rep.max_error)

# %% the fused dense op equals matmul + bias + activation
b = t.var(np.zeros(4))
fused = ad.dense(x, w1, b, "tanh").value
plain = np.tanh(x.value @ w1.value)
print("dense vs unfused max gap", np.abs(fused - plain).max())

# %% round-off floor used when judging tiny gradient entries
print("floor for f~1, eps=1e-6, tol=1e-4: %.2e" % ad.roundoff_floor(1.0, 1e-6, 1e-4))
