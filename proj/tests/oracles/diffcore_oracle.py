#!/usr/bin/env python3
"""Reference values for the kernel tests, computed with numpy at float64.

Run and paste the printed constants into tests/test_diffcore.cpp. Kept as a
script so the frozen numbers stay auditable.
"""
import numpy as np

np.set_printoptions(precision=17)


def p17(tag, x):
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64)).ravel()
    print(f"{tag}: " + ", ".join(f"{v:.17g}" for v in arr))


# softmax / log_softmax on one fixed row
x = np.array([1.0, 2.0, 3.0])
e = np.exp(x - x.max())
sm = e / e.sum()
p17("softmax([1,2,3])", sm)
p17("log_softmax([1,2,3])", x - x.max() - np.log(e.sum()))

# layer_norm, one row, affine params
xr = np.array([0.5, -1.0, 2.0, 0.25])
gamma = np.array([1.0, 0.5, 2.0, 1.0])
beta = np.array([0.0, 0.1, -0.2, 0.3])
eps = 1e-5
mu = xr.mean()
var = xr.var()
xhat = (xr - mu) / np.sqrt(var + eps)
p17("layer_norm", gamma * xhat + beta)

# binary cross entropy, mean over 2 entries
p = np.array([0.9, 0.2])
y = np.array([1.0, 0.0])
p17("bce", -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))

# adamw: 100 steps on f(w) = 0.5*(w-a)^T diag(c) (w-a); argmin = a.
# lr picked so constant-step Adam settles below 1e-3 from this start
# (larger rates leave a limit cycle around 3e-3).
a = np.array([0.3, -0.2])
c = np.array([1.0, 4.0])
w = np.array([0.5, 0.0])
m = np.zeros(2)
v = np.zeros(2)
lr, b1, b2, adam_eps = 0.008, 0.9, 0.999, 1e-8
for t in range(1, 101):
    g = c * (w - a)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**t)
    vh = v / (1 - b2**t)
    w = w - lr * (mh / (np.sqrt(vh) + adam_eps))
p17("adamw_100_w", w)
p17("adamw_100_dist", np.linalg.norm(w - a))
