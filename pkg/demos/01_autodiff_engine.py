"""Tour of the float64 reverse-mode tensor engine everything else sits on.

The engine records a dynamic graph as ops execute; `backward` walks it
once in reverse topological order, accumulates gradients on the leaves,
and frees the tape.  Run: python3 demos/01_autodiff_engine.py
"""

import numpy as np

from ditmoe import tensor as T
from ditmoe.tensor import Tensor, backward, find_first_nonfinite, no_grad

rng = np.random.default_rng(0)

# A small expression: y = mean(silu(x @ W) * x)
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="x")
W = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="W")
y = T.tensor_mean(T.mul(T.silu(T.matmul(x, W)), x))
print(f"loss = {y.data:.6f}")

backward(y)
print(f"dL/dW norm = {np.linalg.norm(W.grad):.6f}")

# Check one coordinate against a central finite difference.
h = 1e-6
keep = W.data[1, 2]
W.data[1, 2] = keep + h
up = T.tensor_mean(T.mul(T.silu(T.matmul(x, W)), x)).data
W.data[1, 2] = keep - h
dn = T.tensor_mean(T.mul(T.silu(T.matmul(x, W)), x)).data
W.data[1, 2] = keep
print(f"analytic {W.grad[1, 2]:+.8f} vs numeric {(up - dn) / (2 * h):+.8f}")

# no_grad computation records nothing, so it costs no tape memory.
with no_grad():
    silent = T.matmul(x, W)
print(f"inside no_grad, result requires_grad = {silent.requires_grad}")

# Broadcasting is suffix-only and explicit: a (3,) bias spreads over rows.
b = Tensor(np.ones(3), requires_grad=True, name="b")
z = T.tensor_sum(T.add(x, b))
backward(z)
print(f"bias grad (one per column, counted over 4 rows) = {b.grad}")

# When a forward blows up, the graph can name the earliest bad tensor as
# long as it is inspected before backward frees the records.  The tape
# only exists where gradients are needed, hence requires_grad here.
bad = Tensor(np.array([1.0, 0.0]), requires_grad=True, name="denominator")
with np.errstate(divide="ignore", invalid="ignore"):
    blown = T.div(Tensor(np.ones(2)), bad)
    probe = T.tensor_sum(blown)
culprit = find_first_nonfinite(probe)
print(f"first non-finite tensor in the graph: shape {culprit.data.shape}, "
      f"values {culprit.data}")
