"""Sparse expert routing, step by step, then bias-only load balancing.

Routing is sigmoid affinity -> top-k on (affinity + bias) -> gates
normalized from the raw affinities of the winners.  The bias never
touches gate values; nudging it per window is the whole balancing
mechanism.  Run: python3 demos/02_routing_and_balancing.py
"""

import numpy as np

from ditmoe.moe import (MoEConfig, ExpertWeights, Router, affinity,
                        gate_values, moe_forward, select_topk, update_bias)
from ditmoe.tensor import Tensor

rng = np.random.default_rng(1)
dim, n_routed, k = 8, 6, 2

router = Router(centroids=Tensor(rng.normal(0, 0.4, (n_routed, dim)),
                                 requires_grad=True), update_rate=0.01)
token = Tensor(rng.normal(size=(1, dim)))

scores = affinity(token, router)
print("affinities:", np.round(scores.data[0], 3))
selected = select_topk(scores, router.bias, k)
print("selected experts:", selected[0])
gates = gate_values(scores, selected)
print("gates (sum to 1):", np.round(gates.data[0], 3), "->", gates.data.sum())

# The bias reroutes but never reweights: push expert 0 out of reach.
router.bias = router.bias.copy()
router.bias[selected[0, 0]] = -10.0
rerouted = select_topk(scores, router.bias, k)
print(f"after biasing expert {selected[0, 0]} away: {rerouted[0]}")
print("gates for the old selection are unchanged:",
      np.allclose(gate_values(scores, selected).data, gates.data))

# A full layer: shared experts always fire, routed ones by selection.
cfg = MoEConfig(n_shared=1, n_routed=n_routed, n_active=k)
shared = [ExpertWeights.init(rng, dim, 16)]
routed = [ExpertWeights.init(rng, dim, 16) for _ in range(n_routed)]
batch = Tensor(rng.normal(size=(32, dim)))
out, sel = moe_forward(batch, shared, routed, router, cfg)
print(f"layer output {out.shape}; window load = {router.load}")
router.load = np.zeros(n_routed)

# Balancing demo: a stream that worships centroid 0.
router.bias = np.zeros(n_routed)
lean = router.centroids.data[0] / np.linalg.norm(router.centroids.data[0])
print("\nwindow   load std   bias range")
stds = []
for window in range(120):
    chunk = Tensor(2.0 * lean + rng.standard_normal((256, dim)))
    picks = select_topk(affinity(chunk, router), router.bias, k)
    router.load = np.bincount(picks.reshape(-1), minlength=n_routed).astype(float)
    stds.append(router.load.std())
    if window % 20 == 0:
        print(f"{window:6d}   {stds[-1]:8.1f}   "
              f"[{router.bias.min():+.2f}, {router.bias.max():+.2f}]")
    update_bias(router)
early, late = np.mean(stds[:10]), np.mean(stds[-20:])
print(f"mean load std, first 10 windows {early:.1f} -> last 20 windows {late:.1f};"
      f" gate values stayed affinity-only throughout")
