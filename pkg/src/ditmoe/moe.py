"""Sparse expert feed-forward with bias-nudged routing.

A token visits every shared expert plus the top-k routed experts ranked
by sigmoid affinity.  Two rules keep this trainable without an auxiliary
balance loss:

* selection ranks `affinity + bias`, where the bias is a non-trainable
  per-expert nudge updated between batches by `update_bias`;
* gate values are normalized from the raw affinities of the selected
  experts only.  The bias can change *which* experts fire but never how
  much they are mixed in, and gradients reach the router solely through
  the gates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ditmoe import tensor as T
from ditmoe.tensor import ShapeError, Tensor, trunc_normal

__all__ = [
    "MoEConfig",
    "ExpertWeights",
    "Router",
    "RoutingTrace",
    "affinity",
    "select_topk",
    "gate_values",
    "expert_forward",
    "moe_forward",
    "update_bias",
]


@dataclass(frozen=True)
class MoEConfig:
    n_shared: int
    n_routed: int
    n_active: int

    def __post_init__(self):
        if self.n_shared < 0:
            raise ValueError(f"n_shared must be >= 0, got {self.n_shared}")
        if not 1 <= self.n_active <= self.n_routed:
            raise ValueError(
                f"n_active must be in [1, n_routed={self.n_routed}], got {self.n_active}")


class ExpertWeights:
    """One gated FFN expert: down(silu(x @ gate) * (x @ up))."""

    def __init__(self, gate: Tensor, up: Tensor, down: Tensor):
        if gate.shape != up.shape or down.shape != (gate.shape[1], gate.shape[0]):
            raise ShapeError(
                f"inconsistent expert shapes: gate {gate.shape}, up {up.shape}, "
                f"down {down.shape}")
        self.gate = gate
        self.up = up
        self.down = down

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, intermediate: int,
             std: float = 0.02) -> "ExpertWeights":
        return cls(
            Tensor(trunc_normal(rng, (hidden, intermediate), std), requires_grad=True),
            Tensor(trunc_normal(rng, (hidden, intermediate), std), requires_grad=True),
            Tensor(trunc_normal(rng, (intermediate, hidden), std), requires_grad=True),
        )

    def tensors(self):
        return [self.gate, self.up, self.down]


@dataclass
class Router:
    """Learnable expert centroids plus the routing-only balance state.

    `bias` and `load` are plain arrays: the bias is explicitly excluded
    from gradient descent and the load counter just tallies how many
    tokens each expert received in the current window."""

    centroids: Tensor
    update_rate: float = 0.01
    bias: np.ndarray = field(default=None)
    load: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.centroids.shape[0]
        if self.bias is None:
            self.bias = np.zeros(n)
        if self.load is None:
            self.load = np.zeros(n)

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, n_routed: int,
             update_rate: float = 0.01, std: float = 0.02) -> "Router":
        centroids = Tensor(trunc_normal(rng, (n_routed, hidden), std), requires_grad=True)
        return cls(centroids=centroids, update_rate=update_rate)


@dataclass
class RoutingTrace:
    """Which routed experts fired for each token of one layer forward."""

    selected: np.ndarray            # (tokens, n_active) expert ids
    layer: int = -1
    step: int = -1
    n_routed: int = 0
    tokens_per_item: int = 0        # tokens per image when batched
    classes: np.ndarray | None = None    # (batch,) labels
    timesteps: np.ndarray | None = None  # (batch,) diffusion times


def affinity(u: Tensor, router: Router) -> Tensor:
    """Sigmoid token-to-expert scores: (N, D) -> (N, n_routed) in (0, 1).
    A single (D,) token comes back as (n_routed,)."""
    single = u.ndim == 1
    if single:
        u = T.reshape(u, (1, u.shape[0]))
    if u.shape[-1] != router.centroids.shape[1]:
        raise ShapeError(
            f"token width {u.shape[-1]} != centroid width {router.centroids.shape[1]}")
    scores = T.sigmoid(T.matmul(u, T.transpose(router.centroids)))
    return T.reshape(scores, (scores.shape[1],)) if single else scores


def select_topk(scores, bias: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest `scores + bias`, best first; exact ties
    resolve to the lowest expert index.  Pure index computation: accepts
    a Tensor or array and returns a plain int array."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    nudged = s + bias
    if not 1 <= k <= nudged.shape[-1]:
        raise ValueError(f"k={k} outside [1, {nudged.shape[-1]}]")
    return np.argsort(-nudged, axis=-1, kind="stable")[..., :k]


def gate_values(scores: Tensor, selected: np.ndarray) -> Tensor:
    """Mixing weights for the selected experts, normalized from the raw
    scores so they sum to one per token.  The routing bias never enters
    here by construction."""
    sel = np.asarray(selected, dtype=np.int64)
    if scores.ndim == 1:
        picked = T.index_select(scores, sel, axis=0)
        total = T.tensor_sum(picked, axis=0, keepdims=True)
        return T.div(picked, T.expand(total, 0, sel.shape[0]))
    n, k = sel.shape
    rows = np.arange(n)[:, None]
    picked = T.take(scores, rows * scores.shape[-1] + sel)
    total = T.tensor_sum(picked, axis=-1, keepdims=True)
    return T.div(picked, T.expand(total, 1, k))


def expert_forward(u: Tensor, w: ExpertWeights) -> Tensor:
    """Gated-SiLU FFN; works for (N, D) or any batched (..., D) input."""
    single = u.ndim == 1
    if single:
        u = T.reshape(u, (1, u.shape[0]))
    act = T.mul(T.silu(T.matmul(u, w.gate)), T.matmul(u, w.up))
    out = T.matmul(act, w.down)
    return T.reshape(out, (out.shape[-1],)) if single else out


def moe_forward(u: Tensor, shared: list, routed: list, router: Router,
                config: MoEConfig, residual: bool = True):
    """Mix shared and top-k routed experts for a batch of tokens.

    Returns (output, selected) where selected is the (N, n_active) index
    array that also feeds the layer's load counter.  `residual=False`
    yields just the expert mix, for callers that add their own skip."""
    if u.ndim != 2:
        raise ShapeError(f"moe_forward expects (tokens, hidden), got {u.shape}")
    if len(routed) != config.n_routed or len(shared) != config.n_shared:
        raise ValueError(
            f"got {len(shared)} shared / {len(routed)} routed experts for "
            f"config {config.n_shared}+{config.n_routed}")
    n, d = u.shape
    scores = affinity(u, router)
    selected = select_topk(scores, router.bias, config.n_active)
    gates = gate_values(scores, selected)

    out = u if residual else None
    for w in shared:
        term = expert_forward(u, w)
        out = term if out is None else T.add(out, term)

    acc = Tensor(np.zeros((n, d)))
    for e in range(config.n_routed):
        tok, slot = np.nonzero(selected == e)
        if tok.size == 0:
            continue
        u_e = T.index_select(u, tok, axis=0)
        g_e = T.reshape(T.take(gates, tok * config.n_active + slot), (tok.size, 1))
        g_e = T.expand(g_e, 1, d)
        acc = T.scatter_add(acc, tok, T.mul(expert_forward(u_e, routed[e]), g_e))
    out = acc if out is None else T.add(out, acc)

    router.load = router.load + np.bincount(selected.reshape(-1),
                                            minlength=config.n_routed)
    return out, selected


def update_bias(router: Router):
    """End-of-window balance step: nudge each expert's routing bias one
    `update_rate` toward the mean load (overloaded down, underloaded up),
    then reset the counter.  Gate values are untouched by design."""
    load = router.load
    router.bias = router.bias + router.update_rate * np.sign(load.mean() - load)
    router.load = np.zeros_like(load)
