"""Rotary position tables and multi-head attention.

Pairing convention: dimension i rotates with dimension i + head_dim//2
(half-split pairing), so pair j consists of dims (j, j + head_dim//2).

In 2-d mode pairs alternate between axes: even pair indices take a phase
of row * omega, odd pairs col * omega, where omega walks a geometric
frequency ladder of head_dim//4 rungs per axis.  In 1-d mode the phase
is flat_index * omega over head_dim//2 rungs.  Either way the attention
logit between two tokens depends only on their coordinate difference,
which is what the tests pin down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ditmoe import tensor as T
from ditmoe.tensor import ShapeError, Tensor

PE_MODES = ("ape", "rope1d", "rope2d")


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int
    n_kv_heads: int
    head_dim: int
    pe_mode: str = "rope2d"

    def __post_init__(self):
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")
        if self.n_kv_heads < 1 or self.n_kv_heads > self.n_heads:
            raise ValueError(f"n_kv_heads {self.n_kv_heads} outside [1, {self.n_heads}]")
        if self.n_heads % self.n_kv_heads:
            raise ValueError(
                f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")

    @property
    def uses_rope(self) -> bool:
        return self.pe_mode in ("rope1d", "rope2d")


@dataclass(frozen=True)
class RotaryTable:
    """Precomputed cos/sin phases, one row per flat grid position."""

    mode: str
    grid_h: int
    grid_w: int
    head_dim: int
    base: float
    cos: np.ndarray = field(repr=False)  # (grid_h*grid_w, head_dim//2)
    sin: np.ndarray = field(repr=False)

    @property
    def n_positions(self) -> int:
        return self.grid_h * self.grid_w

    def lookup(self, positions: np.ndarray):
        pos = np.asarray(positions, dtype=np.int64)
        if pos.ndim != 1:
            raise ShapeError(f"positions must be 1-d, got shape {pos.shape}")
        if pos.size and (pos.min() < 0 or pos.max() >= self.n_positions):
            raise ValueError(
                f"position out of range for {self.grid_h}x{self.grid_w} grid")
        return self.cos[pos], self.sin[pos]


def build_rotary_table(grid_h: int, grid_w: int, head_dim: int,
                       base: float = 10000.0, mode: str = "rope2d") -> RotaryTable:
    if mode not in ("rope1d", "rope2d"):
        raise ValueError(f"rotary mode must be rope1d or rope2d, got {mode!r}")
    if mode == "rope2d" and head_dim % 4:
        raise ValueError(f"2-d rotary needs head_dim divisible by 4, got {head_dim}")
    if mode == "rope1d" and head_dim % 2:
        raise ValueError(f"1-d rotary needs head_dim divisible by 2, got {head_dim}")

    pair = np.arange(head_dim // 2)
    flat = np.arange(grid_h * grid_w)
    if mode == "rope2d":
        ladder = base ** (-(pair // 2) / (head_dim // 4))
        rows, cols = np.divmod(flat, grid_w)
        coord = np.where(pair % 2 == 0, rows[:, None], cols[:, None])
        angles = coord * ladder
    else:
        ladder = base ** (-pair / (head_dim // 2))
        angles = flat[:, None] * ladder
    return RotaryTable(mode=mode, grid_h=grid_h, grid_w=grid_w, head_dim=head_dim,
                       base=base, cos=np.cos(angles), sin=np.sin(angles))


def apply_rope(x: Tensor, table: RotaryTable, positions) -> Tensor:
    """Rotate the pairs of `x` (..., T, H, head_dim) by the phases of the
    given flat grid positions (row-major, length T)."""
    if x.ndim < 3:
        raise ShapeError(f"apply_rope expects (..., T, H, head_dim), got {x.shape}")
    hd = x.shape[-1]
    if hd != table.head_dim:
        raise ShapeError(f"head_dim {hd} does not match table head_dim {table.head_dim}")
    t, n_heads = x.shape[-3], x.shape[-2]
    cos, sin = table.lookup(positions)
    if cos.shape[0] != t:
        raise ShapeError(f"{cos.shape[0]} positions for {t} tokens")
    cos = Tensor(np.repeat(cos[:, None, :], n_heads, axis=1))
    sin = Tensor(np.repeat(sin[:, None, :], n_heads, axis=1))

    half = hd // 2
    x1 = T.index_select(x, np.arange(half), axis=-1)
    x2 = T.index_select(x, np.arange(half, hd), axis=-1)
    out1 = T.sub(T.mul(x1, cos), T.mul(x2, sin))
    out2 = T.add(T.mul(x1, sin), T.mul(x2, cos))
    return T.concat([out1, out2], axis=-1)


def _heads_major(x: Tensor) -> Tensor:
    # (..., T, H, hd) -> (..., H, T, hd)
    n = x.ndim
    perm = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return T.transpose(x, perm)


def attention(q: Tensor, k: Tensor, v: Tensor, config: AttentionConfig,
              table: RotaryTable | None = None, positions=None) -> Tensor:
    """Scaled dot-product attention over (..., T, heads, head_dim).

    k and v carry config.n_kv_heads heads; when fewer than n_heads,
    contiguous groups of query heads share one kv head.  Rotary modes
    rotate q and k before the logits; positions default to the table's
    full grid in row-major order.
    """
    for name, t_, heads in (("q", q, config.n_heads), ("k", k, config.n_kv_heads),
                            ("v", v, config.n_kv_heads)):
        if t_.ndim < 3 or t_.shape[-1] != config.head_dim or t_.shape[-2] != heads:
            raise ShapeError(
                f"{name} must be (..., T, {heads}, {config.head_dim}), got {t_.shape}")
    if not (q.shape[-3] == k.shape[-3] == v.shape[-3]):
        raise ShapeError(f"token counts disagree: {q.shape} / {k.shape} / {v.shape}")

    if config.uses_rope:
        if table is None:
            raise ValueError(f"pe_mode {config.pe_mode!r} needs a rotary table")
        if table.mode != config.pe_mode:
            raise ValueError(f"table mode {table.mode!r} != pe_mode {config.pe_mode!r}")
        if positions is None:
            if q.shape[-3] != table.n_positions:
                raise ShapeError(
                    f"{q.shape[-3]} tokens need explicit positions for a "
                    f"{table.n_positions}-position table")
            positions = np.arange(table.n_positions)
        q = apply_rope(q, table, positions)
        k = apply_rope(k, table, positions)
    elif table is not None:
        raise ValueError("rotary table passed but pe_mode is 'ape'")

    q = _heads_major(q)
    k = _heads_major(k)
    v = _heads_major(v)
    if config.n_kv_heads != config.n_heads:
        group = config.n_heads // config.n_kv_heads
        head_map = np.repeat(np.arange(config.n_kv_heads), group)
        k = T.index_select(k, head_map, axis=k.ndim - 3)
        v = T.index_select(v, head_map, axis=v.ndim - 3)

    n = k.ndim
    k_t = T.transpose(k, tuple(range(n - 2)) + (n - 1, n - 2))
    scores = T.scale(T.matmul(q, k_t), 1.0 / np.sqrt(config.head_dim))
    out = T.matmul(T.softmax_rows(scores), v)
    return _heads_major(out)  # the swap is its own inverse
