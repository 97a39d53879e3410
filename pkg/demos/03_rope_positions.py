"""What the rotary tables contain and why 2D RoPE is translation-proof.

A position's phase vector rotates query/key dimension pairs; in 2d mode
even pairs carry the row index and odd pairs the column index, each on
its own frequency ladder.  Attention logits then depend only on position
differences.  Run: python3 demos/03_rope_positions.py
"""

import numpy as np

from ditmoe.rope import apply_rope, build_rotary_table
from ditmoe.tensor import Tensor

head_dim, side = 8, 16
table = build_rotary_table(side, side, head_dim, base=100.0, mode="rope2d")

# Phases at grid position (2, 3): pairs alternate row/col, the ladder
# decays by base**(-1/(head_dim//4)) per axis step.
flat = 2 * side + 3
print("cos phases at (row=2, col=3):", np.round(table.cos[flat], 4))
print("expected angles             :", np.round(np.cos([2, 3, 0.2, 0.3]), 4))

# Rotation preserves norms: it only redistributes phase.
rng = np.random.default_rng(2)
q = rng.normal(size=(4, 1, head_dim))
positions = np.array([0, 3, 48, 51])
rotated = apply_rope(Tensor(q), table, positions).data
print("norm before:", np.round(np.linalg.norm(q, axis=-1).ravel(), 4))
print("norm after :", np.round(np.linalg.norm(rotated, axis=-1).ravel(), 4))


def logits(qf, kf, pos):
    qr = apply_rope(Tensor(qf), table, pos).data
    kr = apply_rope(Tensor(kf), table, pos).data
    return np.einsum("tha,sha->hts", qr, kr)


# Slide a 5x5 patch grid around the table: logits do not move.
rr, cc = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
qf = rng.normal(size=(25, 1, head_dim))
kf = rng.normal(size=(25, 1, head_dim))
base = logits(qf, kf, (rr * side + cc).reshape(-1))
for dr, dc in [(0, 1), (4, 7), (11, 11)]:
    moved = logits(qf, kf, ((rr + dr) * side + (cc + dc)).reshape(-1))
    print(f"translation ({dr:2d},{dc:2d}): max logit shift "
          f"{np.abs(moved - base).max():.2e}")

# 1d mode keys the ladder to the flattened index instead; a row step is
# then a jump of `side`, so the same translation is NOT invariant
# against reshuffled rows, which is exactly what the 2d mode fixes.
table1d = build_rotary_table(side, side, head_dim, base=100.0, mode="rope1d")


def logits1d(pos):
    qr = apply_rope(Tensor(qf), table1d, pos).data
    kr = apply_rope(Tensor(kf), table1d, pos).data
    return np.einsum("tha,sha->hts", qr, kr)


pos_a = (rr * side + cc).reshape(-1)
pos_b = ((rr + 1) * side + cc).reshape(-1)
print(f"rope1d, same shift by one row: max logit shift "
      f"{np.abs(logits1d(pos_b) - logits1d(pos_a)).max():.2e} "
      f"(still relative, but on the flat index)")
