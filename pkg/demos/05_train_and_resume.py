"""A short training run, interrupted and resumed without losing a bit.

Trains the tiny preset for 30 steps in two different ways: straight
through, and 15 steps + checkpoint + 15 more.  The loss sequences match
bitwise because the RNG state rides inside the checkpoint.
Run: python3 demos/05_train_and_resume.py  (about a minute)
"""

import shutil
import tempfile
from pathlib import Path

from ditmoe.config import load_preset
from ditmoe.training import run_training

work = Path(tempfile.mkdtemp(prefix="demo_train_"))
print(f"working under {work}")


def tiny(steps):
    cf = load_preset("dsmoe-tiny")
    cf.train.update(steps=steps, batch_size=8)
    return cf


straight = run_training(tiny(30), work / "straight")
print("\nstraight run, every fifth loss:")
for i in range(0, 30, 5):
    print(f"  step {i:2d}: {straight['losses'][i]:.6f}")

first_half = run_training(tiny(15), work / "resumed")
print(f"\ninterrupted at step 15; checkpoint: "
      f"{first_half['checkpoint'].stat().st_size:,} bytes")

second_half = run_training(tiny(30), work / "resumed",
                           resume=first_half["checkpoint"])
rejoined = first_half["losses"] + second_half["losses"]
print(f"resumed losses equal straight run bitwise: "
      f"{rejoined == straight['losses']}")

metrics = (work / "straight" / "metrics.csv").read_text().splitlines()
print(f"\nmetrics.csv header: {metrics[0]}")
print(f"last row          : {metrics[-1]}")

shutil.rmtree(work)
