"""From checkpoint to images to expert-usage tables.

Trains the tiny preset briefly, samples a few images with the Heun
solver under guidance, writes them as PPM files, and aggregates the
routing traces recorded along the trajectory into the two usage views.
Run: python3 demos/06_sample_and_analyze.py  (about a minute)
"""

import tempfile
from pathlib import Path

import numpy as np

from ditmoe.analytics import analyze_usage, trace_table, write_report, write_traces
from ditmoe.config import load_preset
from ditmoe.flow import SamplerConfig, sample
from ditmoe.model import DiTMoE
from ditmoe.cli import write_ppm
from ditmoe.training import apply_ema, run_training

work = Path(tempfile.mkdtemp(prefix="demo_sample_"))

cf = load_preset("dsmoe-tiny")
cf.train.update(steps=40, batch_size=8)
run = run_training(cf, work / "train")
model = run["model"]
apply_ema(model, run["ema"].state())  # evaluation uses the EMA shadow

sampler = SamplerConfig(solver="heun", steps=12, cfg_scale=2.0,
                        cfg_interval=(0.1, 1.0))
labels = np.array([0, 3, 7, 7])
collector = []
images = sample(model, labels, sampler, np.random.default_rng(5),
                collector=collector)
print(f"sampled {images.shape} in [{images.min():.2f}, {images.max():.2f}]")

for i, image in enumerate(images):
    write_ppm(np.clip(image, -1, 1), work / f"sample_{i}.ppm")
print(f"PPM files under {work}")

# Every MoE layer of every solver step left a trace; flatten and save.
table = trace_table(collector)
write_traces(table, work / "traces.csv")
print(f"{table.rows} trace rows across layers {sorted(set(table.layer))}")

report = analyze_usage(table)
print("\ndistinct experts per image (rows: MoE layer, cols: class):")
print("  classes:", report.classes)
for layer, row in zip(report.layers, report.per_class):
    print(f"  layer {layer}: {np.round(row, 2)}")

print("\nper-token activation frequency (each row sums to "
      f"{report.k} = active experts per token):")
for layer, row in zip(report.layers, report.per_expert):
    print(f"  layer {layer}: {np.round(row, 3)}")
if report.flags:
    print("flags:", "; ".join(report.flags))

a_path, b_path = write_report(report, work / "analysis")
print(f"\nCSV reports: {a_path.name}, {b_path.name}")
