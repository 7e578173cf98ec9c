#!/usr/bin/env python3
# The sweep harness: train replicate models per level (here: number of
# annotated scans used) and report per-class scores on held-out test pairs.
#
# This is the machinery behind the how-many-leaves / how-many-epochs
# questions; at desk scale the interesting output is the report format,
# not the scores.

from pathlib import Path

import numpy as np

from microct_seg import ClassEntry, ClassMap, ModelSpec, TrainConfig, sweep
from microct_seg.data import GrayImage, LabelMask, SamplePair

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

cmap = ClassMap([ClassEntry(0, 0, "background"), ClassEntry(255, 1, "pore")])


def synth(pid, seed, size=32):
    rng = np.random.default_rng(seed)
    labels = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.integers(8, size - 8, 2)
    labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= 36] = 1
    base = np.where(labels == 1, 200, 60).astype(np.float64)
    pixels = np.clip(base + rng.normal(0, 8, (size, size)), 0, 255).astype(np.uint8)
    return SamplePair(pid, GrayImage(pixels), LabelMask(labels))


# two pairs from each of three scans, plus a held-out test scan
groups = {f"scan{g}": [synth(f"scan{g}_s{i}", 10 * g + i) for i in range(2)]
          for g in range(3)}
test_pairs = [synth(f"test_s{i}", 90 + i) for i in range(2)]

spec = ModelSpec(num_classes=2, block_counts=(1, 1, 1, 1), base_width=8)
config = TrainConfig(epochs=8, seed=0)

report = sweep(groups, spec, config, test_pairs, cmap,
               axis="leaves", levels=[1, 2, 3], replicates=2)

report.to_csv(OUT / "sweep_final.csv")
report.to_csv(OUT / "sweep_best.csv", which="best")
report.summary_to_csv(OUT / "sweep_final_summary.csv")

print("level  class       mean_f1   95% CI")
for s in report.summary():
    if s.metric == "f1":
        print(f"{s.level:5d}  {s.class_name:10s} {s.mean:.4f}   "
              f"[{s.ci_low:.4f}, {s.ci_high:.4f}]")
print(f"\nfull reports in {OUT}/sweep_*.csv")
