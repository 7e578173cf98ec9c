#!/usr/bin/env python3
# Build the segmentation network and print its layer table.
#
# The default configuration (block counts 3/4/23/3, base width 64, 6 classes)
# has 51,941,446 trainable parameters. Reduced variants are handy on a laptop.

import numpy as np

from microct_seg import ModelSpec, build_fcn, summarize

# full-scale network, 6 leaf-tissue classes, at the scan slice size 1000x500
spec = ModelSpec(num_classes=6)
model = build_fcn(spec, np.random.default_rng(0))
table = summarize(model, 1000, 500)
print(table.render())

print()
print("same architecture, desk-scale variant:")
tiny = ModelSpec(num_classes=3, block_counts=(1, 1, 1, 1), base_width=16)
tiny_model = build_fcn(tiny, np.random.default_rng(0))
print(summarize(tiny_model, 64, 64).render())
