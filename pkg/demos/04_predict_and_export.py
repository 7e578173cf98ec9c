#!/usr/bin/env python3
# Use the weights from demo 03: segment the slice stack, export per-class
# binary slices, stack them into raw volumes, and read out morphology.
#
# Run demos/03_train_synthetic.py first.

from pathlib import Path

from microct_seg import ClassMap, load_weights
from microct_seg.data import list_image_files, load_gray
from microct_seg.volume import (predict_slices, save_slices, slice_stats, stack,
                                write_rawvol, write_stats_csv)

OUT = Path(__file__).parent / "output"
weights = OUT / "run" / "best.fcnw"
if not weights.is_file():
    raise SystemExit("run demos/03_train_synthetic.py first")

cmap = ClassMap.from_file(OUT / "classes.txt")
model = load_weights(weights)
images = [load_gray(p) for p in list_image_files(OUT / "images")]

# one binary slice per class per input slice; 255-regions partition each slice
per_class = predict_slices(model, images, cmap)
pred_dir = OUT / "predicted"
for c, slices in per_class.items():
    save_slices(slices, cmap.name_of(c), pred_dir)
print(f"wrote {len(images)} slices x {cmap.num_classes} classes to {pred_dir}")

# stack each class into a 3-D volume any downstream tool can read
for c, slices in per_class.items():
    name = cmap.name_of(c)
    vol, manifest = stack(slices, name)
    write_rawvol(vol, OUT / f"{name}.rawvol")
    (OUT / f"{name}.rawvol.manifest").write_text(manifest)
    w, h, d = vol.dims
    print(f"{name}: volume {w}x{h}x{d}, {vol.voxel_count} voxels set")

# area and 4-connected perimeter per slice, in physical units (650 nm pixels)
rows = slice_stats(per_class, cmap, pixel_size=0.65, unit="um")
write_stats_csv(rows, OUT / "morphology.csv")
totals = [r for r in rows if r.slice == "TOTAL"]
print("\nper-class totals (area in um^2):")
for r in totals:
    print(f"  {r.class_name:10s} area_px={r.area_px:6d} perimeter_px={r.perimeter_px:6d} "
          f"area={r.area_physical:10.2f} {r.unit}^2")
print(f"\nfull table in {OUT / 'morphology.csv'}")
