"""Per-class binary slice prediction, 3-D stacking, and morphology stats.

Model outputs are reduced to one binary image per class per slice (255 on
the argmax region, 0 elsewhere); ordered slices stack into a raw voxel
volume with a one-line text header so any downstream tool can read it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import ClassMap, GrayImage, LabelMask, downscale_image, read_pgm, to_model_input, write_pgm
from .errors import DataError

__all__ = [
    "BinarySlice",
    "Volume",
    "predict_labels",
    "predict_slices",
    "stack",
    "slice_stats",
    "StatsRow",
    "write_rawvol",
    "read_rawvol",
    "save_slices",
    "load_slices",
    "slice_filename",
    "write_stats_csv",
]


@dataclass
class BinarySlice:
    """One class's binary map for one slice; values strictly 0 or 255."""

    class_index: int
    bits: np.ndarray
    slice_order: int

    def __post_init__(self):
        arr = np.asarray(self.bits, dtype=np.uint8)
        if arr.ndim != 2:
            raise ValueError(f"expected 2-D slice, got shape {arr.shape}")
        if not np.isin(np.unique(arr), (0, 255)).all():
            raise ValueError("binary slice contains values other than 0/255")
        if self.slice_order < 0:
            raise ValueError("slice_order must be non-negative")
        self.bits = arr

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int((self.bits == 255).sum())


@dataclass
class Volume:
    """Stacked binary slices; ``voxels`` is (depth, height, width) uint8."""

    class_index: int
    class_name: str
    voxels: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h, w = self.voxels.shape
        return (w, h, d)

    @property
    def voxel_count(self) -> int:
        return int((self.voxels == 255).sum())


def predict_labels(model, image: GrayImage, scale: float = 1.0) -> LabelMask:
    """Eval-mode forward pass and channel argmax (first class wins ties)."""
    if model.mode != "eval":
        model.eval()
    img = downscale_image(image, scale) if scale != 1.0 else image
    with ad.no_grad():
        logits = model.forward(to_model_input(img))
    return LabelMask(np.argmax(logits.data[0], axis=0))


def predict_slices(model, images: list[GrayImage], cmap: ClassMap,
                   scale: float = 1.0, jobs: int = 1) -> dict[int, list[BinarySlice]]:
    """Segment an ordered slice list into per-class binary slices.

    The 255-regions of the per-class slices partition each slice. Slices are
    processed in parallel when ``jobs`` > 1; output order is by list index.
    """
    if not images:
        raise DataError("no slices to predict")
    first = (images[0].height, images[0].width)
    for i, img in enumerate(images):
        if (img.height, img.width) != first:
            raise DataError(f"slice {i} is {img.width}x{img.height}, "
                            f"expected {first[1]}x{first[0]}")
    model.eval()

    def one(idx_img):
        idx, img = idx_img
        labels = predict_labels(model, img, scale).labels
        return idx, labels

    with ad.no_grad():
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(one, enumerate(images)))
        else:
            results = [one(pair) for pair in enumerate(images)]

    per_class: dict[int, list[BinarySlice]] = {c: [] for c in range(cmap.num_classes)}
    for idx, labels in sorted(results):
        for c in range(cmap.num_classes):
            bits = np.where(labels == c, 255, 0).astype(np.uint8)
            per_class[c].append(BinarySlice(c, bits, idx))
    return per_class


def stack(slices: list[BinarySlice], class_name: str) -> tuple[Volume, str]:
    """Order one class's slices by ``slice_order`` into a volume, plus a
    plain-text manifest (class, dims, slice ids)."""
    if not slices:
        raise DataError("cannot stack zero slices")
    orders = [s.slice_order for s in slices]
    if len(set(orders)) != len(orders):
        dup = next(o for o in orders if orders.count(o) > 1)
        raise DataError(f"duplicate slice_order {dup}")
    hw = (slices[0].height, slices[0].width)
    cls = slices[0].class_index
    for s in slices:
        if (s.height, s.width) != hw:
            raise DataError(f"slice {s.slice_order} is {s.width}x{s.height}, "
                            f"expected {hw[1]}x{hw[0]}")
        if s.class_index != cls:
            raise DataError("stack received slices from different classes")
    ordered = sorted(slices, key=lambda s: s.slice_order)
    voxels = np.stack([s.bits for s in ordered], axis=0)
    vol = Volume(cls, class_name, voxels)
    w, h, d = vol.dims
    lines = [f"class: {class_name}",
             f"class_index: {cls}",
             f"dims: {w} {h} {d}",
             "slices: " + " ".join(str(s.slice_order) for s in ordered)]
    return vol, "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Morphology
# ---------------------------------------------------------------------------

def perimeter_px(bits: np.ndarray) -> int:
    """4-connected perimeter: foreground sides facing background or the
    image border."""
    fg = bits == 255
    padded = np.pad(fg, 1, constant_values=False)
    total = 0
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        neighbor = padded[1 + dy:1 + dy + fg.shape[0], 1 + dx:1 + dx + fg.shape[1]]
        total += int((fg & ~neighbor).sum())
    return total


@dataclass
class StatsRow:
    slice: str
    class_index: int
    class_name: str
    area_px: int
    perimeter_px: int
    area_physical: float | None
    unit: str


def slice_stats(per_class: dict[int, list[BinarySlice]], cmap: ClassMap,
                pixel_size: float | None = None, unit: str = "px") -> list[StatsRow]:
    """Area and 4-connected perimeter per slice per class, with physical
    area when a pixel size is given; per-class totals appended."""
    rows: list[StatsRow] = []
    factor = pixel_size * pixel_size if pixel_size is not None else None
    for c in sorted(per_class):
        name = cmap.name_of(c)
        total_area = 0
        total_perim = 0
        for s in sorted(per_class[c], key=lambda s: s.slice_order):
            area = s.area
            perim = perimeter_px(s.bits)
            total_area += area
            total_perim += perim
            rows.append(StatsRow(str(s.slice_order), c, name, area, perim,
                                 area * factor if factor is not None else None, unit))
        rows.append(StatsRow("TOTAL", c, name, total_area, total_perim,
                             total_area * factor if factor is not None else None, unit))
    return rows


def write_stats_csv(rows: list[StatsRow], path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "class_index", "class_name", "area_px",
                    "perimeter_px", "area_physical", "unit"])
        for r in rows:
            w.writerow([r.slice, r.class_index, r.class_name, r.area_px,
                        r.perimeter_px,
                        "" if r.area_physical is None else repr(r.area_physical),
                        r.unit])


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------

def write_rawvol(vol: Volume, path) -> None:
    """``RAWVOL1 <w> <h> <d> <class_name>\\n`` then w*h*d bytes, slice-major."""
    w, h, d = vol.dims
    header = f"RAWVOL1 {w} {h} {d} {vol.class_name}\n".encode("utf-8")
    Path(path).write_bytes(header + vol.voxels.tobytes())


def read_rawvol(path) -> Volume:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing RAWVOL1 header line")
    parts = data[:nl].decode("utf-8").split(" ", 4)
    if len(parts) != 5 or parts[0] != "RAWVOL1":
        raise DataError(f"{path}: bad RAWVOL1 header {data[:nl]!r}")
    try:
        w, h, d = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise DataError(f"{path}: bad RAWVOL1 dims") from exc
    payload = data[nl + 1:]
    if len(payload) != w * h * d:
        raise DataError(f"{path}: truncated volume ({len(payload)} of {w * h * d} bytes)")
    voxels = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w).copy()
    return Volume(class_index=-1, class_name=parts[4], voxels=voxels)


def slice_filename(class_name: str, order: int) -> str:
    return f"{class_name}_{order:05d}.pgm"


def save_slices(slices: list[BinarySlice], class_name: str, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in sorted(slices, key=lambda s: s.slice_order):
        p = out / slice_filename(class_name, s.slice_order)
        write_pgm(GrayImage(s.bits), p)
        paths.append(p)
    return paths


def load_slices(directory, class_name: str, class_index: int = 0) -> list[BinarySlice]:
    """Read back ``<class_name>_<order>.pgm`` slices from a directory."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    prefix = class_name + "_"
    slices = []
    for p in sorted(d.glob(f"{class_name}_*.pgm")):
        stem = p.stem
        try:
            order = int(stem[len(prefix):])
        except ValueError:
            continue
        slices.append(BinarySlice(class_index, read_pgm(p).pixels, order))
    if not slices:
        raise DataError(f"no slices named {class_name}_*.pgm in {d}")
    return slices
