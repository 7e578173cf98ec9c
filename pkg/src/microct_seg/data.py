"""Slice images, class maps, and mask preparation.

Ingests 8-bit grayscale slices (binary PGM or 8-bit grayscale PNG) and
grayscale-coded annotation masks, maps pixel values to class indices via a
user-supplied class map, composes training masks by overlaying a binary
air-space layer, rescales, and converts to model-ready tensors.

The class map is a plain text sidecar (``pixel_value class_index name`` per
line, ``#`` comments) because the exact gray values used by an annotation
set are a property of that dataset, not of this package.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor, interp_matrix
from .errors import DataError

__all__ = [
    "GrayImage",
    "LabelMask",
    "ClassEntry",
    "ClassMap",
    "SamplePair",
    "load_gray",
    "save_gray",
    "read_pgm",
    "write_pgm",
    "read_png",
    "write_png",
    "decode_mask",
    "encode_mask",
    "compose_three_layer_mask",
    "overlay_air_values",
    "downscale_image",
    "downscale_mask",
    "downscale_pair",
    "to_model_input",
    "to_onehot",
    "load_pairs",
    "list_image_files",
]


@dataclass
class GrayImage:
    """Single-channel 8-bit image; ``pixels`` is (height, width) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2:
            raise ValueError(f"expected 2-D pixel array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("pixel values outside [0, 255]")
            arr = arr.astype(np.uint8)
        self.pixels = arr

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class LabelMask:
    """Per-pixel class indices; ``labels`` is (height, width) int64."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ValueError(f"expected 2-D label array, got shape {arr.shape}")
        if arr.min(initial=0) < 0:
            raise ValueError("negative class index in mask")
        self.labels = arr.astype(np.int64)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class ClassEntry:
    pixel_value: int
    class_index: int
    class_name: str


class ClassMap:
    """Bidirectional pixel-value <-> class-index mapping.

    Indices must cover 0..C-1 without gaps, pixel values must be unique,
    and index 0 is the background class.
    """

    def __init__(self, entries: list[ClassEntry]):
        if not entries:
            raise DataError("class map has no entries")
        values = [e.pixel_value for e in entries]
        indices = sorted(e.class_index for e in entries)
        if len(set(values)) != len(values):
            raise DataError("class map has duplicate pixel values")
        if indices != list(range(len(entries))):
            raise DataError("class indices must cover 0..C-1 with no gaps")
        for e in entries:
            if not 0 <= e.pixel_value <= 255:
                raise DataError(f"pixel value {e.pixel_value} outside [0, 255]")
        self.entries = sorted(entries, key=lambda e: e.class_index)
        self._decode_lut = np.full(256, -1, dtype=np.int64)
        self._encode_lut = np.zeros(len(entries), dtype=np.uint8)
        for e in entries:
            self._decode_lut[e.pixel_value] = e.class_index
            self._encode_lut[e.class_index] = e.pixel_value

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    def name_of(self, class_index: int) -> str:
        return self.entries[class_index].class_name

    def names(self) -> list[str]:
        return [e.class_name for e in self.entries]

    def index_of_name(self, name: str) -> int:
        for e in self.entries:
            if e.class_name == name:
                return e.class_index
        raise DataError(f"class name {name!r} not in class map")

    @classmethod
    def from_file(cls, path) -> "ClassMap":
        entries = []
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read class map {path}: {exc}") from exc
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(None, 2)
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'pixel_value class_index name'")
            try:
                entries.append(ClassEntry(int(parts[0]), int(parts[1]), parts[2].strip()))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
        return cls(entries)

    def to_file(self, path) -> None:
        lines = ["# pixel_value class_index class_name"]
        for e in self.entries:
            lines.append(f"{e.pixel_value} {e.class_index} {e.class_name}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class SamplePair:
    """An image with its annotation mask; dimensions must agree."""

    id: str
    image: GrayImage
    mask: LabelMask

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width):
            raise DataError(
                f"sample {self.id!r}: image {self.image.width}x{self.image.height} "
                f"does not match mask {self.mask.width}x{self.mask.height}")


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------

def _pgm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError("corrupt PGM header: unexpected end of file")
    return data[start:pos], pos


def read_pgm(path) -> GrayImage:
    """Decode a binary (P5) PGM with maxval 255; pixel values pass through."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _pgm_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError as exc:
            raise DataError(f"{path}: corrupt PGM header token {tok!r}") from exc
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad PGM dimensions {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: unsupported depth (maxval {maxval}, need 255)")
    pos += 1  # single whitespace after maxval
    payload = data[pos:pos + width * height]
    if len(payload) != width * height:
        raise DataError(f"{path}: truncated PGM payload "
                        f"({len(payload)} of {width * height} bytes)")
    return GrayImage(np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy())


def write_pgm(img: GrayImage, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.pixels.tobytes())


def read_png(path) -> GrayImage:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DataError(f"{path}: unsupported PNG mode {im.mode!r} "
                                "(need 8-bit single-channel)")
            return GrayImage(np.asarray(im, dtype=np.uint8))
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: cannot decode PNG: {exc}") from exc


def write_png(img: GrayImage, path) -> None:
    Image.fromarray(img.pixels, mode="L").save(path, format="PNG")


def load_gray(path) -> GrayImage:
    """Load a PGM or 8-bit grayscale PNG, dispatching on the file suffix
    (falling back to magic-byte sniffing)."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such image file: {p}")
    suffix = p.suffix.lower()
    if suffix == ".pgm":
        return read_pgm(p)
    if suffix == ".png":
        return read_png(p)
    head = p.read_bytes()[:8]
    if head[:2] == b"P5":
        return read_pgm(p)
    if head[:8] == b"\x89PNG\r\n\x1a\n":
        return read_png(p)
    raise DataError(f"{p}: unsupported image format")


def save_gray(img: GrayImage, path) -> None:
    p = Path(path)
    if p.suffix.lower() == ".png":
        write_png(img, p)
    else:
        write_pgm(img, p)


def list_image_files(directory) -> list[Path]:
    """PGM/PNG files in a directory, sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".pgm", ".png"))
    if not files:
        raise DataError(f"no .pgm/.png files in {d}")
    return files


# ---------------------------------------------------------------------------
# Mask handling
# ---------------------------------------------------------------------------

def decode_mask(img: GrayImage, cmap: ClassMap) -> LabelMask:
    """Map gray values to class indices; any unmapped value is an error
    reporting the value and its first (row, col) occurrence."""
    labels = cmap._decode_lut[img.pixels]
    if (labels < 0).any():
        r, c = np.argwhere(labels < 0)[0]
        raise DataError(f"pixel value {img.pixels[r, c]} at (row={r}, col={c}) "
                        "is not in the class map")
    return LabelMask(labels)


def encode_mask(mask: LabelMask, cmap: ClassMap) -> GrayImage:
    if mask.labels.max(initial=0) >= cmap.num_classes:
        raise DataError(f"mask contains class {mask.labels.max()} "
                        f">= C={cmap.num_classes}")
    return GrayImage(cmap._encode_lut[mask.labels])


def compose_three_layer_mask(base: LabelMask, air_binary: GrayImage,
                             air_class: int) -> LabelMask:
    """Overlay a strictly binary air layer on a tissue mask: pixels where the
    air layer is 255 become ``air_class``, everything else keeps ``base``."""
    if (base.height, base.width) != (air_binary.height, air_binary.width):
        raise DataError(f"mask {base.width}x{base.height} does not match "
                        f"air layer {air_binary.width}x{air_binary.height}")
    vals = np.unique(air_binary.pixels)
    if not np.isin(vals, (0, 255)).all():
        bad = vals[~np.isin(vals, (0, 255))][0]
        raise DataError(f"air layer is not binary: found value {bad}")
    if air_class < 0:
        raise ValueError("air_class must be a valid class index")
    out = base.labels.copy()
    out[air_binary.pixels == 255] = air_class
    return LabelMask(out)


def overlay_air_values(base: GrayImage, air_binary: GrayImage,
                       air_value: int) -> GrayImage:
    """Value-level overlay: write ``air_value`` wherever the binary air
    layer is 255 (used by the CLI, which works on raw gray-coded masks)."""
    if not 0 <= air_value <= 255:
        raise ValueError("air_value must fit in 8 bits")
    composed = compose_three_layer_mask(LabelMask(base.pixels.astype(np.int64)),
                                        air_binary, air_value)
    return GrayImage(composed.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# Rescaling
# ---------------------------------------------------------------------------

def _scaled_extent(extent: int, factor: float) -> int:
    return max(1, int(np.floor(extent * factor + 0.5)))


def _check_factor(factor: float) -> None:
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"scale factor {factor} outside (0, 1]")


def downscale_image(img: GrayImage, factor: float) -> GrayImage:
    """Bilinear resample (half-pixel centers) then round back to 8 bits.
    Factor 1.0 is a bit-exact copy."""
    _check_factor(factor)
    if factor == 1.0:
        return GrayImage(img.pixels.copy())
    oh = _scaled_extent(img.height, factor)
    ow = _scaled_extent(img.width, factor)
    my = interp_matrix(img.height, oh)
    mx = interp_matrix(img.width, ow)
    resampled = my @ img.pixels.astype(np.float64) @ mx.T
    return GrayImage(np.clip(np.floor(resampled + 0.5), 0, 255).astype(np.uint8))


def downscale_mask(mask: LabelMask, factor: float) -> LabelMask:
    """Nearest-neighbor resample so no new labels can appear."""
    _check_factor(factor)
    if factor == 1.0:
        return LabelMask(mask.labels.copy())
    oh = _scaled_extent(mask.height, factor)
    ow = _scaled_extent(mask.width, factor)
    ri = np.minimum((np.arange(oh) + 0.5) * (mask.height / oh), mask.height - 1).astype(np.int64)
    ci = np.minimum((np.arange(ow) + 0.5) * (mask.width / ow), mask.width - 1).astype(np.int64)
    return LabelMask(mask.labels[np.ix_(ri, ci)])


def downscale_pair(pair: SamplePair, factor: float) -> SamplePair:
    if factor == 1.0:
        return pair
    return SamplePair(pair.id, downscale_image(pair.image, factor),
                      downscale_mask(pair.mask, factor))


# ---------------------------------------------------------------------------
# Tensor adapters
# ---------------------------------------------------------------------------

def to_model_input(img: GrayImage, mean=None, std=None, dtype=np.float32) -> Tensor:
    """Scale to [0, 1] and replicate across 3 channels; optional per-channel
    normalization with ``(x - mean) / std``."""
    x = img.pixels.astype(dtype) / dtype(255.0)
    x = np.repeat(x[None, None, :, :], 3, axis=1)
    if mean is not None:
        m = np.asarray(mean, dtype=dtype).reshape(1, 3, 1, 1)
        s = np.asarray(std if std is not None else (1.0, 1.0, 1.0),
                       dtype=dtype).reshape(1, 3, 1, 1)
        x = (x - m) / s
    return Tensor(x)


def to_onehot(mask: LabelMask, num_classes: int, dtype=np.float32) -> Tensor:
    """One binary plane per class; exactly one 1 per pixel across channels."""
    if mask.labels.max(initial=0) >= num_classes:
        raise ValueError(f"mask label {mask.labels.max()} >= C={num_classes}")
    planes = np.zeros((1, num_classes, mask.height, mask.width), dtype=dtype)
    for c in range(num_classes):
        planes[0, c] = mask.labels == c
    return Tensor(planes)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

def load_pairs(images_dir, masks_dir, cmap: ClassMap) -> list[SamplePair]:
    """Pair image files with same-stem mask files, decode masks, sort by id."""
    image_files = list_image_files(images_dir)
    mask_files = {p.stem: p for p in list_image_files(masks_dir)}
    pairs = []
    for img_path in image_files:
        stem = img_path.stem
        if stem not in mask_files:
            raise DataError(f"no mask for image {img_path.name} in {masks_dir}")
        image = load_gray(img_path)
        mask = decode_mask(load_gray(mask_files[stem]), cmap)
        pairs.append(SamplePair(stem, image, mask))
    return sorted(pairs, key=lambda p: p.id)
