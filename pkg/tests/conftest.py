import numpy as np
import pytest

from microct_seg.data import ClassEntry, ClassMap, GrayImage, LabelMask, SamplePair
from microct_seg.model import ModelSpec


def make_synthetic_pair(pid: str, seed: int, size: int = 64,
                        num_classes: int = 3) -> SamplePair:
    """Geometric class regions with distinct gray levels plus mild noise:
    class 0 background, class 1 a centered disk, class 2 a corner band.
    Intensity-separable, so flips/rotations keep the task learnable."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    labels = np.zeros((size, size), dtype=np.int64)
    cy = size // 2 + int(rng.integers(-6, 7))
    cx = size // 2 + int(rng.integers(-6, 7))
    r = size // 4
    labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
    if num_classes >= 3:
        band = int(rng.integers(6, 14))
        labels[(yy + xx) < band + 10] = 2
    levels = [40, 130, 220, 90][:num_classes]
    base = np.choose(labels, levels).astype(np.float64)
    pixels = np.clip(base + rng.normal(0, 6, (size, size)), 0, 255).astype(np.uint8)
    return SamplePair(pid, GrayImage(pixels), LabelMask(labels))


@pytest.fixture
def tiny_spec():
    return ModelSpec(num_classes=2, block_counts=(1, 1, 1, 1), base_width=8,
                     head_dropout=0.1)


@pytest.fixture
def classmap3():
    return ClassMap([ClassEntry(0, 0, "background"),
                     ClassEntry(128, 1, "disk"),
                     ClassEntry(255, 2, "band")])


@pytest.fixture
def classmap2():
    return ClassMap([ClassEntry(0, 0, "background"),
                     ClassEntry(255, 1, "foreground")])
