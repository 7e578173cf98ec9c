"""Finite-difference verification of every differentiable operator.

Each check builds small float64 tensors, reduces the operator's output to a
scalar through a fixed random weighting, runs the reverse pass, and compares
every (or a sampled subset of) coordinate against central differences with
step 1e-5. The reported figure per check is

    max |autodiff - fd| / max(1, |fd|)

which the CLI ``gradcheck`` subcommand requires to stay below 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConvParams, Tensor
from .model import ModelSpec, build_fcn

__all__ = ["CheckResult", "run_suite", "central_difference", "relative_error", "THRESHOLD"]

THRESHOLD = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float


def relative_error(autodiff: float, fd: float) -> float:
    return abs(autodiff - fd) / max(1.0, abs(fd))


def central_difference(loss_fn, arr: np.ndarray, idx, step: float = STEP) -> float:
    """d loss / d arr[idx] by central differences; restores arr."""
    orig = arr[idx]
    arr[idx] = orig + step
    fp = loss_fn()
    arr[idx] = orig - step
    fm = loss_fn()
    arr[idx] = orig
    return (fp - fm) / (2.0 * step)


def _sample_coords(shape: tuple[int, ...], rng: np.random.Generator,
                   max_coords: int) -> list[tuple[int, ...]]:
    size = int(np.prod(shape)) if shape else 1
    if size <= max_coords:
        flat = np.arange(size)
    else:
        flat = rng.choice(size, size=max_coords, replace=False)
    return [np.unravel_index(int(f), shape) if shape else () for f in flat]


def _check_tensors(name: str, loss_fn, tensors: dict[str, Tensor],
                   rng: np.random.Generator, max_coords: int = 64) -> CheckResult:
    """Compare autodiff grads of ``tensors`` against central differences.

    ``loss_fn()`` must rebuild the graph from the tensors' current data and
    return the scalar loss Tensor.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    worst = 0.0
    with ad.no_grad():
        def value() -> float:
            return float(loss_fn().data)

        for t in tensors.values():
            assert t.grad is not None, f"{name}: missing grad"
            for idx in _sample_coords(t.data.shape, rng, max_coords):
                fd = central_difference(value, t.data, idx)
                worst = max(worst, relative_error(float(t.grad[idx]), fd))
    return CheckResult(name, worst)


def _weighted_sum(out: Tensor, r: np.ndarray) -> Tensor:
    return ad.tensor_sum(ad.mul(out, Tensor(r)))


def _conv_case(name, rng, n, cin, cout, h, w, kernel, stride, pad, dilation, bias):
    x = Tensor(rng.standard_normal((n, cin, h, w)), requires_grad=True)
    wt = Tensor(rng.standard_normal((cout, cin, kernel, kernel)) * 0.3, requires_grad=True)
    b = Tensor(rng.standard_normal(cout) * 0.1, requires_grad=True) if bias else None
    params = ConvParams.square(kernel, stride, pad, dilation, bias)
    oh, ow = params.out_hw(h, w)
    r = rng.standard_normal((n, cout, oh, ow))
    tensors = {"x": x, "w": wt}
    if bias:
        tensors["b"] = b

    def loss_fn():
        return _weighted_sum(ad.conv2d(x, wt, b, params), r)

    return _check_tensors(name, loss_fn, tensors, rng)


def _fcn_case(rng: np.random.Generator, coords_per_param: int = 2) -> CheckResult:
    spec = ModelSpec(num_classes=2, block_counts=(1, 1, 1, 1), base_width=8,
                     head_dropout=0.1)
    model = build_fcn(spec, rng, dtype=np.float64)
    model.train()
    x = Tensor(rng.standard_normal((1, 3, 32, 32)))
    labels = rng.integers(0, spec.num_classes, size=(32, 32))
    targets = np.zeros((1, spec.num_classes, 32, 32))
    for c in range(spec.num_classes):
        targets[0, c] = labels == c
    drop_seed = int(rng.integers(0, 2**31))

    # Train-mode BN mutates running stats on every forward; snapshot them so
    # the finite-difference evaluations see identical state.
    bn_snapshots = [(bn, bn.running_mean.copy(), bn.running_var.copy())
                    for _, bn in model._named_batchnorms()]

    def restore():
        for bn, m, v in bn_snapshots:
            bn.running_mean[...] = m
            bn.running_var[...] = v

    def loss_fn():
        restore()
        out = model.forward(x, rng=np.random.default_rng(drop_seed))
        return ad.bce_with_logits(out, targets)

    params = model.named_parameters()
    model.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    worst = 0.0
    with ad.no_grad():
        def value() -> float:
            return float(loss_fn().data)

        for name, t in params.items():
            assert t.grad is not None, f"fcn: no grad for {name}"
            for idx in _sample_coords(t.data.shape, rng, coords_per_param):
                fd = central_difference(value, t.data, idx)
                worst = max(worst, relative_error(float(t.grad[idx]), fd))
    restore()
    return CheckResult("fcn_end_to_end", worst)


def run_suite(seed: int = 0) -> list[CheckResult]:
    """All operator checks plus a tiny end-to-end network sweep."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    results.append(_conv_case("conv2d_3x3_stride2", rng,
                              2, 3, 4, 8, 7, kernel=3, stride=2, pad=1, dilation=1, bias=True))
    results.append(_conv_case("conv2d_3x3_dilated", rng,
                              1, 2, 3, 10, 9, kernel=3, stride=1, pad=2, dilation=2, bias=False))
    results.append(_conv_case("conv2d_1x1", rng,
                              2, 4, 3, 5, 6, kernel=1, stride=1, pad=0, dilation=1, bias=True))
    results.append(_conv_case("conv2d_7x7_stem", rng,
                              1, 3, 4, 17, 15, kernel=7, stride=2, pad=3, dilation=1, bias=False))

    # batchnorm, train and eval modes
    for mode in ("train", "eval"):
        x = Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
        st = ad.BatchNormState(3, dtype=np.float64)
        st.gamma.data[:] = rng.standard_normal(3) * 0.5 + 1.0
        st.beta.data[:] = rng.standard_normal(3) * 0.3
        st.running_mean[:] = rng.standard_normal(3) * 0.2
        st.running_var[:] = rng.random(3) + 0.5
        st.mode = mode
        rm, rv = st.running_mean.copy(), st.running_var.copy()
        r = rng.standard_normal(x.data.shape)

        def bn_loss(x=x, st=st, rm=rm, rv=rv, r=r):
            st.running_mean[...] = rm
            st.running_var[...] = rv
            return _weighted_sum(ad.batchnorm2d(x, st), r)

        results.append(_check_tensors(f"batchnorm2d_{mode}", bn_loss,
                                      {"x": x, "gamma": st.gamma, "beta": st.beta}, rng))

    # relu away from the kink
    x = Tensor(rng.standard_normal((3, 4)) + np.sign(rng.standard_normal((3, 4))) * 0.1,
               requires_grad=True)
    r = rng.standard_normal(x.data.shape)
    results.append(_check_tensors("relu", lambda: _weighted_sum(ad.relu(x), r),
                                  {"x": x}, rng))

    # maxpool with well-separated values so the step cannot flip an argmax
    vals = rng.permutation(8 * 9).astype(np.float64).reshape(1, 1, 8, 9) * 1e-2
    x = Tensor(vals, requires_grad=True)
    out_shape = (1, 1, ad.conv_extent(8, 3, 2, 1), ad.conv_extent(9, 3, 2, 1))
    r = rng.standard_normal(out_shape)
    results.append(_check_tensors("maxpool2d", lambda: _weighted_sum(ad.maxpool2d(x), r),
                                  {"x": x}, rng))

    # bilinear resampling, both directions
    x = Tensor(rng.standard_normal((1, 3, 5, 7)), requires_grad=True)
    r = rng.standard_normal((1, 3, 9, 11))
    results.append(_check_tensors(
        "bilinear_upsample", lambda: _weighted_sum(ad.bilinear_upsample(x, 9, 11), r),
        {"x": x}, rng))
    x = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    r = rng.standard_normal((1, 2, 3, 5))
    results.append(_check_tensors(
        "bilinear_downsample", lambda: _weighted_sum(ad.bilinear_upsample(x, 3, 5), r),
        {"x": x}, rng))

    # dropout with a pinned mask
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    r = rng.standard_normal((4, 5))
    seed_drop = int(rng.integers(0, 2**31))
    results.append(_check_tensors(
        "dropout",
        lambda: _weighted_sum(ad.dropout(x, 0.3, "train", np.random.default_rng(seed_drop)), r),
        {"x": x}, rng))

    # add / mul / sum
    a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    r = rng.standard_normal((3, 3))
    results.append(_check_tensors("add", lambda: _weighted_sum(ad.add(a, b), r),
                                  {"a": a, "b": b}, rng))
    results.append(_check_tensors("mul", lambda: _weighted_sum(ad.mul(a, b), r),
                                  {"a": a, "b": b}, rng))
    results.append(_check_tensors("sum", lambda: ad.tensor_sum(a), {"a": a}, rng))

    # loss
    z = Tensor(rng.standard_normal((2, 3, 4, 4)) * 2.0, requires_grad=True)
    t = (rng.random((2, 3, 4, 4)) < 0.5).astype(np.float64)
    results.append(_check_tensors("bce_with_logits",
                                  lambda: ad.bce_with_logits(z, t), {"z": z}, rng))

    results.append(_fcn_case(rng))
    return results
