"""N-dimensional tensors with reverse-mode automatic differentiation.

This module is the numerical substrate for the whole package: a small
``Tensor`` type wrapping a numpy array, the forward operators a fully
convolutional segmentation network needs (convolution, batch norm, ReLU,
max pooling, bilinear resampling, dropout, residual addition, and a
sigmoid cross-entropy loss), and a ``backward`` pass that fills gradient
buffers by walking the recorded computation graph in reverse.

Conventions:

- Convolution is cross-correlation (no kernel flip).
- ReLU's subgradient at exactly 0 is 0; max-pool ties route gradient to
  the first maximal element in row-major window order.
- Bilinear resampling uses half-pixel source centers clamped at borders.
- Dropout is inverted dropout: survivors are scaled by 1/(1-p) at train
  time so evaluation is a plain identity.
- All operators are deterministic given their inputs and an explicit RNG.

Arrays are float32 by default; building tensors from float64 arrays keeps
float64, which is what the finite-difference gradient checker relies on.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "ConvParams",
    "BatchNormState",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "batchnorm2d",
    "relu",
    "maxpool2d",
    "bilinear_upsample",
    "dropout",
    "add",
    "mul",
    "tensor_sum",
    "bce_with_logits",
    "backward",
    "sigmoid",
    "conv_extent",
    "interp_matrix",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A real-valued array with optional gradient tracking.

    ``data`` is a numpy array (row-major). ``grad`` is lazily allocated by
    ``backward`` and has the same shape and dtype as ``data``. Tensors are
    immutable once created except for ``grad`` (and parameter updates done
    explicitly by an optimizer on leaf tensors).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # A few operators so tests and losses read naturally.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _make_output(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording the graph edge when grad is enabled."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the grad buffer of every
    participating leaf tensor that has ``requires_grad`` set.

    ``loss`` must be a scalar with recorded history. Repeated calls
    without ``zero_grad`` accumulate.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss._parents:
        raise ValueError("backward called on a tensor with no recorded history")

    # Iterative topological order (graphs here are hundreds of nodes deep).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # Leaf: flush into the persistent buffer.
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Shape algebra
# ---------------------------------------------------------------------------

def conv_extent(extent: int, kernel: int, stride: int, pad: int, dilation: int = 1) -> int:
    """Output extent of a convolution/pooling window sweep."""
    return (extent + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


@dataclass(frozen=True)
class ConvParams:
    """Geometry of a 2-D convolution."""

    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    dil_h: int = 1
    dil_w: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel extents must be positive")
        if self.stride_h < 1 or self.stride_w < 1:
            raise ValueError("strides must be positive")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ValueError("padding must be non-negative")
        if self.dil_h < 1 or self.dil_w < 1:
            raise ValueError("dilation must be positive")

    @classmethod
    def square(cls, kernel: int, stride: int = 1, pad: int = 0, dilation: int = 1,
               bias: bool = False) -> "ConvParams":
        return cls(kernel, kernel, stride, stride, pad, pad, dilation, dilation, bias)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_extent(h, self.kernel_h, self.stride_h, self.pad_h, self.dil_h),
            conv_extent(w, self.kernel_w, self.stride_w, self.pad_w, self.dil_w),
        )


def _pad2d(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _window_view(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
                 dh: int, dw: int, oh: int, ow: int) -> np.ndarray:
    """Read-only (N, C, kh, kw, oh, ow) view of all kernel windows."""
    n, c = xp.shape[:2]
    sn, sc, srow, scol = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, dh * srow, dw * scol, sh * srow, sw * scol),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, params: ConvParams) -> Tensor:
    """2-D cross-correlation of NCHW input with OIHW weights."""
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels but weight expects {cin_w}")
    if (kh, kw) != (params.kernel_h, params.kernel_w):
        raise ValueError(f"weight kernel {kh}x{kw} does not match params "
                         f"{params.kernel_h}x{params.kernel_w}")
    if params.has_bias != (bias is not None):
        raise ValueError("bias presence does not match params.has_bias")
    if bias is not None and bias.data.shape != (cout,):
        raise ValueError(f"bias shape {bias.data.shape} != ({cout},)")
    oh, ow = params.out_hw(h, w)
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive conv output extent {oh}x{ow} "
                         f"for input {h}x{w}")

    sh, sw = params.stride_h, params.stride_w
    dh, dw = params.dil_h, params.dil_w
    xp = _pad2d(x.data, params.pad_h, params.pad_w)
    win = _window_view(xp, kh, kw, sh, sw, dh, dw, oh, ow)
    # (Cout, C, kh, kw) . (N, C, kh, kw, oh, ow) -> (Cout, N, oh, ow)
    out = np.tensordot(weight.data, win, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g: np.ndarray):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 4, 5]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    # (N, oh, ow, C) contribution of kernel tap (i, j)
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i * dh:i * dh + oh * sh:sh,
                        j * dw:j * dw + ow * sw:sw] += contrib.transpose(0, 3, 1, 2)
            ph, pw = params.pad_h, params.pad_w
            gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make_output(out, parents, bw)


class BatchNormState:
    """Per-channel batch normalization parameters and running statistics.

    ``gamma``/``beta`` are trainable tensors; ``running_mean``/``running_var``
    are plain arrays updated in train mode and consumed in eval mode.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.mode = "train"


def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    Train mode normalizes with batch moments, applies gamma/beta, and
    updates the running statistics in place with
    ``running <- (1 - momentum) * running + momentum * batch``.
    Eval mode normalizes with the stored running statistics.
    """
    n, c, h, w = x.data.shape
    if c != state.channels:
        raise ValueError(f"input has {c} channels but batchnorm state has {state.channels}")
    if state.mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("train-mode batchnorm needs at least 2 elements per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = ((1.0 - state.momentum) * state.running_mean
                              + state.momentum * mean).astype(state.running_mean.dtype)
        state.running_var = ((1.0 - state.momentum) * state.running_var
                             + state.momentum * var).astype(state.running_var.dtype)
    elif state.mode == "eval":
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    else:
        raise ValueError(f"unknown batchnorm mode {state.mode!r}")

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = state.gamma.data[None, :, None, None] * xhat + state.beta.data[None, :, None, None]
    train = state.mode == "train"

    def bw(g: np.ndarray):
        axes = (0, 2, 3)
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * state.gamma.data[None, :, None, None]
            if train:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                s1 = dxhat.sum(axis=axes)[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                gx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _make_output(out, (x, state.gamma, state.beta), bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); gradient is 0 at exactly 0."""
    out = np.maximum(x.data, 0)

    def bw(g: np.ndarray):
        return (g * (x.data > 0),)

    return _make_output(out, (x,), bw)


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Windowed maximum with -inf padding.

    Backward routes the gradient to the first maximal element of each
    window in row-major order.
    """
    n, c, h, w = x.data.shape
    oh = conv_extent(h, kernel, stride, padding)
    ow = conv_extent(w, kernel, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive pool output extent {oh}x{ow} for input {h}x{w}")
    xp = _pad2d(x.data, padding, padding, value=-np.inf)
    win = _window_view(xp, kernel, kernel, stride, stride, 1, 1, oh, ow)
    flat = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c, oh, ow, -1)
    arg = flat.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g: np.ndarray):
        ni, ci, ohi, owi = np.indices((n, c, oh, ow), sparse=False)
        ih = ohi * stride - padding + arg // kernel
        iw = owi * stride - padding + arg % kernel
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ni, ci, ih, iw), g)
        return (gx,)

    return _make_output(out, (x,), bw)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) bilinear interpolation matrix with half-pixel centers.

    Source coordinate for destination d is (d + 0.5) * n_in / n_out - 0.5,
    clamped to the borders. Identity when n_out == n_in.
    """
    d = np.arange(n_out, dtype=np.float64)
    s = np.clip((d + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(s).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = s - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), i0] += 1.0 - w1
    m[np.arange(n_out), i1] += w1
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resample NCHW input to (out_h, out_w) with bilinear interpolation."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be positive")
    _, _, h, w = x.data.shape
    my = interp_matrix(h, out_h, x.data.dtype)
    mx = interp_matrix(w, out_w, x.data.dtype)
    out = np.matmul(np.matmul(my, x.data), mx.T)

    def bw(g: np.ndarray):
        return (np.matmul(np.matmul(my.T, g), mx),)

    return _make_output(out, (x,), bw)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability p and scales
    survivors by 1/(1-p); eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout requires an explicit rng")
    keep = rng.random(x.data.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    out = x.data * keep * scale

    def bw(g: np.ndarray):
        return (g * keep * scale,)

    return _make_output(out, (x,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of identically shaped tensors (residual join)."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def bw(g: np.ndarray):
        return g, g

    return _make_output(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
        out = a.data * b.data

        def bw(g: np.ndarray):
            return g * b.data, g * a.data

        return _make_output(out, (a, b), bw)
    scalar = float(b)
    out = a.data * scalar

    def bw_scalar(g: np.ndarray):
        return (g * scalar,)

    return _make_output(out, (a,), bw_scalar)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = x.data.sum()

    def bw(g: np.ndarray):
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=True),)

    return _make_output(np.asarray(out), (x,), bw)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a plain array."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, targets: Tensor | np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against {0,1} targets.

    Uses the log-sum-exp form max(z,0) - z*t + log(1 + exp(-|z|)), which is
    finite for any finite logit.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    z = logits.data
    if z.shape != t.shape:
        raise ValueError(f"logits shape {z.shape} != targets shape {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        bad = t[(t != 0) & (t != 1)].flat[0]
        raise ValueError(f"targets must be binary, found value {bad}")
    t = t.astype(z.dtype)
    elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(elem.mean())

    def bw(g: np.ndarray):
        return ((sigmoid(z) - t) * (g / z.size),)

    return _make_output(out, (logits,), bw)
