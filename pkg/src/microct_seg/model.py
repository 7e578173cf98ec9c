"""Fully convolutional segmentation network with a residual bottleneck
backbone.

The default configuration is the 101-layer backbone (block counts
3/4/23/3, base width 64) with stage 3 dilated by 2 and stage 4 dilated by
4 at stride 1, so the backbone emits 2048 channels at output stride 8. A
3x3 conv head reduces to 512 channels, applies dropout, classifies with a
1x1 conv, and bilinearly upsamples the logits back to the input size.
Reduced variants (smaller block counts / base width) exist for tests.

Parameter naming is stable and used by the weight-file format:
``stem.{conv,bn}``, ``layer{1..4}.block{i}.{conv1,bn1,conv2,bn2,conv3,bn3,
downsample}``, ``head.{conv,bn,classifier}``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ConvParams, Tensor
from .errors import DataError

__all__ = [
    "ModelSpec",
    "Model",
    "LayerTable",
    "build_fcn",
    "replace_classifier",
    "summarize",
    "save_weights",
    "load_weights",
    "serialize_weights",
    "deserialize_weights",
    "MIN_INPUT",
]

MIN_INPUT = 32  # keeps every stride-8 intermediate at extent >= 4

_EXPANSION = 4
_STAGE_STRIDES = (1, 2, 1, 1)
_STAGE_DILATIONS = (1, 1, 2, 4)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture knobs: class count, per-stage block counts, base width.

    The dilation plan is fixed: stages 1-2 undilated, stage 3 dilation 2 and
    stage 4 dilation 4, both at stride 1 (output stride 8). The entry block
    of a dilated stage keeps the previous stage's dilation; later blocks use
    the stage dilation.
    """

    num_classes: int
    block_counts: tuple[int, int, int, int] = (3, 4, 23, 3)
    base_width: int = 64
    head_dropout: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if len(self.block_counts) != 4:
            raise ValueError("block_counts must have exactly 4 entries")
        if any(b < 1 for b in self.block_counts):
            raise ValueError("block_counts must all be positive")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ValueError("head_dropout must lie in [0, 1)")
        object.__setattr__(self, "block_counts", tuple(self.block_counts))


def _init_conv_weight(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int,
                      dtype) -> np.ndarray:
    # fan-out scaled normal init
    fan_out = cout * kh * kw
    std = np.sqrt(2.0 / fan_out)
    return (rng.standard_normal((cout, cin, kh, kw)) * std).astype(dtype)


class _Conv:
    """A convolution layer: weights plus fixed geometry."""

    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, pad: int = 0,
                 dilation: int = 1, bias: bool = False, *, rng: np.random.Generator, dtype):
        self.weight = Tensor(_init_conv_weight(rng, cout, cin, kernel, kernel, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.params = ConvParams.square(kernel, stride, pad, dilation, bias)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.params)

    def param_count(self) -> int:
        n = self.weight.data.size
        if self.bias is not None:
            n += self.bias.data.size
        return n

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.params.out_hw(h, w)


class _Bottleneck:
    """1x1 reduce, 3x3 (possibly strided/dilated), 1x1 expand, with an
    identity or projected shortcut joined before the final ReLU."""

    def __init__(self, cin: int, planes: int, stride: int, dilation: int,
                 project: bool, *, rng: np.random.Generator, dtype):
        cout = planes * _EXPANSION
        self.conv1 = _Conv(cin, planes, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNormState(planes, dtype=dtype)
        self.conv2 = _Conv(planes, planes, 3, stride=stride, pad=dilation,
                           dilation=dilation, rng=rng, dtype=dtype)
        self.bn2 = BatchNormState(planes, dtype=dtype)
        self.conv3 = _Conv(planes, cout, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNormState(cout, dtype=dtype)
        if project:
            self.down_conv = _Conv(cin, cout, 1, stride=stride, rng=rng, dtype=dtype)
            self.down_bn = BatchNormState(cout, dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None
        self.out_channels = cout

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.batchnorm2d(self.conv1(x), self.bn1))
        h = ad.relu(ad.batchnorm2d(self.conv2(h), self.bn2))
        h = ad.batchnorm2d(self.conv3(h), self.bn3)
        if self.down_conv is not None:
            shortcut = ad.batchnorm2d(self.down_conv(x), self.down_bn)
        else:
            shortcut = x
        return ad.relu(ad.add(h, shortcut))

    def param_count(self) -> int:
        n = (self.conv1.param_count() + self.conv2.param_count() + self.conv3.param_count()
             + 2 * (self.bn1.channels + self.bn2.channels + self.bn3.channels))
        if self.down_conv is not None:
            n += self.down_conv.param_count() + 2 * self.down_bn.channels
        return n

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.conv2.out_hw(*self.conv1.out_hw(h, w))


class Model:
    """An instantiated network: spec, parameters, and a train/eval mode."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        w = spec.base_width
        self.stem_conv = _Conv(3, w, 7, stride=2, pad=3, rng=rng, dtype=dtype)
        self.stem_bn = BatchNormState(w, dtype=dtype)

        self.stages: list[list[_Bottleneck]] = []
        cin = w
        dilation = 1
        for si in range(4):
            planes = w * (2 ** si)
            stride = _STAGE_STRIDES[si]
            stage_dilation = _STAGE_DILATIONS[si]
            blocks: list[_Bottleneck] = []
            for bi in range(spec.block_counts[si]):
                if bi == 0:
                    # The entry block projects the shortcut and keeps the
                    # previous dilation; later blocks use the stage dilation.
                    blk = _Bottleneck(cin, planes, stride, dilation, project=True,
                                      rng=rng, dtype=dtype)
                else:
                    blk = _Bottleneck(cin, planes, 1, stage_dilation, project=False,
                                      rng=rng, dtype=dtype)
                blocks.append(blk)
                cin = blk.out_channels
            dilation = stage_dilation
            self.stages.append(blocks)

        backbone_out = cin
        head_width = backbone_out // _EXPANSION
        self.head_conv = _Conv(backbone_out, head_width, 3, pad=1, rng=rng, dtype=dtype)
        self.head_bn = BatchNormState(head_width, dtype=dtype)
        self.classifier = _Conv(head_width, spec.num_classes, 1, bias=True,
                                rng=rng, dtype=dtype)
        self.classifier.bias.data[:] = 0
        self.mode = "train"
        self.train()

    # -- mode handling -----------------------------------------------------

    def train(self) -> "Model":
        self._set_mode("train")
        return self

    def eval(self) -> "Model":
        self._set_mode("eval")
        return self

    def _set_mode(self, mode: str) -> None:
        self.mode = mode
        for _, bn in self._named_batchnorms():
            bn.mode = mode

    # -- traversal ---------------------------------------------------------

    def _named_convs(self):
        yield "stem.conv", self.stem_conv
        for si, blocks in enumerate(self.stages, start=1):
            for bi, blk in enumerate(blocks):
                base = f"layer{si}.block{bi}"
                yield f"{base}.conv1", blk.conv1
                yield f"{base}.conv2", blk.conv2
                yield f"{base}.conv3", blk.conv3
                if blk.down_conv is not None:
                    yield f"{base}.downsample.conv", blk.down_conv
        yield "head.conv", self.head_conv
        yield "head.classifier", self.classifier

    def _named_batchnorms(self):
        yield "stem.bn", self.stem_bn
        for si, blocks in enumerate(self.stages, start=1):
            for bi, blk in enumerate(blocks):
                base = f"layer{si}.block{bi}"
                yield f"{base}.bn1", blk.bn1
                yield f"{base}.bn2", blk.bn2
                yield f"{base}.bn3", blk.bn3
                if blk.down_bn is not None:
                    yield f"{base}.downsample.bn", blk.down_bn
        yield "head.bn", self.head_bn

    def named_parameters(self) -> dict[str, Tensor]:
        """Trainable tensors, keyed by their stable names."""
        out: dict[str, Tensor] = {}
        for name, conv in self._named_convs():
            out[f"{name}.weight"] = conv.weight
            if conv.bias is not None:
                out[f"{name}.bias"] = conv.bias
        for name, bn in self._named_batchnorms():
            out[f"{name}.gamma"] = bn.gamma
            out[f"{name}.beta"] = bn.beta
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_state_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array: parameters plus BN running statistics."""
        out: dict[str, np.ndarray] = {k: v.data for k, v in self.named_parameters().items()}
        for name, bn in self._named_batchnorms():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()

    # -- forward -----------------------------------------------------------

    def forward(self, x: Tensor, rng: np.random.Generator | None = None,
                return_features: bool = False):
        """Run the network; output spatial size equals input spatial size.

        ``rng`` drives the head dropout and is required in train mode when
        ``head_dropout > 0``.
        """
        if x.data.ndim != 4:
            raise ValueError(f"expected NCHW input, got shape {x.data.shape}")
        n, c, h, w = x.data.shape
        if c != 3:
            raise ValueError(f"expected 3 input channels, got {c}")
        if h < MIN_INPUT or w < MIN_INPUT:
            raise ValueError(f"input {h}x{w} smaller than minimum {MIN_INPUT}x{MIN_INPUT}")

        y = ad.relu(ad.batchnorm2d(self.stem_conv(x), self.stem_bn))
        y = ad.maxpool2d(y, kernel=3, stride=2, padding=1)
        for blocks in self.stages:
            for blk in blocks:
                y = blk(y)
        features = y
        y = ad.relu(ad.batchnorm2d(self.head_conv(y), self.head_bn))
        y = ad.dropout(y, self.spec.head_dropout, self.mode, rng)
        y = self.classifier(y)
        y = ad.bilinear_upsample(y, h, w)
        if return_features:
            return y, features
        return y

    __call__ = forward


def build_fcn(spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Instantiate a model: fan-out-scaled normal conv weights, BN gamma=1
    beta=0, classifier bias 0."""
    return Model(spec, rng, dtype=dtype)


def replace_classifier(model: Model, new_num_classes: int,
                       rng: np.random.Generator) -> Model:
    """Swap the final 1x1 classifier for a freshly initialized one with
    ``new_num_classes`` outputs; every other tensor is left untouched."""
    if new_num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    head_width = model.classifier.weight.data.shape[1]
    model.classifier = _Conv(head_width, new_num_classes, 1, bias=True,
                             rng=rng, dtype=model.dtype)
    model.classifier.bias.data[:] = 0
    model.spec = replace(model.spec, num_classes=new_num_classes)
    return model


# ---------------------------------------------------------------------------
# Layer table
# ---------------------------------------------------------------------------

@dataclass
class LayerRow:
    name: str
    shape: tuple[int, ...] | None
    params: int | None


@dataclass
class LayerTable:
    rows: list[LayerRow]
    total_params: int
    trainable_params: int
    non_trainable_params: int

    def render(self) -> str:
        def fmt_shape(s):
            return "[" + ", ".join(str(v) for v in s) + "]" if s is not None else "--"

        def fmt_params(p):
            return f"{p:,}" if p is not None else "--"

        name_w = max(len(r.name) for r in self.rows) + 2
        shape_w = max(len(fmt_shape(r.shape)) for r in self.rows) + 2
        lines = [f"{'Layer':<{name_w}}{'Output Shape':<{shape_w}}Param #"]
        lines.append("=" * (name_w + shape_w + 10))
        for r in self.rows:
            lines.append(f"{r.name:<{name_w}}{fmt_shape(r.shape):<{shape_w}}{fmt_params(r.params)}")
        lines.append("=" * (name_w + shape_w + 10))
        lines.append(f"Trainable params: {self.trainable_params:,}")
        lines.append(f"Non-trainable params: {self.non_trainable_params:,}")
        lines.append(f"Total params: {self.total_params:,}")
        return "\n".join(lines)


def summarize(model: Model, input_h: int, input_w: int) -> LayerTable:
    """Per-layer output shapes and parameter counts for a given input size.

    Shapes are derived from the convolution extent formula, so this is fast
    even for inputs far larger than anything a forward pass would touch.
    """
    if input_h < MIN_INPUT or input_w < MIN_INPUT:
        raise ValueError(f"input {input_h}x{input_w} smaller than minimum "
                         f"{MIN_INPUT}x{MIN_INPUT}")
    spec = model.spec
    rows: list[LayerRow] = []
    h, w = input_h, input_w

    ch, cw = model.stem_conv.out_hw(h, w)
    stem_shape = (1, spec.base_width, ch, cw)
    ph, pw = ad.conv_extent(ch, 3, 2, 1), ad.conv_extent(cw, 3, 2, 1)

    # Walk stages to find the backbone output shape first.
    sh, sw = ph, pw
    stage_shapes = []
    cch = spec.base_width
    for blocks in model.stages:
        sh, sw = blocks[0].out_hw(sh, sw)
        cch = blocks[0].out_channels
        stage_shapes.append((1, cch, sh, sw))

    rows.append(LayerRow("fcn", (1, spec.num_classes, input_h, input_w), None))
    rows.append(LayerRow("backbone", stage_shapes[-1], None))
    rows.append(LayerRow("stem.conv", stem_shape, model.stem_conv.param_count()))
    rows.append(LayerRow("stem.bn", stem_shape, 2 * model.stem_bn.channels))
    rows.append(LayerRow("stem.relu", stem_shape, None))
    rows.append(LayerRow("stem.maxpool", (1, spec.base_width, ph, pw), None))

    h, w = ph, pw
    for si, blocks in enumerate(model.stages, start=1):
        rows.append(LayerRow(f"layer{si}", stage_shapes[si - 1], None))
        for bi, blk in enumerate(blocks):
            h, w = blk.out_hw(h, w)
            rows.append(LayerRow(f"layer{si}.block{bi}", (1, blk.out_channels, h, w),
                                 blk.param_count()))

    head_w = model.head_conv.weight.data.shape[0]
    head_shape = (1, head_w, h, w)
    rows.append(LayerRow("head", (1, spec.num_classes, h, w), None))
    rows.append(LayerRow("head.conv", head_shape, model.head_conv.param_count()))
    rows.append(LayerRow("head.bn", head_shape, 2 * model.head_bn.channels))
    rows.append(LayerRow("head.relu", head_shape, None))
    rows.append(LayerRow("head.dropout", head_shape, None))
    rows.append(LayerRow("head.classifier", (1, spec.num_classes, h, w),
                         model.classifier.param_count()))
    rows.append(LayerRow("upsample", (1, spec.num_classes, input_h, input_w), None))

    total = model.param_count()
    return LayerTable(rows=rows, total_params=total, trainable_params=total,
                      non_trainable_params=0)


# ---------------------------------------------------------------------------
# Weight file format
# ---------------------------------------------------------------------------
# magic "FCNW" | u32 version=1 | u32 header_len | header text
# | u32 tensor_count | per tensor: u32 name_len, name, u32 rank, u64 dims,
#   little-endian float32 payload.
# BN running statistics travel as ordinary named tensors.

_MAGIC = b"FCNW"
_VERSION = 1


def _spec_header(spec: ModelSpec) -> str:
    blocks = ",".join(str(b) for b in spec.block_counts)
    return f"num_classes={spec.num_classes} block_counts={blocks} base_width={spec.base_width}"


def _parse_spec_header(text: str) -> ModelSpec:
    fields = {}
    for token in text.split():
        if "=" not in token:
            raise DataError(f"malformed weight-file header token {token!r}")
        k, v = token.split("=", 1)
        fields[k] = v
    try:
        return ModelSpec(
            num_classes=int(fields["num_classes"]),
            block_counts=tuple(int(b) for b in fields["block_counts"].split(",")),
            base_width=int(fields["base_width"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed weight-file header {text!r}") from exc


def serialize_weights(model: Model) -> bytes:
    """All parameters and BN running stats as 32-bit floats, in-memory."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    header = _spec_header(model.spec).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    tensors = model.named_state_arrays()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_weights(model: Model, path) -> None:
    """Write the weight file (see format notes above)."""
    with open(path, "wb") as fh:
        fh.write(serialize_weights(model))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"truncated weight file while reading {what}")
    return data


def load_weights(path, spec: ModelSpec | None = None, strict: bool = True,
                 dtype=np.float32) -> Model:
    """Rebuild a model from a weight file.

    When ``spec`` is given it must match the file header; with
    ``strict=False`` a differing ``num_classes`` is tolerated (the model is
    loaded with the file's classifier so a follow-up ``replace_classifier``
    can substitute it).
    """
    with open(path, "rb") as fh:
        return _load_stream(fh, str(path), spec, strict, dtype)


def deserialize_weights(blob: bytes, spec: ModelSpec | None = None,
                        strict: bool = True, dtype=np.float32) -> Model:
    """``load_weights`` for an in-memory serialized blob."""
    return _load_stream(io.BytesIO(blob), "<bytes>", spec, strict, dtype)


def _load_stream(fh, path: str, spec: ModelSpec | None, strict: bool,
                 dtype) -> Model:
    if _read_exact(fh, 4, "magic") != _MAGIC:
        raise DataError(f"{path}: not a weight file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != _VERSION:
        raise DataError(f"{path}: unsupported weight file version {version}")
    (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
    file_spec = _parse_spec_header(_read_exact(fh, hlen, "header").decode("utf-8"))

    if spec is not None:
        same_shape = (spec.block_counts == file_spec.block_counts
                      and spec.base_width == file_spec.base_width)
        if not same_shape:
            raise DataError(
                f"{path}: file spec {_spec_header(file_spec)!r} does not match "
                f"requested {_spec_header(spec)!r}")
        if spec.num_classes != file_spec.num_classes and strict:
            raise DataError(
                f"{path}: shape mismatch for tensor 'head.classifier.weight': "
                f"file has {file_spec.num_classes} classes, "
                f"requested {spec.num_classes}")
        # non-strict class mismatch is tolerated: the caller is expected to
        # replace the classifier afterwards

    model = build_fcn(file_spec, np.random.default_rng(0), dtype=dtype)
    targets = model.named_state_arrays()
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
    seen: set[str] = set()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
        name = _read_exact(fh, nlen, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"dims of {name}"))
        payload = _read_exact(fh, 4 * int(np.prod(dims, dtype=np.int64)),
                              f"data of {name}")
        if name not in targets:
            raise DataError(f"{path}: unknown tensor {name!r} in weight file")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
        dst = targets[name]
        if dst.shape != arr.shape:
            raise DataError(f"{path}: shape mismatch for tensor {name!r}: "
                            f"file {arr.shape} vs model {dst.shape}")
        dst[...] = arr.astype(dtype)
        seen.add(name)
    if seen != set(targets):
        missing = sorted(set(targets) - seen)
        raise DataError(f"{path}: weight file is missing tensors {missing[:3]}...")
    return model
