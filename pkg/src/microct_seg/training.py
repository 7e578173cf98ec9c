"""Training protocol: Adam at lr 0.001, batch size 1, lossless flip/rotate
augmentation, deterministic half/half train-validation split, fixed-epoch
runs with loss history and checkpointing, and the leaf-count / epoch sweep
harness.

Every random decision flows from a single integer seed: per-epoch shuffles,
per-sample augmentation draws, and dropout masks each get their own
deterministically derived generator, so a (data, spec, config, seed) tuple
fully determines the final weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (ClassMap, GrayImage, LabelMask, SamplePair, downscale_pair,
                   to_model_input, to_onehot)
from .errors import DataError, NumericalError
from .metrics import MetricRow, evaluate
from .model import (Model, ModelSpec, build_fcn, deserialize_weights, load_weights,
                    replace_classifier, serialize_weights)

__all__ = [
    "TrainConfig",
    "AdamState",
    "LossHistory",
    "TrainResult",
    "SweepReport",
    "adam_step",
    "augment",
    "flip_horizontal",
    "flip_vertical",
    "rotate90",
    "split_train_val",
    "train",
    "sweep",
    "serialize_weights",
    "SWEEP_CSV_HEADER",
]


@dataclass(frozen=True)
class TrainConfig:
    """Every training knob: optimizer, duration, scaling, augmentation."""

    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 1
    seed: int = 0
    scale_factor: float = 1.0
    augment: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 < self.scale_factor <= 1.0:
            raise ValueError("scale_factor must lie in (0, 1]")

    def echo(self) -> list[str]:
        return [f"{k} = {getattr(self, k)}" for k in (
            "learning_rate", "epochs", "batch_size", "seed", "scale_factor",
            "augment", "adam_beta1", "adam_beta2", "adam_eps")]


class AdamState:
    """First/second moment buffers per parameter plus the step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0


def adam_step(params: dict[str, Tensor], state: AdamState, config: TrainConfig) -> None:
    """One Adam update with bias correction; gradients are consumed and
    zeroed. Non-finite gradients abort with the parameter's name."""
    state.t += 1
    b1, b2, eps, lr = (config.adam_beta1, config.adam_beta2,
                       config.adam_eps, config.learning_rate)
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.zero_grad()


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def flip_horizontal(pair: SamplePair) -> SamplePair:
    return SamplePair(pair.id, GrayImage(np.fliplr(pair.image.pixels).copy()),
                      LabelMask(np.fliplr(pair.mask.labels).copy()))


def flip_vertical(pair: SamplePair) -> SamplePair:
    return SamplePair(pair.id, GrayImage(np.flipud(pair.image.pixels).copy()),
                      LabelMask(np.flipud(pair.mask.labels).copy()))


def rotate90(pair: SamplePair, k: int) -> SamplePair:
    return SamplePair(pair.id, GrayImage(np.rot90(pair.image.pixels, k).copy()),
                      LabelMask(np.rot90(pair.mask.labels, k).copy()))


def augment(pair: SamplePair, rng: np.random.Generator) -> SamplePair:
    """Lossless flip/rotate: horizontal flip (p=0.5), vertical flip (p=0.5),
    then rotation by k*90 degrees (k uniform in 0..3), identical on image
    and mask. Draw order is fixed: hflip, vflip, k."""
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(0, 4))
    out = pair
    if hflip:
        out = flip_horizontal(out)
    if vflip:
        out = flip_vertical(out)
    if k:
        out = rotate90(out, k)
    return out


def split_train_val(pairs: list[SamplePair]) -> tuple[list[SamplePair], list[SamplePair]]:
    """Deterministic half/half split: sort by id, even positions train, odd
    positions validation (training keeps the extra pair on odd counts)."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs to split")
    ordered = sorted(pairs, key=lambda p: p.id)
    return ordered[0::2], ordered[1::2]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class LossHistory:
    """Per-epoch (train loss, validation loss)."""

    rows: list[tuple[float, float]] = field(default_factory=list)

    def append(self, train_loss: float, val_loss: float) -> None:
        self.rows.append((float(train_loss), float(val_loss)))

    def __len__(self) -> int:
        return len(self.rows)

    def train_losses(self) -> list[float]:
        return [r[0] for r in self.rows]

    def val_losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(self.rows):
                w.writerow([i, repr(tr), repr(va)])


@dataclass
class TrainResult:
    model: Model
    history: LossHistory
    checkpoints: dict[str, object]  # "final"/"best" -> Path (on disk) or bytes
    best_epoch: int
    best_val_loss: float


def _sample_loss(model: Model, pair: SamplePair, num_classes: int,
                 rng: np.random.Generator | None):
    x = to_model_input(pair.image, dtype=model.dtype)
    targets = to_onehot(pair.mask, num_classes, dtype=model.dtype)
    out = model.forward(x, rng=rng)
    return ad.bce_with_logits(out, targets)


def train(pairs: list[SamplePair], spec: ModelSpec, config: TrainConfig,
          initial_weights=None, out_dir=None) -> TrainResult:
    """Run the full protocol: augment -> scale -> forward -> BCE -> backward
    -> Adam per sample (batch size 1 means one step per sample), then a
    no-update validation pass per epoch. Saves final and best-validation
    weights (files under ``out_dir`` when given, in-memory bytes otherwise).
    """
    for p in pairs:
        if p.mask.labels.max(initial=0) >= spec.num_classes:
            raise ValueError(f"pair {p.id!r} has labels >= num_classes={spec.num_classes}")

    seed = config.seed
    init_rng = np.random.default_rng((seed, 0))
    if initial_weights is not None:
        model = load_weights(initial_weights, spec=spec, strict=False)
        if model.spec.num_classes != spec.num_classes:
            replace_classifier(model, spec.num_classes, init_rng)
    else:
        model = build_fcn(spec, init_rng)

    train_pairs, val_pairs = split_train_val(pairs)
    if not train_pairs or not val_pairs:
        raise ValueError("empty train or validation split")

    adam = AdamState(model.named_parameters())
    history = LossHistory()
    best_val = np.inf
    best_epoch = -1
    best_blob: bytes | None = None
    params = model.named_parameters()

    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng((seed, 1, epoch)).permutation(len(train_pairs))
        epoch_losses = []
        since_step = 0
        for pos, idx in enumerate(order):
            pair = train_pairs[int(idx)]
            if config.augment:
                pair = augment(pair, np.random.default_rng((seed, 2, epoch, int(idx))))
            pair = downscale_pair(pair, config.scale_factor)
            loss = _sample_loss(model, pair, spec.num_classes,
                                np.random.default_rng((seed, 3, epoch, int(idx))))
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, "
                                     f"sample {pair.id!r}")
            ad.backward(loss)
            epoch_losses.append(value)
            since_step += 1
            if since_step == config.batch_size or pos == len(order) - 1:
                adam_step(params, adam, config)
                since_step = 0

        model.eval()
        val_losses = []
        with ad.no_grad():
            for pair in val_pairs:
                scaled = downscale_pair(pair, config.scale_factor)
                loss = _sample_loss(model, scaled, spec.num_classes, None)
                val_losses.append(float(loss.data))
        val_loss = float(np.mean(val_losses))
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.append(float(np.mean(epoch_losses)), val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_blob = serialize_weights(model)

    final_blob = serialize_weights(model)
    checkpoints: dict[str, object]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        final_path = out / "final.fcnw"
        best_path = out / "best.fcnw"
        final_path.write_bytes(final_blob)
        best_path.write_bytes(best_blob)
        _write_checkpoint_meta(final_path, config, config.epochs - 1,
                               history.val_losses()[-1])
        _write_checkpoint_meta(best_path, config, best_epoch, best_val)
        history.to_csv(out / "history.csv")
        checkpoints = {"final": final_path, "best": best_path}
    else:
        checkpoints = {"final": final_blob, "best": best_blob}
    return TrainResult(model, history, checkpoints, best_epoch, best_val)


def _write_checkpoint_meta(weights_path: Path, config: TrainConfig, epoch: int,
                           val_loss: float) -> None:
    lines = config.echo() + [f"epoch = {epoch}", f"val_loss = {val_loss!r}"]
    Path(str(weights_path) + ".meta").write_text("\n".join(lines) + "\n",
                                                 encoding="utf-8")


# ---------------------------------------------------------------------------
# Sweep harness
# ---------------------------------------------------------------------------

SWEEP_CSV_HEADER = ["level", "replicate", "image", "class_index", "class_name",
                    "tp", "fp", "tn", "fn", "accuracy", "precision", "recall", "f1"]


@dataclass
class SweepRow:
    level: int
    replicate: int
    metrics: MetricRow


@dataclass
class SummaryRow:
    level: int
    class_index: int
    class_name: str
    metric: str
    mean: float
    ci_low: float
    ci_high: float


@dataclass
class SweepReport:
    """Per-model metric rows for final and best-validation weights, plus
    mean / 95% CI summaries over replicates (pooled rows only)."""

    axis: str
    final_rows: list[SweepRow]
    best_rows: list[SweepRow]

    def summary(self, which: str = "final") -> list[SummaryRow]:
        rows = self.final_rows if which == "final" else self.best_rows
        pooled = [r for r in rows if r.metrics.image == "ALL"]
        out: list[SummaryRow] = []
        levels = sorted({r.level for r in pooled})
        classes = sorted({r.metrics.class_index for r in pooled})
        for level in levels:
            for c in classes:
                sel = [r.metrics for r in pooled
                       if r.level == level and r.metrics.class_index == c]
                name = sel[0].class_name
                for metric in ("accuracy", "precision", "recall", "f1"):
                    vals = np.array([getattr(m, metric) for m in sel], dtype=np.float64)
                    mean = float(vals.mean())
                    if len(vals) > 1:
                        half = 1.96 * float(vals.std(ddof=1)) / np.sqrt(len(vals))
                    else:
                        half = 0.0
                    out.append(SummaryRow(level, c, name, metric, mean,
                                          mean - half, mean + half))
        return out

    def to_csv(self, path, which: str = "final") -> None:
        rows = self.final_rows if which == "final" else self.best_rows
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_CSV_HEADER)
            for r in rows:
                m = r.metrics
                w.writerow([r.level, r.replicate, m.image, m.class_index, m.class_name,
                            m.tp, m.fp, m.tn, m.fn, repr(m.accuracy), repr(m.precision),
                            repr(m.recall), repr(m.f1)])

    def summary_to_csv(self, path, which: str = "final") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "class_index", "class_name", "metric",
                        "mean", "ci_low", "ci_high"])
            for s in self.summary(which):
                w.writerow([s.level, s.class_index, s.class_name, s.metric,
                            repr(s.mean), repr(s.ci_low), repr(s.ci_high)])


def _derived_seed(base_seed: int, level: int, replicate: int) -> int:
    return int(np.random.SeedSequence([base_seed, level, replicate]).generate_state(1)[0])


def sweep(groups: dict[str, list[SamplePair]], spec: ModelSpec, config: TrainConfig,
          test_pairs: list[SamplePair], cmap: ClassMap, axis: str,
          levels: list[int], replicates: int = 10,
          initial_weights=None) -> SweepReport:
    """Train ``replicates`` models per level and score each on the held-out
    test pairs.

    ``axis='leaves'`` levels are counts of annotation groups (scans) whose
    pairs form the training pool; ``axis='epochs'`` levels are epoch budgets
    over all groups. Each (level, replicate) gets its own derived seed.
    """
    if axis not in ("leaves", "epochs"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    group_ids = sorted(groups)
    if axis == "leaves":
        for lv in levels:
            if lv < 1 or lv > len(group_ids):
                raise DataError(f"level {lv} exceeds available groups ({len(group_ids)})")
    final_rows: list[SweepRow] = []
    best_rows: list[SweepRow] = []
    for level in levels:
        if axis == "leaves":
            pool = [p for gid in group_ids[:level] for p in groups[gid]]
            epochs = config.epochs
        else:
            pool = [p for gid in group_ids for p in groups[gid]]
            epochs = level
        for rep in range(replicates):
            cfg = replace(config, epochs=epochs,
                          seed=_derived_seed(config.seed, level, rep))
            result = train(pool, spec, cfg, initial_weights=initial_weights)
            report = evaluate(result.model, test_pairs, cmap,
                              scale_factor=config.scale_factor)
            final_rows.extend(SweepRow(level, rep, m) for m in report.rows)
            best_model = _model_from_blob(result.checkpoints["best"], spec)
            report_b = evaluate(best_model, test_pairs, cmap,
                                scale_factor=config.scale_factor)
            best_rows.extend(SweepRow(level, rep, m) for m in report_b.rows)
    return SweepReport(axis, final_rows, best_rows)


def _model_from_blob(blob, spec: ModelSpec) -> Model:
    if isinstance(blob, (str, Path)):
        return load_weights(blob, spec=spec)
    return deserialize_weights(blob, spec=spec)
