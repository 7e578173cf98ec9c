"""Command-line entry point binding the pipeline stages together:
annotation composition, training, prediction, evaluation, and extraction.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 numerical
failure. Every run echoes its resolved configuration to stdout (and to a
run log when an output directory is involved) before doing any work. A
plain-text config file of ``key = value`` lines can pre-populate any flag;
explicit flags win.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .data import (ClassMap, load_gray, list_image_files, load_pairs, overlay_air_values,
                   downscale_image, downscale_mask, save_gray, GrayImage, LabelMask)
from .errors import DataError, NumericalError
from .gradcheck import THRESHOLD, run_suite
from .metrics import evaluate
from .model import ModelSpec, build_fcn, load_weights, summarize
from .training import TrainConfig, sweep, train
from .volume import (load_slices, predict_slices, save_slices, slice_stats, stack,
                     write_rawvol, write_stats_csv)

ENV_JOBS = "MICROCT_SEG_JOBS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_jobs() -> int:
    raw = os.environ.get(ENV_JOBS, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parse_blocks(text: str) -> tuple[int, int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"--blocks expects 4 comma-separated integers, got {text!r}")
    if len(parts) != 4:
        raise UsageError(f"--blocks expects 4 comma-separated integers, got {text!r}")
    return parts


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"--input expects HxW (e.g. 1000x500), got {text!r}")


def _parse_levels(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"--levels expects comma-separated integers, got {text!r}")


def _spec_from_args(args, num_classes: int) -> ModelSpec:
    return ModelSpec(num_classes=num_classes,
                     block_counts=_parse_blocks(args.blocks),
                     base_width=args.base_width)


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--blocks", default="3,4,23,3",
                   help="per-stage bottleneck counts (default: 3,4,23,3)")
    p.add_argument("--base-width", type=int, default=64,
                   help="stem width; stages use 1/2/4/8x this (default: 64)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=200, help="training epochs (default: 200)")
    p.add_argument("--lr", type=float, default=0.001, help="Adam learning rate (default: 0.001)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    p.add_argument("--scale", type=float, default=1.0,
                   help="downscale factor applied to images and masks (default: 1.0)")
    p.add_argument("--no-augment", action="store_true",
                   help="disable flip/rotate augmentation")
    p.add_argument("--init", default=None, metavar="WEIGHTS",
                   help="start from a saved weight file")


def _build_parser() -> _Parser:
    parser = _Parser(prog="microct-seg",
                     description="Train, run, and analyze a from-scratch FCN "
                                 "segmenter for micro-CT slice stacks.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="plain-text 'key = value' file pre-populating flags")
    common.add_argument("--run-log", default=None,
                        help="also write the resolved configuration to this file")
    common.add_argument("--jobs", type=int, default=None,
                        help=f"parallel workers (default: ${ENV_JOBS} or 1)")

    p = sub.add_parser("summarize", parents=[common],
                       help="print the per-layer shape/parameter table")
    p.add_argument("--classes", type=int, required=True, help="number of pixel classes")
    _add_spec_flags(p)
    p.add_argument("--input", default="1000x500", help="input size HxW (default: 1000x500)")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("train", parents=[common], help="train a model on image/mask pairs")
    p.add_argument("--images", required=True, help="directory of training images")
    p.add_argument("--masks", required=True, help="directory of gray-coded masks")
    p.add_argument("--classmap", required=True, help="class map file")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    _add_spec_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", parents=[common],
                       help="train replicate models across leaf-count or epoch levels")
    p.add_argument("--axis", required=True, choices=("leaves", "epochs"))
    p.add_argument("--levels", required=True, help="comma-separated level values")
    p.add_argument("--replicates", type=int, default=10)
    p.add_argument("--images", required=True, help="training image directory")
    p.add_argument("--masks", required=True, help="training mask directory")
    p.add_argument("--test-images", required=True, help="held-out test image directory")
    p.add_argument("--test-masks", required=True, help="held-out test mask directory")
    p.add_argument("--classmap", required=True)
    p.add_argument("--out", required=True, help="output directory for report CSVs")
    _add_spec_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("predict", parents=[common],
                       help="segment a slice directory into per-class binary PGMs")
    p.add_argument("--model", required=True, help="weight file")
    p.add_argument("--images", required=True, help="directory of slices, name order")
    p.add_argument("--classmap", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a model against annotated masks")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--classmap", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compose-mask", parents=[common],
                       help="overlay a binary air layer onto a gray-coded mask")
    p.add_argument("--base", required=True, help="gray-coded tissue mask")
    p.add_argument("--air", required=True, help="strictly binary {0,255} air image")
    p.add_argument("--air-class", type=int, required=True,
                   help="gray value written where the air layer is 255")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compose_mask)

    p = sub.add_parser("downscale", parents=[common],
                       help="rescale a directory of images or masks")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--factor", type=float, required=True)
    p.add_argument("--kind", required=True, choices=("image", "mask"),
                   help="images resample bilinearly, masks nearest-neighbor")
    p.set_defaults(func=_cmd_downscale)

    p = sub.add_parser("stack", parents=[common],
                       help="stack one class's binary slices into a raw volume")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="directory of <class>_<order>.pgm slices")
    p.add_argument("--out", required=True, help="output .rawvol path")
    p.add_argument("--class", dest="class_name", required=True, metavar="NAME")
    p.set_defaults(func=_cmd_stack)

    p = sub.add_parser("stats", parents=[common],
                       help="area/perimeter stats for predicted binary slices")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--classmap", required=True)
    p.add_argument("--out", required=True, help="stats CSV path")
    p.add_argument("--pixel-size", type=float, default=None)
    p.add_argument("--unit", default="px")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every operator")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


# ---------------------------------------------------------------------------
# Config file and run-log plumbing
# ---------------------------------------------------------------------------

def _read_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{p}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


_TRUE_WORDS = ("1", "true", "yes", "on")
_BOOL_FLAGS = {"no_augment"}


def _inject_config(argv: list[str]) -> list[str]:
    """Translate --config file entries into argv tokens placed before the
    user's flags, so explicitly given flags take precedence."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise UsageError("--config requires a file path")
    path = argv[i + 1]
    rest = argv[:i] + argv[i + 2:]
    if not rest:
        raise UsageError("--config requires a subcommand")
    entries = _read_config_file(path)
    injected: list[str] = []
    for key, value in entries.items():
        flag = "--" + key.replace("_", "-")
        if key in _BOOL_FLAGS:
            if value.lower() in _TRUE_WORDS:
                injected.append(flag)
        else:
            injected.extend([flag, value])
    return [rest[0]] + injected + rest[1:]


def _echo_config(args, extra_log: Path | None = None) -> None:
    skip = {"func", "config", "run_log"}
    lines = [f"{k} = {v}" for k, v in sorted(vars(args).items()) if k not in skip]
    text = "\n".join(lines)
    print(text)
    print("---")
    destinations = []
    if args.run_log:
        destinations.append(Path(args.run_log))
    if extra_log is not None:
        destinations.append(extra_log)
    for dest in destinations:
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(text + "\n", encoding="utf-8")


def _jobs(args) -> int:
    return args.jobs if args.jobs else _default_jobs()


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_summarize(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    _echo_config(args)
    h, w = _parse_hw(args.input)
    spec = _spec_from_args(args, args.classes)
    model = build_fcn(spec, np.random.default_rng(0))
    print(summarize(model, h, w).render())
    return 0


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed,
                           scale_factor=args.scale, augment=not args.no_augment)
    except ValueError as exc:
        raise UsageError(str(exc))


def _cmd_train(args) -> int:
    out = Path(args.out)
    _echo_config(args, extra_log=out / "run.log")
    cmap = ClassMap.from_file(args.classmap)
    pairs = load_pairs(args.images, args.masks, cmap)
    spec = _spec_from_args(args, cmap.num_classes)
    config = _train_config(args)
    result = train(pairs, spec, config, initial_weights=args.init, out_dir=out)
    print(f"trained {config.epochs} epochs on {len(pairs)} pairs")
    print(f"final train loss {result.history.train_losses()[-1]:.6f}, "
          f"val loss {result.history.val_losses()[-1]:.6f}")
    print(f"best val loss {result.best_val_loss:.6f} at epoch {result.best_epoch}")
    for name, path in result.checkpoints.items():
        print(f"checkpoint {name}: {path}")
    return 0


def _group_by_scan(pairs):
    """Group training pairs by scan id: the stem up to the first '_'."""
    groups: dict[str, list] = {}
    for p in pairs:
        gid = p.id.split("_", 1)[0]
        groups.setdefault(gid, []).append(p)
    return groups


def _cmd_sweep(args) -> int:
    out = Path(args.out)
    _echo_config(args, extra_log=out / "run.log")
    cmap = ClassMap.from_file(args.classmap)
    pairs = load_pairs(args.images, args.masks, cmap)
    test_pairs = load_pairs(args.test_images, args.test_masks, cmap)
    spec = _spec_from_args(args, cmap.num_classes)
    config = _train_config(args)
    levels = _parse_levels(args.levels)
    if args.replicates < 1:
        raise UsageError("--replicates must be at least 1")
    report = sweep(_group_by_scan(pairs), spec, config, test_pairs, cmap,
                   axis=args.axis, levels=levels, replicates=args.replicates,
                   initial_weights=args.init)
    out.mkdir(parents=True, exist_ok=True)
    for which in ("final", "best"):
        report.to_csv(out / f"sweep_{which}.csv", which=which)
        report.summary_to_csv(out / f"sweep_{which}_summary.csv", which=which)
    print(f"swept {args.axis} levels {levels} x {args.replicates} replicates; "
          f"reports in {out}")
    return 0


def _cmd_predict(args) -> int:
    out = Path(args.out)
    _echo_config(args, extra_log=out / "run.log")
    cmap = ClassMap.from_file(args.classmap)
    model = load_weights(args.model)
    if model.spec.num_classes != cmap.num_classes:
        raise DataError(f"model has {model.spec.num_classes} classes but class map "
                        f"has {cmap.num_classes}")
    images = [load_gray(p) for p in list_image_files(args.images)]
    per_class = predict_slices(model, images, cmap, scale=args.scale, jobs=_jobs(args))
    for c, slices in per_class.items():
        save_slices(slices, cmap.name_of(c), out)
    print(f"wrote {len(images)} slices x {cmap.num_classes} classes to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    _echo_config(args)
    cmap = ClassMap.from_file(args.classmap)
    model = load_weights(args.model)
    if model.spec.num_classes != cmap.num_classes:
        raise DataError(f"model has {model.spec.num_classes} classes but class map "
                        f"has {cmap.num_classes}")
    pairs = load_pairs(args.images, args.masks, cmap)
    report = evaluate(model, pairs, cmap, scale_factor=args.scale, jobs=_jobs(args))
    report.to_csv(args.out)
    for row in report.pooled():
        print(f"ALL {row.class_name}: accuracy={row.accuracy:.4f} "
              f"precision={row.precision:.4f} recall={row.recall:.4f} f1={row.f1:.4f}")
    print(f"metrics written to {args.out}")
    return 0


def _cmd_compose_mask(args) -> int:
    _echo_config(args)
    base = load_gray(args.base)
    air = load_gray(args.air)
    if not 0 <= args.air_class <= 255:
        raise UsageError("--air-class must be a gray value in [0, 255]")
    save_gray(overlay_air_values(base, air, args.air_class), args.out)
    print(f"composed mask written to {args.out}")
    return 0


def _cmd_downscale(args) -> int:
    _echo_config(args)
    if not 0.0 < args.factor <= 1.0:
        raise UsageError("--factor must lie in (0, 1]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = list_image_files(args.in_dir)
    for path in files:
        img = load_gray(path)
        if args.kind == "image":
            scaled = downscale_image(img, args.factor)
        else:
            labels = downscale_mask(LabelMask(img.pixels.astype(np.int64)), args.factor)
            scaled = GrayImage(labels.labels.astype(np.uint8))
        save_gray(scaled, out / path.name)
    print(f"rescaled {len(files)} files into {out}")
    return 0


def _cmd_stack(args) -> int:
    _echo_config(args)
    slices = load_slices(args.in_dir, args.class_name)
    vol, manifest = stack(slices, args.class_name)
    write_rawvol(vol, args.out)
    manifest_path = Path(str(args.out) + ".manifest")
    manifest_path.write_text(manifest, encoding="utf-8")
    w, h, d = vol.dims
    print(f"stacked {d} slices ({w}x{h}) into {args.out}; manifest {manifest_path}")
    return 0


def _cmd_stats(args) -> int:
    _echo_config(args)
    cmap = ClassMap.from_file(args.classmap)
    per_class = {}
    for entry in cmap.entries:
        per_class[entry.class_index] = load_slices(args.in_dir, entry.class_name,
                                                   entry.class_index)
    rows = slice_stats(per_class, cmap, pixel_size=args.pixel_size, unit=args.unit)
    write_stats_csv(rows, args.out)
    print(f"stats for {len(per_class)} classes written to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    _echo_config(args)
    results = run_suite(seed=args.seed)
    worst = 0.0
    for r in results:
        print(f"{r.name:24s} max rel err {r.max_rel_err:.3e}")
        worst = max(worst, r.max_rel_err)
    print(f"max relative error: {worst:.6e}")
    if not worst < THRESHOLD:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {THRESHOLD}")
    print(f"gradcheck passed (threshold {THRESHOLD})")
    return 0


# ---------------------------------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = _build_parser()
    try:
        argv = _inject_config(list(argv))
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        return args.func(args)
    except SystemExit as exc:  # --help exits here with code 0
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
