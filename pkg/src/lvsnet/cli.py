"""``lvsnet`` command line: prepare / train / evaluate / ablate / audit / overlay / roc.

Outputs go under ``--out-dir``::

    out-dir/checkpoints/  weight checkpoints (.npz)
    out-dir/metrics/      per-image and aggregate CSV records
    out-dir/overlays/     TP/FP/FN colour overlays (.png)
    out-dir/roc/          ROC plot-data CSV and the rendered figure
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .audit import REFERENCE_GFLOPS, REFERENCE_MB, REFERENCE_PARAMS, audit_complexity
from .config import ModelConfig, TrainConfig, load_config_file
from .data import (
    AugmentationPlan,
    DataError,
    Dataset,
    discover,
    iter_augment,
    load_pair,
    split,
)

log = logging.getLogger("lvsnet")


def _threshold(value: str):
    if value == "f1":
        return value
    if value.startswith("fixed:"):
        float(value.split(":", 1)[1])
        return value
    raise argparse.ArgumentTypeError("threshold must be 'f1' or 'fixed:<value>'")


def _floats(value: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lvsnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{prepare,train,evaluate,ablate,audit,overlay,roc}")

    def data_args(sp, required=True):
        sp.add_argument("--dataset", required=required, type=Dataset.parse)
        sp.add_argument("--root", required=required, type=Path)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", type=Path, default=Path("runs"))

    def aug_args(sp):
        sp.add_argument("--pool-size", type=int, default=720)
        sp.add_argument("--contrast-factors", type=_floats, default=(0.8, 1.2))

    sp = sub.add_parser("prepare", help="index a dataset, write its manifest and the augmented pool")
    data_args(sp)
    aug_args(sp)
    sp.add_argument("--synthetic", action="store_true", help="first write a synthetic copy of the layout to --root")

    for name, helptext in (("train", "train a model"), ("ablate", "train and compare ablation rows")):
        sp = sub.add_parser(name, help=helptext)
        data_args(sp)
        aug_args(sp)
        sp.add_argument("--config", default="default")
        sp.add_argument("--augment", action="store_true", help="train on the augmented pool")
        sp.add_argument("--limit", type=int, default=0, help="use only the first N base images")
        sp.add_argument("--epochs", type=int)
        if name == "train":
            sp.add_argument("--resume", type=Path)
        else:
            sp.add_argument("--rows", default="LU,Full", help="comma-separated ablation row labels")

    sp = sub.add_parser("evaluate", help="score a checkpoint on held-out data")
    data_args(sp)
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--threshold", type=_threshold, default="f1")
    sp.add_argument("--fov", action="store_true", help="count only pixels inside the FOV mask")
    sp.add_argument("--limit", type=int, default=0)

    sp = sub.add_parser("audit", help="parameter / FLOP / size audit")
    sp.add_argument("--config", default="default")
    sp.add_argument("--layers", action="store_true", help="also print the per-layer table")

    sp = sub.add_parser("overlay", help="render a TP/FP/FN overlay from two masks")
    sp.add_argument("--pred", required=True, type=Path)
    sp.add_argument("--truth", required=True, type=Path)
    sp.add_argument("--base", type=Path)
    sp.add_argument("--black", action="store_true", help="black true-negative background")
    sp.add_argument("--out", type=Path, default=Path("overlay.png"))

    sp = sub.add_parser("roc", help="ROC plot-data and figure from score maps")
    sp.add_argument(
        "--curve", nargs=3, action="append", required=True, metavar=("LABEL", "SCORES", "TRUTH"),
        help="score map (.npy or image) and truth mask; repeatable",
    )
    sp.add_argument("--out-dir", type=Path, default=Path("runs"))
    return p


# -- helpers ------------------------------------------------------------------

def _read_map(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return arr / 255.0


def _read_mask(path: Path) -> np.ndarray:
    return _read_map(path) > 0.5


def _load_splits(args):
    """(train pairs, validation pairs, test pairs) for a dataset root.

    DRIVE and RITE keep their official test split; the training side is
    split 80/20 by base image.  Split-free datasets are split 80/20 and the
    validation side doubles as the test set.
    """
    manifest = discover(args.root, args.dataset)
    train_entries = manifest.by_split("train") or manifest.by_split("all")
    test_entries = manifest.by_split("test")
    if getattr(args, "limit", 0):
        train_entries = train_entries[: args.limit]
        test_entries = test_entries[: args.limit]
    base = [load_pair(e) for e in train_entries]
    pool = base
    if getattr(args, "augment", False):
        plan = AugmentationPlan(contrast_factors=args.contrast_factors, target_pool_size=args.pool_size)
        pool = list(iter_augment(base, plan, args.seed))
    tr, va = split(pool, 0.8, args.seed)
    te = [load_pair(e) for e in test_entries] if test_entries else va
    return tr, va, te


def _test_pairs(args):
    """Held-out pairs without building a validation split."""
    entries = discover(args.root, args.dataset).by_split("test")
    if not entries:
        return _load_splits(args)[2]
    if args.limit:
        entries = entries[: args.limit]
    return [load_pair(e) for e in entries]


def _configs(args) -> Tuple[ModelConfig, TrainConfig]:
    cfg, tc = load_config_file(args.config)
    if getattr(args, "dataset", None) is not None:
        cfg = cfg.replace(num_classes=3 if args.dataset.multiclass else cfg.num_classes, seed=args.seed)
    if getattr(args, "epochs", None):
        tc = TrainConfig.from_dict({**tc.to_dict(), "epochs": args.epochs})
    return cfg, TrainConfig.from_dict({**tc.to_dict(), "seed": args.seed})


# -- subcommands --------------------------------------------------------------

def cmd_prepare(args) -> int:
    if args.synthetic:
        from .synthetic import write_layout

        write_layout(args.root, args.dataset, seed=args.seed)
    manifest = discover(args.root, args.dataset)
    out = args.out_dir
    manifest.write(out / "manifest.csv")
    base_entries = manifest.by_split("train") or manifest.by_split("all")
    base = [load_pair(e) for e in base_entries]
    plan = AugmentationPlan(contrast_factors=args.contrast_factors, target_pool_size=args.pool_size)
    pool_dir = out / "pool"
    pool_dir.mkdir(parents=True, exist_ok=True)
    train_ids = {p.base_id for p in split(base, 0.8, args.seed)[0]}
    scale = 1 if args.dataset.multiclass else 255
    n = 0
    with open(out / "pool.csv", "w") as fh:
        fh.write("id,base_id,variant,split,image_path,mask_path\n")
        for pair in iter_augment(base, plan, args.seed):
            img_path = pool_dir / f"{pair.id}.png"
            mask_path = pool_dir / f"{pair.id}_mask.png"
            Image.fromarray(pair.image).save(img_path)
            Image.fromarray((pair.mask * scale).astype(np.uint8)).save(mask_path)
            tag = "train" if pair.base_id in train_ids else "val"
            fh.write(f"{pair.id},{pair.base_id},{pair.variant},{tag},{img_path},{mask_path}\n")
            n += 1
    print(f"{manifest.dataset.value}: {len(manifest.entries)} samples at {manifest.native_resolution}; "
          f"{n} augmented pairs -> {out / 'pool.csv'}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_training
    from .training import Split, train

    cfg, tc = _configs(args)
    tr, va, _ = _load_splits(args)
    size = (cfg.input_height, cfg.input_width)
    record = train(
        cfg, Split.from_pairs(tr, size, cfg.num_classes), Split.from_pairs(va, size, cfg.num_classes),
        tc, out_dir=args.out_dir, resume=args.resume,
    )
    plot_training(record.epochs, args.out_dir / "training.png")
    print(f"best epoch {record.best_epoch}: validation dice {record.best_val_dice:.4f} "
          f"at threshold {record.best_threshold:.4f}; checkpoint {record.best_checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    from .checkpoint import load_checkpoint
    from .plotting import plot_roc
    from .reports import export_roc, read_roc, render_overlay, write_metric_records
    from .training import Split, evaluate, predict

    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    size = (cfg.input_height, cfg.input_width)
    if args.threshold == "f1":
        _, va, te = _load_splits(args)
        val = Split.from_pairs(va, size, cfg.num_classes)
    else:
        te, val = _test_pairs(args), None
    test = Split.from_pairs(te, size, cfg.num_classes)
    out = args.out_dir
    result = evaluate(model, test, args.threshold, val, use_fov=args.fov)
    if cfg.num_classes > 1:
        rows = []
        for i, rep in result:
            for name, r in rep.per_class.items():
                rows.append((f"{i}:{name}", r))
            rows.append((f"{i}:average", rep.average_with_background))
            rows.append((f"{i}:average-no-bg", rep.average_without_background))
        write_metric_records(rows, out / "metrics" / "per_image.csv")
        print(f"wrote {len(result)} multi-class reports to {out / 'metrics'}")
        return 0
    write_metric_records(result.per_image, out / "metrics" / "per_image.csv")
    write_metric_records(
        [("mean-per-image", result.aggregate), ("pooled", result.pooled)], out / "metrics" / "aggregate.csv"
    )
    export_roc([(args.dataset.value, result.roc)], out / "roc" / "roc.csv")
    plot_roc(read_roc(out / "roc" / "roc.csv"), out / "roc" / "roc.png", title=args.dataset.value)
    probs = predict(model, test.images)
    for i, p, m, img in zip(test.ids, probs, test.masks, test.images):
        rgb = (img.numpy().transpose(1, 2, 0) * 255).round().astype(np.uint8)
        ov = render_overlay(p[0].numpy() >= result.threshold, m[0].numpy() > 0.5, rgb)
        (out / "overlays").mkdir(parents=True, exist_ok=True)
        Image.fromarray(ov).save(out / "overlays" / f"{i}.png")
    a = result.aggregate
    print(f"threshold {result.threshold:.4f}  Acc {a.accuracy:.4f}  Dice {a.dice:.4f}  J {a.jaccard:.4f}  "
          f"Sn {a.sensitivity:.4f}  Sp {a.specificity:.4f}  AUC {result.auc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation
    from .reports import write_metric_records
    from .training import ABLATION_COLUMNS, Split, run_ablation

    cfg, tc = _configs(args)
    tr, va, te = _load_splits(args)
    size = (cfg.input_height, cfg.input_width)
    mk = lambda pairs: Split.from_pairs(pairs, size, cfg.num_classes)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    table = run_ablation(rows, cfg, mk(tr), mk(va), tc, mk(te))
    write_metric_records(table, args.out_dir / "metrics" / "ablation.csv", columns=ABLATION_COLUMNS)
    plot_ablation([(r, m.as_row()) for r, m in table], args.out_dir / "ablation.png")
    print(format_ablation(table))
    return 0


def format_ablation(table) -> str:
    from .training import ABLATION_COLUMNS

    width = max(len(r) for r, _ in table) + 2
    lines = ["Method".ljust(width) + "".join(c.rjust(8) for c in ABLATION_COLUMNS)]
    for row, rep in table:
        vals = rep.as_row()
        lines.append(row.ljust(width) + "".join(f"{100 * vals[c]:8.2f}" for c in ABLATION_COLUMNS))
    return "\n".join(lines)


def format_audit(cfg: ModelConfig, layers: bool = False) -> str:
    a = audit_complexity(cfg)
    lines = [
        f"{'':<12}{'measured':>14}{'reported':>12}{'ratio':>8}",
        f"{'params (M)':<12}{a.parameter_count / 1e6:>14.4f}{REFERENCE_PARAMS / 1e6:>12.2f}{a.parameter_count / REFERENCE_PARAMS:>8.3f}",
        f"{'GFLOPs':<12}{a.gflops:>14.2f}{REFERENCE_GFLOPS:>12.2f}{a.gflops / REFERENCE_GFLOPS:>8.3f}",
        f"{'size (MB)':<12}{a.megabytes:>14.3f}{REFERENCE_MB:>12.2f}{a.megabytes / REFERENCE_MB:>8.3f}",
        f"input {cfg.input_height}x{cfg.input_width}x{cfg.input_channels}; "
        f"conv {a.conv_flops / 1e9:.2f} G + elementwise {a.elementwise_flops / 1e9:.2f} G; "
        f"parameter_count={a.parameter_count}",
    ]
    if layers:
        lines.append("")
        for rec in a.layers:
            lines.append(f"{rec.name:<28}{rec.kind:<6}{rec.params:>10}{rec.macs:>16}")
    return "\n".join(lines)


def cmd_audit(args) -> int:
    cfg, _ = load_config_file(args.config)
    print(format_audit(cfg, args.layers))
    return 0


def cmd_overlay(args) -> int:
    from .reports import render_overlay

    pred, truth = _read_mask(args.pred), _read_mask(args.truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    base = np.asarray(Image.open(args.base).convert("RGB")) if args.base and not args.black else None
    args.out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_overlay(pred, truth, base)).save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_roc(args) -> int:
    from .metrics import roc_curve
    from .plotting import plot_roc
    from .reports import export_roc, read_roc

    curves = [(label, roc_curve(_read_map(Path(s)), _read_mask(Path(t)))) for label, s, t in args.curve]
    path = args.out_dir / "roc" / "roc.csv"
    aucs = export_roc(curves, path)
    plot_roc(read_roc(path), args.out_dir / "roc" / "roc.png")
    for label, auc in aucs.items():
        print(f"{label}\tAUC {auc:.6f}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "audit": cmd_audit,
    "overlay": cmd_overlay,
    "roc": cmd_roc,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, DataError, KeyError, OSError) as exc:
        print(f"lvsnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
