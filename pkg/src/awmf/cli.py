"""``awmf`` command line.

Exit codes: 0 success, 2 configuration / geometry / checkpoint-version
problems, 3 missing or malformed data, 4 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .checkpoint import load_bundle, save_bundle
from .config import RunConfig, describe_keys
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    NonFiniteError,
    ShapeError,
)
from .inference import evaluate, expert_agreement, segment_slide
from .metrics import (
    cascade_segment,
    miou,
    op_accuracy,
    pc_accuracy,
    render_mask,
    write_agreement_report,
    write_metrics_report,
)
from .pnm import load_image, save_image, save_labels
from .pyramid import (
    Slide,
    class_areas,
    dataset_from_manifest,
    save_slide,
    synth_generate,
    write_manifest,
)
from .trainer import build_bundle, pretrain_experts, run_training, TrainLog

logger = logging.getLogger("awmf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _load_checkpoint(path, cfg: RunConfig, n_classes: int | None = None):
    bundle = load_bundle(path)
    want = cfg["train.n_classes"] if n_classes is None else n_classes
    if bundle.n_classes != want:
        raise ConfigError(f"checkpoint {path} has {bundle.n_classes} classes, expected {want}")
    if bundle.window != cfg["train.window"]:
        raise ConfigError(f"checkpoint {path} uses window {bundle.window}, config says {cfg['train.window']}")
    return bundle


def _dataset(cfg: RunConfig, manifest=None):
    return dataset_from_manifest(manifest or cfg["data.manifest"], cfg["train.window"], cfg.stride,
                                 cfg["data.val_fraction"], cfg["run.seed"])


def _split(dataset, name: str):
    triplets = {"train": dataset.train, "val": dataset.weighting, "test": dataset.test}[name]
    if not triplets:
        raise DataError(f"the {name} split is empty")
    return triplets


# ----------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    synth = cfg.synth_config()
    target = synth.class_ratios()
    out = cfg.out
    (out / "slides").mkdir(parents=True, exist_ok=True)
    ext = "ppm" if synth.color else "pgm"
    entries, areas = [], []
    n_train, n_test = cfg["synth.n_train"], cfg["synth.n_test"]
    for i in range(n_train + n_test):
        slide = synth_generate(synth, seed=[cfg["run.seed"], i], identifier=f"slide_{i:03d}")
        image, labels = f"slides/slide_{i:03d}.{ext}", f"slides/labels_{i:03d}.pgm"
        save_slide(slide, out / image, out / labels)
        entries.append({"slide": image, "labels": labels, "split": "train" if i < n_train else "test"})
        areas.append(class_areas(slide.labels, synth.n_classes))
    write_manifest(out / "manifest.txt", entries)
    measured = np.mean(areas, axis=0)
    print(f"wrote {len(entries)} slides and {out / 'manifest.txt'}")
    print("class  target  measured")
    for c in range(synth.n_classes):
        print(f"{c:>5}  {target[c]:.4f}  {measured[c]:.4f}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    tc = cfg.train_config()
    dataset = _dataset(cfg, args.manifest)
    bundle = pretrain_experts(build_bundle(tc), dataset, tc)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, cfg.out / "pretrained.awmf")
    print(f"wrote {cfg.out / 'pretrained.awmf'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    tc = cfg.train_config()
    dataset = _dataset(cfg, args.manifest)
    bundle = _load_checkpoint(args.init, cfg) if args.init else None
    log = None
    if bundle is not None and bundle.meta.get("epoch", 0) > 0:
        log_path = Path(args.init).parent / "train_log.csv"
        if log_path.is_file():
            log = TrainLog(TrainLog.read_csv(log_path).records[:bundle.meta["epoch"]])
    bundle, log = run_training(tc, dataset, cfg.out, bundle, log)
    last = log[len(log) - 1] if len(log) else {}
    print(f"trained {len(log)} epoch(s); last val mIoU {last.get('val_miou', float('nan')):.4f}")
    return EXIT_OK


def cmd_segment(cfg: RunConfig, args) -> int:
    image = load_image(args.slide)
    slide = Slide(image, np.zeros(image.shape[:2], dtype=np.uint8), Path(args.slide).stem)
    variant = cfg["run.variant"]
    if cfg["run.mode"] == "cascade":
        if not args.two_class_checkpoint:
            raise ConfigError("cascade mode needs --two-class-checkpoint")
        two = _load_checkpoint(args.two_class_checkpoint, cfg, n_classes=2)
        sub = _load_checkpoint(args.checkpoint, cfg)
        labels = cascade_segment(two, sub, slide, variant, cfg["run.subtype_offset"])
    else:
        bundle = _load_checkpoint(args.checkpoint, cfg, 2 if cfg["run.mode"] == "two-class" else None)
        if bundle.in_channels != slide.channels:
            raise ConfigError(f"checkpoint expects {bundle.in_channels} channel(s), slide has {slide.channels}")
        labels = segment_slide(bundle, slide, variant, threads=cfg["run.threads"])
    cfg.out.mkdir(parents=True, exist_ok=True)
    stem = cfg.out / f"{slide.identifier}_mask"
    save_labels(stem.with_suffix(".pgm"), labels)
    save_image(stem.with_suffix(".ppm"), render_mask(labels, cfg.palette))
    print(f"wrote {stem.with_suffix('.pgm')} and {stem.with_suffix('.ppm')}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    bundle = _load_checkpoint(args.checkpoint, cfg)
    triplets = _split(_dataset(cfg, args.manifest), args.split)
    interpolation = bundle.meta.get("interpolation", cfg["train.interpolation"])
    matrices = evaluate(bundle, triplets, interpolation, cfg["train.eval_batch_size"], cfg["run.threads"])
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / f"metrics_{args.split}.csv"
    write_metrics_report(path, matrices)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        print(f"{'model':<9} {'OP':>7} {'PC':>7} {'mIoU':>7}")
        for name, cm in matrices.items():
            print(f"{name:<9} {op_accuracy(cm):7.4f} {pc_accuracy(cm):7.4f} {miou(cm):7.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_agreement(cfg: RunConfig, args) -> int:
    after = _load_checkpoint(args.checkpoint, cfg)
    triplets = _split(_dataset(cfg, args.manifest), args.split)
    tables = {}
    if args.before:
        tables["before"] = expert_agreement(_load_checkpoint(args.before, cfg), triplets)
    tables["after"] = expert_agreement(after, triplets)
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / f"agreement_{args.split}.csv"
    write_agreement_report(path, tables)
    for stage, table in tables.items():
        rates = table.expert_rates
        print(f"{stage}: experts {rates[0]:.4f} {rates[1]:.4f} {rates[2]:.4f}  "
              f"union {table.union_rate:.4f}  intersection {table.intersection_rate:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--threads", type=int, help="overrides run.threads")
    common.add_argument("--out", help="overrides run.out")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    epilog = ("Precedence: built-in defaults < config file < --set < dedicated flags.\n\n" + describe_keys())
    parser = argparse.ArgumentParser(prog="awmf", description="Multi-magnification segmentation with adaptive expert weighting.",
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "write synthetic slides, label maps and a manifest")
    p = add("pretrain", cmd_pretrain, "pre-train the three experts and write pretrained.awmf")
    p.add_argument("--manifest", help="overrides data.manifest")
    p = add("train", cmd_train, "pre-train (unless --init) then run the alternating training loop")
    p.add_argument("--manifest", help="overrides data.manifest")
    p.add_argument("--max-epochs", type=int, help="overrides train.max_epochs")
    p.add_argument("--init", help="start from a pretrained or epoch checkpoint (resumes an epoch checkpoint)")
    p = add("segment", cmd_segment, "segment one slide image into a label PGM and a colour PPM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide", required=True, help="slide image (PGM or PPM)")
    p.add_argument("--two-class-checkpoint", help="first-stage model for run.mode = cascade")
    p = add("eval", cmd_eval, "OP / PC / mIoU for every expert, fixed and adaptive aggregation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="overrides data.manifest")
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    p = add("agreement", cmd_agreement, "per-pixel expert agreement table (before/after)")
    p.add_argument("--checkpoint", required=True, help="checkpoint after end-to-end training")
    p.add_argument("--before", help="checkpoint after pre-training only")
    p.add_argument("--manifest", help="overrides data.manifest")
    p.add_argument("--split", choices=("test", "val", "train"), default="test")
    return parser


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        over[key.strip()] = value.strip()
    over.update({"run.seed": args.seed, "run.threads": args.threads, "run.out": args.out})
    if getattr(args, "max_epochs", None) is not None:
        over["train.max_epochs"] = args.max_epochs
    return over


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.from_sources(args.config, _overrides(args))
        return args.func(cfg, args)
    except (ConfigError, ShapeError, CheckpointError) as exc:
        print(f"awmf: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"awmf: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"awmf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
