"""Command-line interface: ``lesionnet {train,evaluate,predict,ablate,synth}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as data_mod
from .ablate import run_ablation
from .checkpoint import CheckpointError, load_checkpoint, network_from_checkpoint, read_header
from .data import AugmentSpec, SplitSpec, discover_pairs, load_dataset, split_dataset
from .metrics import evaluate_dataset, foreground_mask
from .network import ConfigError, NetworkConfig, build_network
from .plots import plot_history
from .train import TrainConfig, TrainingError, train_loop, write_history

log = logging.getLogger("lesionnet")

DEFAULTS = {
    "train": {"epochs": 100, "input_size": 256, "width_mult": 1.0},
    "ablate": {"epochs": 20, "input_size": 64, "width_mult": 0.25},
}


def on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def ratios(value: str):
    parts = [float(p) for p in value.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios")
    return tuple(parts)


def _common(p, *, model=True, training=True):
    p.add_argument("--data", required=True, help="dataset directory or manifest file")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--suffix", default=data_mod.MASK_SUFFIX, help="mask file suffix")
    p.add_argument("--split", type=ratios, default=(0.6, 0.2, 0.2), help="train,val,test ratios")
    p.add_argument("--threshold", type=float, default=0.5)
    if model:
        p.add_argument("--coordconv", type=on_off, default=True)
        p.add_argument("--coord-scale", type=on_off, default=True)
        p.add_argument("--res-layers", type=int, choices=(2, 3), default=3)
        p.add_argument("--classes", type=int, choices=(2, 3), default=2)
        p.add_argument("--width-mult", type=float, default=None)
        p.add_argument("--input-size", type=int, default=None)
    if training:
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=4)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--loss", choices=("combined", "ce", "dice"), default="combined")
        p.add_argument("--val-every", type=int, default=10)
        p.add_argument("--no-augment", action="store_true", help="disable runtime augmentation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and keep the best validation weights")
    _common(p)
    p.add_argument("--resume", type=Path, help="continue from a last.lnckpt file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    _common(p, model=False, training=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--subset", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write predicted masks for every image")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--suffix", default=data_mod.MASK_SUFFIX)
    p.add_argument("--save-probs", action="store_true", help="also write <id>_prob.png")
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and score the coordconv x depth x loss grid")
    _common(p, training=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic lesion dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suffix", default=data_mod.MASK_SUFFIX)
    p.set_defaults(func=cmd_synth)
    return parser


def resolve_seed(args) -> int:
    env = os.environ.get("LESIONNET_SEED")
    if env is not None and env.strip():
        return int(env)
    return args.seed


def _fill_defaults(args, command):
    for key, value in DEFAULTS[command].items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)


def network_config(args) -> NetworkConfig:
    return NetworkConfig(
        use_coordconv=args.coordconv,
        res_unit_depth=args.res_layers,
        classes=args.classes,
        input_size=(args.input_size, args.input_size),
        coord_scale=args.coord_scale,
        width_multiplier=args.width_mult,
    )


def train_config(args, out) -> TrainConfig:
    return TrainConfig(
        lr0=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        val_every=args.val_every,
        seed=args.seed,
        output_dir=out,
        loss_mode=args.loss,
        augment=None if args.no_augment else AugmentSpec(),
        workers=args.workers,
    )


def _split(samples, args):
    train_idx, val_idx, test_idx = split_dataset(len(samples), SplitSpec(args.split, args.seed))
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return pick(train_idx), pick(val_idx), pick(test_idx)


def load_model(path):
    """Checkpoint -> inference callable (images -> class probabilities)."""
    return network_from_checkpoint(load_checkpoint(path))


def cmd_train(args) -> int:
    _fill_defaults(args, "train")
    args.seed = resolve_seed(args)
    cfg = network_config(args)
    samples = load_dataset(args.data, cfg.input_size, cfg.classes, args.suffix, args.workers)
    train, val, _ = _split(samples, args)
    net = build_network(cfg, np.random.default_rng(args.seed))
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train_loop(net, train, val, train_config(args, args.out), resume=resume)
    write_history(result.history, args.out / "history.csv")
    plot_history(result.history, args.out / "history.png")
    best = result.best
    print(f"trained {len(result.history)} evaluation points; best val loss {best.best_val_loss:.6f}")
    print(f"checkpoint: {args.out / 'best.lnckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    args.seed = resolve_seed(args)
    config_rec, _, _, _, _ = read_header(args.checkpoint)
    cfg = NetworkConfig.from_record(config_rec)
    model = load_model(args.checkpoint)
    samples = load_dataset(args.data, cfg.input_size, cfg.classes, args.suffix, args.workers)
    if args.subset != "all":
        train, val, test = _split(samples, args)
        samples = {"train": train, "val": val, "test": test}[args.subset]
    report = evaluate_dataset(model, samples, args.threshold, args.batch_size)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out / "metrics.csv")
    agg = report.aggregate()
    print(" ".join(f"{k}={v:.4f}" for k, v in agg._asdict().items()))
    return 0


def cmd_predict(args) -> int:
    config_rec, _, _, _, _ = read_header(args.checkpoint)
    cfg = NetworkConfig.from_record(config_rec)
    model = load_model(args.checkpoint)
    pairs = discover_pairs(args.data, args.suffix, require_masks=False)
    args.out.mkdir(parents=True, exist_ok=True)
    for start in range(0, len(pairs), args.batch_size):
        chunk = pairs[start : start + args.batch_size]
        sizes = []
        for _, img, _ in chunk:
            with Image.open(img) as im:
                sizes.append(im.size)
        x = np.stack([data_mod.load_image(img, cfg.input_size) for _, img, _ in chunk])
        probs = model(x)
        if probs.shape[1] == 2:
            fg = probs[:, 1]
        else:
            fg = 1.0 - probs[:, 0]
        masks = foreground_mask(probs, args.threshold)
        for (sid, _, _), size, m, p in zip(chunk, sizes, masks, fg):
            mask_img = Image.fromarray(np.where(m, 255, 0).astype(np.uint8), mode="L")
            if mask_img.size != size:
                mask_img = mask_img.resize(size, Image.NEAREST)
            mask_img.save(args.out / f"{sid}_pred.png")
            if args.save_probs:
                prob_img = Image.fromarray(np.clip(np.rint(p * 255), 0, 255).astype(np.uint8), mode="L")
                if prob_img.size != size:
                    prob_img = prob_img.resize(size, Image.BILINEAR)
                prob_img.save(args.out / f"{sid}_prob.png")
    print(f"wrote {len(pairs)} masks to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    _fill_defaults(args, "ablate")
    args.seed = resolve_seed(args)
    cfg = network_config(args)
    samples = load_dataset(args.data, cfg.input_size, cfg.classes, args.suffix, args.workers)
    train, val, test = _split(samples, args)
    rows = run_ablation(train, val, test, cfg, train_config(args, args.out), args.out)
    header = f"{'run':<14}" + "".join(f"{m:>13}" for m in ("dice", "jaccard", "accuracy", "sensitivity", "specificity"))
    print(header)
    for r in rows:
        print(f"{r['run']:<14}" + "".join(f"{r[m]:>13.4f}" for m in ("dice", "jaccard", "accuracy", "sensitivity", "specificity")))
    return 0


def cmd_synth(args) -> int:
    args.seed = resolve_seed(args)
    samples = data_mod.synth_generate(args.count, args.size, args.seed)
    data_mod.write_dataset(samples, args.out, args.suffix)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, OSError, ConfigError, CheckpointError, TrainingError, ValueError) as exc:
        print(f"lesionnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
