"""Training loop with periodic validation, plateau schedule and best-weight tracking."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, capture, load_checkpoint, restore, save_checkpoint
from .data import AugmentSpec, Sample, augment, sample_rng
from .losses import LOSS_MODES, LossBreakdown, combine, combined_loss, loss_backward, loss_value
from .metrics import MetricsReport, confusion_counts, foreground_mask, label_mask, metrics_from_counts
from .network import LesionNet
from .optim import AdamState, PlateauScheduler, adam_step

log = logging.getLogger(__name__)

HISTORY_FIELDS = (
    "step", "epoch", "train_loss", "train_ce", "train_dice_loss",
    "val_loss", "val_ce", "val_dice_loss", "val_dice", "lr",
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    batch_size: int = 4
    epochs: int = 100
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    min_delta: float = 1e-4
    val_every: int = 10
    seed: int = 0
    output_dir: Optional[Path] = None
    loss_mode: str = "combined"
    augment: Optional[AugmentSpec] = field(default_factory=AugmentSpec)
    workers: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.output_dir is not None:
            self.output_dir = Path(self.output_dir)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: List[dict]


def batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def validate(net: LesionNet, samples: Sequence[Sample], batch_size: int = 4, threshold: float = 0.5):
    """Inference-mode pass returning ``(mean LossBreakdown over batches, MetricsReport)``."""
    ce_sum = dice_sum = 0.0
    nb = 0
    report = MetricsReport()
    for sl in batches(len(samples), batch_size):
        chunk = samples[sl]
        x = np.stack([s.image for s in chunk])
        y = np.stack([s.label for s in chunk])
        probs = net.forward(x, training=False)
        bd = combined_loss(probs, y)
        ce_sum += bd.ce
        dice_sum += bd.dice
        nb += 1
        for s, pm, gm in zip(chunk, foreground_mask(probs, threshold), label_mask(y)):
            report.add(s.id, metrics_from_counts(confusion_counts(pm, gm)))
    ce, dice = ce_sum / nb, dice_sum / nb
    return LossBreakdown(ce, dice, combine(ce, dice)), report


def write_history(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def read_history(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()})
    return rows


def _prepare(chunk, cfg: TrainConfig, epoch: int, pool):
    if cfg.augment is None:
        return chunk
    fn = lambda s: augment(s, cfg.augment, sample_rng(cfg.seed, s.id, epoch))  # noqa: E731
    return list(pool.map(fn, chunk)) if pool else [fn(s) for s in chunk]


def train_loop(net: LesionNet, train: Sequence[Sample], val: Sequence[Sample],
               cfg: TrainConfig, resume: Optional[Checkpoint] = None) -> TrainResult:
    """Train ``net`` in place and return the best/last checkpoints and history rows.

    Validation runs every ``cfg.val_every`` optimizer steps and at the end of
    each epoch. The plateau rule sees the best validation loss of each epoch.
    """
    if not train:
        raise TrainingError("empty training set")
    if not val:
        raise TrainingError("empty validation set")
    train_ids = {s.id for s in train}
    if any(s.id in train_ids for s in val):
        raise TrainingError("training and validation sets overlap")

    adam = AdamState()
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor, cfg.min_delta)
    step = 0
    start_epoch = 0
    best_loss = math.inf
    best = None
    history: List[dict] = []
    out = cfg.output_dir
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        restore(resume, net, adam)
        m = resume.meta
        start_epoch = int(m["epoch"])
        step = int(m["step"])
        sched.lr = float(m["lr"])
        sched.best = float(m["sched_best"])
        sched.bad_epochs = int(m["sched_bad_epochs"])
        best_loss = float(m["best_val_loss"])
        if out is not None and (out / "best.lnckpt").exists():
            best = load_checkpoint(out / "best.lnckpt")
        if out is not None and (out / "history.csv").exists():
            history = [r for r in read_history(out / "history.csv") if r["epoch"] <= start_epoch]
    if best is None:
        best = capture(net, meta={"best_val_loss": repr(float(best_loss))})

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    last = None
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
            acc_ce = acc_dice = 0.0
            acc_n = 0
            epoch_val = math.inf
            spans = list(batches(len(order), cfg.batch_size))
            for bi, sl in enumerate(spans):
                chunk = _prepare([train[i] for i in order[sl]], cfg, epoch, pool)
                x = np.stack([s.image for s in chunk])
                y = np.stack([s.label for s in chunk])
                net.zero_grad()
                probs = net.forward(x, training=True)
                bd = combined_loss(probs, y)
                loss = loss_value(bd, cfg.loss_mode)
                if not math.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss} at step {step + 1} (epoch {epoch}); "
                        f"ce={bd.ce} dice={bd.dice}"
                    )
                grad_probs, grad_logits = loss_backward(probs, y, cfg.loss_mode)
                net.backward(grad_probs, grad_logits)
                adam_step(net.parameters(), adam, sched.lr)
                step += 1
                acc_ce += bd.ce
                acc_dice += bd.dice
                acc_n += 1

                if step % cfg.val_every == 0 or bi == len(spans) - 1:
                    vbd, vrep = validate(net, val, cfg.batch_size)
                    tce, tdice = acc_ce / acc_n, acc_dice / acc_n
                    row = {
                        "step": step, "epoch": epoch,
                        "train_loss": loss_value(LossBreakdown(tce, tdice, combine(tce, tdice)), cfg.loss_mode),
                        "train_ce": tce, "train_dice_loss": tdice,
                        "val_loss": loss_value(vbd, cfg.loss_mode),
                        "val_ce": vbd.ce, "val_dice_loss": vbd.dice,
                        "val_dice": vrep.aggregate().dice, "lr": sched.lr,
                    }
                    history.append(row)
                    acc_ce = acc_dice = 0.0
                    acc_n = 0
                    epoch_val = min(epoch_val, row["val_loss"])
                    if row["val_loss"] < best_loss:
                        best_loss = row["val_loss"]
                        best = capture(net, meta={"best_val_loss": repr(float(best_loss)), "step": step,
                                                  "epoch": epoch, "val_dice": repr(float(row["val_dice"]))})
                        if out is not None:
                            save_checkpoint(out / "best.lnckpt", best)
                    log.info("epoch %d step %d train %.4f val %.4f dice %.4f lr %.2e",
                             epoch, step, row["train_loss"], row["val_loss"], row["val_dice"], sched.lr)

            sched.step(epoch_val)
            last = capture(net, adam, meta={
                "epoch": epoch, "step": step, "lr": repr(float(sched.lr)),
                "sched_best": repr(float(sched.best)), "sched_bad_epochs": sched.bad_epochs,
                "best_val_loss": repr(float(best_loss)), "seed": cfg.seed, "loss_mode": cfg.loss_mode,
            })
            if out is not None:
                save_checkpoint(out / "last.lnckpt", last)
                write_history(history, out / "history.csv")
    finally:
        if pool is not None:
            pool.shutdown()

    if last is None:
        last = capture(net, adam)
    return TrainResult(best, last, history)
