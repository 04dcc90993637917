"""The 2x2x2 ablation grid: coordinate channels x residual depth x loss."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import replace
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .checkpoint import restore
from .data import Sample
from .metrics import METRIC_NAMES
from .network import NetworkConfig, build_network
from .plots import plot_ablation, plot_history
from .train import TrainConfig, train_loop, validate

log = logging.getLogger(__name__)

ABLATION_FIELDS = ("run", "coordconv", "res_layers", "loss", *METRIC_NAMES, "best_val_loss")


def grid():
    """Yield ``(coordconv, depth, loss)`` in a fixed order, reference config first."""
    return itertools.product((True, False), (3, 2), ("combined", "ce"))


def run_name(coordconv: bool, depth: int, loss: str) -> str:
    return f"{'W-C' if coordconv else 'WO-C'}_{depth}-L_{'CL' if loss == 'combined' else 'CE'}"


def run_ablation(train: Sequence[Sample], val: Sequence[Sample], test: Sequence[Sample],
                 net_cfg: NetworkConfig, train_cfg: TrainConfig, out_dir) -> List[dict]:
    """Train every grid configuration from the same seed and split; score on ``test``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    score_set = test or val
    rows = []
    for coordconv, depth, loss in grid():
        name = run_name(coordconv, depth, loss)
        cfg = replace(net_cfg, use_coordconv=coordconv, res_unit_depth=depth)
        tcfg = replace(train_cfg, loss_mode=loss, output_dir=out / "runs" / name)
        net = build_network(cfg, np.random.default_rng(train_cfg.seed))
        log.info("ablation run %s", name)
        result = train_loop(net, train, val, tcfg)
        restore(result.best, net)
        _, report = validate(net, score_set, train_cfg.batch_size)
        agg = report.aggregate()
        row = {"run": name, "coordconv": "on" if coordconv else "off", "res_layers": depth,
               "loss": loss, **agg._asdict(), "best_val_loss": result.best.best_val_loss,
               "history": result.history}
        report.write_csv(tcfg.output_dir / "metrics.csv")
        plot_history(result.history, tcfg.output_dir / "history.png", title=name)
        rows.append(row)
    write_ablation(rows, out / "ablation.csv")
    plot_ablation(rows, out / "ablation.png")
    return rows


def write_ablation(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def read_ablation(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
