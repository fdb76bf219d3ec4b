"""Train-and-evaluate runs and lambda sweeps built from a ``RunConfig``."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import _accel
from .config import RunConfig
from .model import TinyFcn, TrainLog, evaluate, train


@dataclass
class RunResult:
    lam: float
    mode: str
    model: TinyFcn
    log: TrainLog
    iou: np.ndarray
    miou: float


def run_training(cfg: RunConfig, train_set, val_set, lam=None, mode=None, callback=None) -> RunResult:
    loss = cfg.loss
    if lam is not None or mode is not None:
        loss = replace(loss, lam=loss.lam if lam is None else float(lam), mode=loss.mode if mode is None else mode)
    model = TinyFcn.init(cfg.data.num_classes, hidden=cfg.train.hidden, seed=cfg.train.seed)
    log = train(model, train_set, cfg.train, loss, cfg.kernel, cfg.constraints, val=val_set or None, callback=callback)
    if val_set:
        iou, miou = evaluate(model, val_set)
    else:
        iou, miou = np.full(cfg.data.num_classes, np.nan), float("nan")
    return RunResult(loss.lam, loss.mode.value, model, log, iou, miou)


def sweep_header(num_classes: int) -> list[str]:
    return ["lambda", "miou_mean", "miou_bg", "miou_fg"] + [f"miou_c{c}" for c in range(1, num_classes)]


def sweep_row(result: RunResult) -> list:
    iou = result.iou
    fg = float(np.nanmean(iou[1:])) if np.any(~np.isnan(iou[1:])) else float("nan")
    return [result.lam, result.miou, float(iou[0]), fg] + [float(v) for v in iou[1:]]


def _sweep_job(args):
    cfg, train_set, val_set, lam, mode = args
    res = run_training(cfg, train_set, val_set, lam, mode)
    return res.lam, res.mode, res.iou, res.miou, res.log


def run_sweep(cfg: RunConfig, train_set, val_set, lambdas, mode, jobs: int = 1) -> list[RunResult]:
    """One training per lambda, same seed and data; results in lambda order."""
    jobs = max(1, min(int(jobs), _accel.thread_limit(), len(lambdas) or 1))
    tasks = [(cfg, train_set, val_set, float(lam), mode) for lam in lambdas]
    if jobs == 1:
        outs = [_sweep_job(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_sweep_job, tasks))
    return [RunResult(lam, m, None, log, iou, miou) for lam, m, iou, miou, log in outs]
