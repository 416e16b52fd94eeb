"""Batch training loop shared by the deep Koopman model and the MLP baseline.

A trainable model exposes ``trainable() -> list[array]``,
``set_trainable(list[array])``, ``redraw(rng)`` (resamples any random
layer, a no-op otherwise) and ``ab_slice`` (positions of the lifted linear
matrices inside ``trainable()``, empty for models without them).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import neuralnet as nn
from .dataset import epoch_windows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    p: int = 41
    tau: int = 2
    batch_size: int = 64
    max_epochs: int = 50
    max_batches: int | None = None
    stop_tol: float = 1e-9
    seed: int = 0
    freeze_ab_until: int = 0
    rate: float = 1e-4
    log_every: int = 1000
    divergence: float = 1e6

    def __post_init__(self):
        if self.p < 1 or self.batch_size < 1 or self.tau < 1:
            raise ValueError("p, batch_size and tau must be >= 1")
        if not self.stop_tol > 0:
            raise ValueError("stop_tol must be > 0 (use inf for an immediate stop)")
        if self.max_epochs < 0 or (self.max_batches is not None and self.max_batches < 0):
            raise ValueError("epoch and batch limits must be nonnegative")
        if self.rate <= 0 or self.log_every < 1 or self.freeze_ab_until < 0:
            raise ValueError("rate > 0, log_every >= 1 and freeze_ab_until >= 0 required")

    def to_dict(self):
        return asdict(self)


class TrainingFault(RuntimeError):
    """Non-finite or diverging loss; carries the batch index and history so far."""

    def __init__(self, message, batch, history):
        super().__init__(message)
        self.batch = batch
        self.history = history


@dataclass
class History:
    rows: list = field(default_factory=list)  # (batch, train_metric, val_metric)
    losses: list = field(default_factory=list)  # total loss per batch
    stopped: str = ""

    def add(self, batch, train, val):
        self.rows.append((int(batch), float(train), float(val)))

    @property
    def batches(self):
        return np.array([r[0] for r in self.rows])

    @property
    def train(self):
        return np.array([r[1] for r in self.rows])

    @property
    def val(self):
        return np.array([r[2] for r in self.rows])

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("batch", "train_recon", "val_recon"))
            for b, t, v in self.rows:
                w.writerow((b, f"{t:.17g}", f"{v:.17g}"))

    @classmethod
    def from_csv(cls, path):
        h = cls()
        with Path(path).open(newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for row in r:
                h.add(int(row[0]), float(row[1]), float(row[2]))
        return h


def train_loop(model, loss_fn, val_fn, train_eps, cfg: TrainConfig):
    """Generic Adam loop over shuffled multi-step windows.

    ``loss_fn(model, batch) -> (total, train_metric, grads)`` with grads
    aligned to ``model.trainable()``. ``val_fn(model) -> float``. Windows are
    re-cut with fresh random offsets every epoch. Records a history row at
    batch 0 and every ``log_every`` batches (train metric averaged since the
    last row), and once more at the end if the last batch was not logged.
    """
    rng = np.random.default_rng(cfg.seed)
    hist = History()
    model.redraw(rng)
    hist.add(0, math.nan, val_fn(model))
    if math.isinf(cfg.stop_tol):
        hist.stopped = "tolerance"
        return hist
    opt = nn.AdamState(rate=cfg.rate)
    ab = set(model.ab_slice)
    batch_idx, acc, n_acc = 0, 0.0, 0
    limit = cfg.max_batches if cfg.max_batches is not None else math.inf
    for _ in range(cfg.max_epochs):
        if batch_idx >= limit:
            break
        windows = epoch_windows(train_eps, cfg.p, cfg.tau, rng)
        for s in range(0, len(windows), cfg.batch_size):
            batch = windows.take(slice(s, s + cfg.batch_size))
            model.redraw(rng)
            total, metric, grads = loss_fn(model, batch)
            if not math.isfinite(total) or total > cfg.divergence:
                raise TrainingFault(f"loss {total} at batch {batch_idx}", batch_idx, hist)
            if batch_idx < cfg.freeze_ab_until:
                grads = [np.zeros_like(g) if i in ab else g for i, g in enumerate(grads)]
            model.set_trainable(nn.adam_step(opt, model.trainable(), grads))
            hist.losses.append(total)
            batch_idx += 1
            acc += metric
            n_acc += 1
            if batch_idx % cfg.log_every == 0:
                hist.add(batch_idx, acc / n_acc, val_fn(model))
                log.info("batch %d train %.3e val %.3e", *hist.rows[-1])
                acc, n_acc = 0.0, 0
            if abs(total) <= cfg.stop_tol:
                hist.stopped = "tolerance"
                break
            if batch_idx >= limit:
                hist.stopped = "max_batches"
                break
        if hist.stopped:
            break
    else:
        hist.stopped = "max_epochs"
    if not hist.stopped:
        hist.stopped = "max_batches"
    if n_acc:
        hist.add(batch_idx, acc / n_acc, val_fn(model))
    return hist


def inf_norm_rows(e):
    """Row-wise infinity norm and its subgradient (sign at the first argmax)."""
    idx = np.argmax(np.abs(e), axis=1)
    rows = np.arange(e.shape[0])
    sub = np.zeros_like(e)
    sub[rows, idx] = np.sign(e[rows, idx])
    return np.abs(e[rows, idx]), sub
