"""Minibatch SGD with momentum on the joint two-head objective."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence
from zlib import crc32

import numpy as np

from .dataset import Dataset
from .model import (Hyperparams, LossParts, ModelParams, init_params, joint_loss_gradients,
                    joint_loss_parts)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or got unusable input."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        for name in ("epochs", "batch_size", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class TrainReport:
    loss_total: list = field(default_factory=list)
    loss_visual: list = field(default_factory=list)
    loss_semantic: list = field(default_factory=list)
    params: ModelParams | None = None
    wall_time: float = 0.0

    def records(self) -> list[dict]:
        return [{"epoch": e + 1, "loss_total": t, "loss_visual": v, "loss_semantic": s}
                for e, (t, v, s) in enumerate(zip(self.loss_total, self.loss_visual, self.loss_semantic))]


def sub_seed(seed: int, name: str) -> list[int]:
    """Named child seed so each random stream (init, shuffle, ...) is independent."""
    return [int(seed) & 0xFFFFFFFF, crc32(name.encode())]


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    # Philox is counter-based: the (seed, epoch) key fixes the stream on every platform
    key = np.random.SeedSequence(sub_seed(seed, "shuffle") + [epoch]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def _check_indices(ds: Dataset, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise TrainingError("empty training set")
    seen = set(ds.seen_classes)
    bad = [int(i) for i in idx if ds.labels[i] not in seen]
    if bad:
        raise TrainingError(f"training indices include non-seen-class instances, e.g. row {bad[0]}")
    return idx


def train(ds: Dataset, split_indices: Sequence[int], hp: Hyperparams, tc: TrainConfig,
          classes: Sequence[str] | None = None, init: ModelParams | None = None,
          checkpoint: Callable[[int, ModelParams], None] | None = None,
          log: Callable[[dict], None] | None = None) -> tuple[ModelParams, TrainReport]:
    """Fit both heads and the visual prototypes on ``split_indices``.

    ``classes`` fixes the prototype set (defaults to the seen classes present
    in the split, in canonical order). The reported epoch loss is the joint
    loss of the end-of-epoch parameters over the whole split, so it matches
    ``evaluate_loss`` on the same indices exactly.
    """
    idx = _check_indices(ds, indices=split_indices)
    labels = np.asarray(ds.labels, dtype=object)
    if classes is None:
        present = set(labels[idx])
        classes = [c for c in ds.seen_classes if c in present]
    X_all, y_all = ds.features[idx], labels[idx]
    if init is None:
        rng = np.random.default_rng(sub_seed(tc.seed, "init"))
        params = init_params(ds.dim, ds.attr_table.dim, classes, hp, rng, X_all)
    else:
        params = init.copy()

    arrays = params.arrays()
    velocity = [np.zeros_like(a) for a in arrays]
    report = TrainReport()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(tc.epochs):
        perm = epoch_permutation(tc.seed, epoch, len(idx))
        for start in range(0, len(idx), tc.batch_size):
            b = perm[start:start + tc.batch_size]
            # overflow shows up as a non-finite loss, reported below with the step number
            with np.errstate(over="ignore", invalid="ignore"):
                parts, grads = joint_loss_gradients(params, X_all[b], y_all[b], ds.attr_table)
            if not math.isfinite(parts.total):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch + 1})")
            for a, v, g in zip(arrays, velocity, grads.arrays()):
                v *= tc.momentum
                v += g
                a -= tc.learning_rate * v
            step += 1
        with np.errstate(over="ignore", invalid="ignore"):
            epoch_parts = joint_loss_parts(params, X_all, y_all, ds.attr_table)
        if not math.isfinite(epoch_parts.total):
            raise TrainingError(f"non-finite loss at step {step} (epoch {epoch + 1})")
        total, vis, sem = epoch_parts.total, epoch_parts.visual, epoch_parts.semantic
        report.loss_total.append(total)
        report.loss_visual.append(vis)
        report.loss_semantic.append(sem)
        if (epoch + 1) % tc.log_every == 0 or epoch + 1 == tc.epochs:
            rec = {"epoch": epoch + 1, "loss_total": total, "loss_visual": vis, "loss_semantic": sem}
            logger.debug("epoch %d loss %.6g (visual %.6g, semantic %.6g)", epoch + 1, total, vis, sem)
            if log is not None:
                log(rec)
        if checkpoint is not None and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            checkpoint(epoch + 1, params)
    report.params = params
    report.wall_time = time.perf_counter() - t0
    return params, report


def evaluate_loss(ds: Dataset, indices: Sequence[int], params: ModelParams) -> LossParts:
    """Forward-only (total, visual, semantic) mean losses over ``indices``."""
    idx = _check_indices(ds, indices)
    labels = np.asarray(ds.labels, dtype=object)
    return joint_loss_parts(params, ds.features[idx], labels[idx], ds.attr_table)


def write_log(records: list[dict], path) -> None:
    """Line-delimited JSON, one record per logged epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
