"""G-ZSL / G-OSR metrics, cached-entropy threshold sweeps and (lambda, t, threshold) grid search."""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, ValidationSplit
from .inference import SEEN, UNKNOWN, UNSEEN, BatchScores, score_batch
from .model import Hyperparams, ModelParams, sq_dist_matrix
from .trainer import TrainConfig, train


def harmonic_mean(a, b):
    """2ab / (a + b), defined as 0 when both sides are 0. Works elementwise on arrays."""
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if np.any((a_arr < 0) | (a_arr > 1)) or np.any((b_arr < 0) | (b_arr > 1)):
        raise ValueError(f"harmonic_mean inputs must lie in [0, 1], got {a}, {b}")
    s = a_arr + b_arr
    h = np.where(s > 0, 2.0 * a_arr * b_arr / np.where(s > 0, s, 1.0), 0.0)
    return float(h) if h.ndim == 0 else h


@dataclass(frozen=True)
class GzslMetrics:
    ts: float
    tr: float
    h: float
    warnings: tuple = ()

    def to_json(self) -> dict:
        return {"ts": _num(self.ts), "tr": _num(self.tr), "h": self.h, "warnings": list(self.warnings)}


@dataclass(frozen=True)
class GosrMetrics:
    known_acc: float
    unknown_rej: float
    h: float
    warnings: tuple = ()

    def to_json(self) -> dict:
        return {"known_acc": _num(self.known_acc), "unknown_rej": _num(self.unknown_rej), "h": self.h,
                "warnings": list(self.warnings)}


def _num(v):
    return None if isinstance(v, float) and math.isnan(v) else v


# ---------------------------------------------------------------------------
# vectorized scoring over many thresholds at once

def _macro_accuracy(correct: np.ndarray, true_labels: np.ndarray, classes: Sequence[str]) -> np.ndarray:
    """Per-class mean accuracy for each row of a (T, n) boolean matrix; NaN if no class is present."""
    present = [c for c in classes if np.any(true_labels == c)]
    if not present:
        return np.full(correct.shape[0], np.nan)
    total = np.zeros(correct.shape[0])
    # fixed class order keeps every row's reduction identical
    for c in present:
        mask = true_labels == c
        total = total + correct[:, mask].sum(axis=1) / int(mask.sum())
    return total / len(present)


def _side_warnings(tr, ts, seen_name, unseen_name):
    out = []
    if np.all(np.isnan(tr)):
        out.append(f"no {seen_name}-class instances in evaluation set")
    if np.all(np.isnan(ts)):
        out.append(f"no {unseen_name}-class instances in evaluation set")
    return tuple(out)


def _hm_nan(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    undefined = np.isnan(a) | np.isnan(b)
    return np.where(undefined, 0.0, harmonic_mean(np.nan_to_num(a), np.nan_to_num(b)))


def gzsl_sweep(scores: BatchScores, true_labels, seen_classes, unseen_classes, thresholds):
    """(ts, tr, h) arrays, one entry per threshold, from a single forward pass."""
    y = np.asarray(true_labels, dtype=object)
    thr = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    is_seen = np.isin(y, list(seen_classes))
    is_unseen = np.isin(y, list(unseen_classes))
    seen_ok = is_seen & (scores.seen_labels == y)
    unseen_ok = is_unseen & (scores.unseen_labels == y)
    accept = scores.entropy[None, :] < thr[:, None]
    correct = np.where(accept, seen_ok[None, :], unseen_ok[None, :])
    tr = _macro_accuracy(correct, y, seen_classes)
    ts = _macro_accuracy(correct, y, unseen_classes)
    return ts, tr, _hm_nan(ts, tr)


def gosr_sweep(scores: BatchScores, true_labels, known_classes, unknown_classes, thresholds):
    """(known_acc, unknown_rej, h) arrays, one entry per threshold."""
    y = np.asarray(true_labels, dtype=object)
    thr = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    is_known = np.isin(y, list(known_classes))
    is_unknown = np.isin(y, list(unknown_classes))
    known_ok = is_known & (scores.seen_labels == y)
    accept = scores.entropy[None, :] < thr[:, None]
    correct_known = accept & known_ok[None, :]
    known_acc = _macro_accuracy(correct_known, y, known_classes)
    n_unknown = int(is_unknown.sum())
    if n_unknown:
        unknown_rej = (~accept[:, is_unknown]).sum(axis=1) / n_unknown
    else:
        unknown_rej = np.full(len(thr), np.nan)
    return known_acc, unknown_rej, _hm_nan(known_acc, unknown_rej)


# ---------------------------------------------------------------------------
# metrics from explicit predictions (stubs, precomputed prediction files)

def gzsl_metrics(true_labels, domains, labels, seen_classes, unseen_classes) -> GzslMetrics:
    """A seen instance counts only if routed seen with the right label; likewise for unseen."""
    y = np.asarray(true_labels, dtype=object)
    d = np.asarray(domains, dtype=object)
    lab = np.asarray(labels, dtype=object)
    correct = np.where(np.isin(y, list(seen_classes)), d == SEEN, d == UNSEEN) & (lab == y)
    tr = _macro_accuracy(correct[None, :], y, seen_classes)
    ts = _macro_accuracy(correct[None, :], y, unseen_classes)
    return _gzsl_result(ts, tr)


def gosr_metrics(true_labels, domains, labels, known_classes, unknown_classes) -> GosrMetrics:
    y = np.asarray(true_labels, dtype=object)
    d = np.asarray(domains, dtype=object)
    lab = np.asarray(labels, dtype=object)
    known_ok = (d == SEEN) & (lab == y)
    known_acc = _macro_accuracy(known_ok[None, :], y, known_classes)
    is_unknown = np.isin(y, list(unknown_classes))
    unknown_rej = (np.array([(d[is_unknown] == UNKNOWN).sum() / is_unknown.sum()])
                   if is_unknown.any() else np.array([np.nan]))
    return _gosr_result(known_acc, unknown_rej)


def _gzsl_result(ts, tr) -> GzslMetrics:
    w = _side_warnings(tr, ts, "seen", "unseen")
    for msg in w:
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return GzslMetrics(float(ts[0]), float(tr[0]), float(_hm_nan(ts, tr)[0]), w)


def _gosr_result(known_acc, unknown_rej) -> GosrMetrics:
    w = _side_warnings(known_acc, unknown_rej, "known", "unknown")
    for msg in w:
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return GosrMetrics(float(known_acc[0]), float(unknown_rej[0]),
                       float(_hm_nan(known_acc, unknown_rej)[0]), w)


# ---------------------------------------------------------------------------
# model-level evaluation

def eval_gzsl(ds: Dataset, test_indices, params: ModelParams, delta_g: float,
              unseen_classes: Sequence[str] | None = None) -> GzslMetrics:
    """tr over the model's seen classes, ts over ``unseen_classes`` (default: the dataset's)."""
    idx = np.asarray(test_indices, dtype=np.int64)
    unseen = tuple(ds.unseen_classes if unseen_classes is None else unseen_classes)
    scores = score_batch(ds.features[idx], params, ds.attr_table, unseen)
    ts, tr, _ = gzsl_sweep(scores, ds.labels_at(idx), params.seen_classes, unseen, [delta_g])
    return _gzsl_result(ts, tr)


def eval_gosr(ds: Dataset, test_indices, params: ModelParams, delta_o: float,
              unknown_classes: Sequence[str] | None = None) -> GosrMetrics:
    idx = np.asarray(test_indices, dtype=np.int64)
    unknown = tuple(ds.unseen_classes if unknown_classes is None else unknown_classes)
    scores = score_batch(ds.features[idx], params, ds.attr_table)
    k, u, _ = gosr_sweep(scores, ds.labels_at(idx), params.seen_classes, unknown, [delta_o])
    return _gosr_result(k, u)


# ---------------------------------------------------------------------------
# grid search

@dataclass(frozen=True)
class GridSpec:
    threshold_start: float = 0.0
    threshold_step: float = 0.000002
    threshold_stop: float = 0.02
    lambda_candidates: tuple = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
    proto_dim_candidates: tuple = (32, 50, 64, 85, 102, 128, 200, 256, 312, 512, 717)
    # "smallest": first threshold reaching the best score; "median": the middle one
    # among all tied thresholds of the winning cell (robust when validation saturates)
    threshold_tie: str = "smallest"

    def __post_init__(self):
        if self.threshold_tie not in ("smallest", "median"):
            raise ValueError(f"threshold_tie must be 'smallest' or 'median', got {self.threshold_tie!r}")
        if not self.threshold_step > 0:
            raise ValueError("threshold_step must be > 0")
        if self.threshold_stop < self.threshold_start:
            raise ValueError("threshold_stop must be >= threshold_start")
        if not self.lambda_candidates or not self.proto_dim_candidates:
            raise ValueError("candidate sets must be non-empty")
        object.__setattr__(self, "lambda_candidates", tuple(float(v) for v in self.lambda_candidates))
        object.__setattr__(self, "proto_dim_candidates", tuple(int(v) for v in self.proto_dim_candidates))

    def thresholds(self) -> np.ndarray:
        n = int(math.floor((self.threshold_stop - self.threshold_start) / self.threshold_step + 1e-9)) + 1
        # rounding keeps grid points at their decimal values (0.2014, not 0.20140000000000002)
        return np.round(self.threshold_start + self.threshold_step * np.arange(n), 12)


GZSL_COLUMNS = ("lambda", "proto_dim", "threshold", "ts", "tr", "h")
GOSR_COLUMNS = ("lambda", "proto_dim", "threshold", "known_acc", "unknown_rej", "h")


@dataclass
class GridResult:
    objective: str
    best_hp: Hyperparams
    best_threshold: float
    best_score: float
    columns: tuple
    table: np.ndarray  # rows aligned with ``columns``
    models: dict = field(default_factory=dict, repr=False)

    def best_row(self) -> dict:
        row = dict(zip(self.columns, self.table[self._best_index()].tolist()))
        row["proto_dim"] = int(row["proto_dim"])
        return row

    def _best_index(self) -> int:
        lam, t, thr = self.best_hp.lambda_pl, self.best_hp.proto_dim, self.best_threshold
        hit = (self.table[:, 0] == lam) & (self.table[:, 1] == t) & (self.table[:, 2] == thr)
        return int(np.flatnonzero(hit)[0])

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.table:
                w.writerow([repr(float(row[0])), str(int(row[1]))] + [repr(float(v)) for v in row[2:]])


def _cell(args):
    ds, val, hp, tc, objective, thresholds = args
    params, _ = train(ds, val.fitting_indices, hp, tc, classes=val.fitting_classes)
    idx = np.asarray(val.gzsl_val_indices, dtype=np.int64)
    y = ds.labels_at(idx)
    if objective == "gzsl_h":
        scores = score_batch(ds.features[idx], params, ds.attr_table, val.val_seen_classes)
        cols = gzsl_sweep(scores, y, params.seen_classes, val.val_seen_classes, thresholds)
    else:
        scores = score_batch(ds.features[idx], params, ds.attr_table)
        cols = gosr_sweep(scores, y, params.seen_classes, val.val_seen_classes, thresholds)
    return params, np.column_stack(cols)


def grid_search(ds: Dataset, val: ValidationSplit, hp_base: Hyperparams, grid: GridSpec,
                tc: TrainConfig, objective: str = "gzsl_h", jobs: int = 1) -> GridResult:
    """Train one model per (lambda, t) on the fitting set, sweep thresholds on G-ZSL-val.

    Validation classes play the unseen (gzsl_h) or unknown (gosr_h) role. Ties
    go to the smaller lambda, then smaller t; among tied thresholds the pick
    follows ``grid.threshold_tie``.
    """
    if objective not in ("gzsl_h", "gosr_h"):
        raise ValueError(f"unknown objective {objective!r}")
    if not val.fitting_indices or not val.gzsl_val_indices:
        raise ValueError("grid search needs non-empty fitting and G-ZSL-val index sets")
    thresholds = grid.thresholds()
    cells = [(lam, t) for lam in sorted(grid.lambda_candidates) for t in sorted(grid.proto_dim_candidates)]
    tasks = [(ds, val, replace(hp_base, lambda_pl=lam, proto_dim=t), tc, objective, thresholds)
             for lam, t in cells]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell, tasks))
    else:
        results = [_cell(task) for task in tasks]

    blocks, models = [], {}
    best = (-1.0, None, None)
    for (lam, t), (params, metrics) in zip(cells, results):
        models[(lam, t)] = params
        blocks.append(np.column_stack([np.full(len(thresholds), lam), np.full(len(thresholds), t),
                                       thresholds, metrics]))
        h = metrics[:, -1]
        j = int(np.argmax(h))  # first maximum = smallest threshold
        if h[j] > best[0]:
            best = (float(h[j]), (lam, t), float(thresholds[j]))
    score, (lam, t), thr = best
    if grid.threshold_tie == "median":
        h = dict(zip(cells, results))[(lam, t)][1][:, -1]
        tied = np.flatnonzero(h == score)
        thr = float(thresholds[tied[(len(tied) - 1) // 2]])
    return GridResult(objective, replace(hp_base, lambda_pl=lam, proto_dim=t), thr, score,
                      GZSL_COLUMNS if objective == "gzsl_h" else GOSR_COLUMNS,
                      np.vstack(blocks), models)


def semantic_recognition(ds: Dataset, test_indices, params: ModelParams, delta_o: float,
                         unknown_classes: Sequence[str] | None = None) -> tuple[float, int]:
    """Share of rejected unknown-class instances whose semantic vector lies nearest
    (squared Euclidean) to their own class's attribute row among the unknown rows.

    Returns ``(rate, n_rejected)``; the rate is NaN when nothing was rejected.
    """
    idx = np.asarray(test_indices, dtype=np.int64)
    unknown = tuple(ds.unseen_classes if unknown_classes is None else unknown_classes)
    y = ds.labels_at(idx)
    scores = score_batch(ds.features[idx], params, ds.attr_table)
    mask = ~scores.accept(delta_o) & np.isin(y, list(unknown))
    n = int(mask.sum())
    if n == 0:
        return float("nan"), 0
    nearest = np.argmin(sq_dist_matrix(scores.semantic[mask], ds.attr_table.rows(unknown)), axis=1)
    return float(np.mean(np.asarray(unknown, dtype=object)[nearest] == y[mask])), n
