"""Entropy-gated prediction for G-ZSL and G-OSR, plus attribute readout of rejected instances."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import ClassAttributeTable
from .model import ModelError, ModelParams, softmax_neg_dist, sq_dist_matrix

SEEN, UNSEEN, UNKNOWN = "seen", "unseen", "unknown"


@dataclass(frozen=True)
class Thresholds:
    delta_g: float = 0.01
    delta_o: float = 0.01

    def __post_init__(self):
        for name in ("delta_g", "delta_o"):
            v = getattr(self, name)
            # inf is allowed: it disables rejection entirely
            if math.isnan(v) or v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


@dataclass
class GatedPrediction:
    entropy: float
    domain: str
    label: str | None
    semantic_vector: np.ndarray | None
    visual_vector: np.ndarray

    def to_record(self, index: int) -> dict:
        rec = {"index": int(index), "entropy": float(self.entropy), "domain": self.domain,
               "label": self.label}
        if self.semantic_vector is not None:
            rec["semantic_vector"] = [float(v) for v in self.semantic_vector]
        return rec


def _entropy_rows(P: np.ndarray) -> np.ndarray:
    safe = np.where(P > 0, P, 1.0)
    return -np.sum(np.where(P > 0, P * np.log(safe), 0.0), axis=-1)


def entropy_of(probs) -> float:
    """Natural-log Shannon entropy with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty probability vector")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"invalid probability vector: {p}")
    return float(_entropy_rows(p[None])[0])


@dataclass
class BatchScores:
    """Threshold-independent forward results for a batch; the gate only reads ``entropy``."""

    probs: np.ndarray
    entropy: np.ndarray
    visual: np.ndarray
    semantic: np.ndarray
    seen_labels: np.ndarray
    unseen_labels: np.ndarray | None

    def accept(self, delta: float) -> np.ndarray:
        # E == delta goes to the rejection branch
        return self.entropy < delta


def _nearest(Z, R, metric):
    if metric == "cosine":
        zn = Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-300)
        rn = R / np.maximum(np.linalg.norm(R, axis=1, keepdims=True), 1e-300)
        return np.argmin(1.0 - zn @ rn.T, axis=1)
    return np.argmin(sq_dist_matrix(Z, R), axis=1)


def score_batch(X, params: ModelParams, attr_table: ClassAttributeTable,
                unseen_classes: Sequence[str] = ()) -> BatchScores:
    """One forward pass: seen probabilities, entropies, both embeddings and both branch labels."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    params.check_compatible(X.shape[1], attr_table.dim)
    seen = np.asarray(params.seen_classes, dtype=object)
    if len(X) == 0:
        empty = np.zeros((0,))
        return BatchScores(np.zeros((0, len(seen))), empty, np.zeros((0, params.hp.proto_dim)),
                           np.zeros((0, attr_table.dim)), np.zeros(0, dtype=object),
                           np.zeros(0, dtype=object) if unseen_classes else None)
    Zv, Zs = params.embed(X)
    D = sq_dist_matrix(Zv, params.visual_prototypes)
    P, _ = softmax_neg_dist(D, params.hp.gamma)
    seen_labels = seen[np.argmin(D, axis=1)]
    unseen_labels = None
    if len(unseen_classes):
        unseen = np.asarray(unseen_classes, dtype=object)
        unseen_labels = unseen[_nearest(Zs, attr_table.rows(unseen_classes), params.hp.unseen_metric)]
    return BatchScores(P, _entropy_rows(P), Zv, Zs, seen_labels, unseen_labels)


def gate_gzsl(scores: BatchScores, delta_g: float) -> tuple[np.ndarray, np.ndarray]:
    """(domains, labels) under the G-ZSL rule."""
    if scores.unseen_labels is None:
        raise ModelError("G-ZSL prediction needs at least one unseen class")
    acc = scores.accept(delta_g)
    domains = np.where(acc, SEEN, UNSEEN).astype(object)
    labels = np.where(acc, scores.seen_labels, scores.unseen_labels).astype(object)
    return domains, labels


def gate_gosr(scores: BatchScores, delta_o: float) -> tuple[np.ndarray, np.ndarray]:
    """(domains, labels) under the G-OSR rule; rejected rows get label None."""
    acc = scores.accept(delta_o)
    domains = np.where(acc, SEEN, UNKNOWN).astype(object)
    labels = np.where(acc, scores.seen_labels, None).astype(object)
    return domains, labels


def predict_gzsl_batch(X, params, attr_table, unseen_classes, delta_g) -> list[GatedPrediction]:
    s = score_batch(X, params, attr_table, unseen_classes)
    domains, labels = gate_gzsl(s, delta_g)
    return [GatedPrediction(float(s.entropy[i]), domains[i], labels[i], s.semantic[i], s.visual[i])
            for i in range(len(domains))]


def predict_gosr_batch(X, params, attr_table, delta_o, semantic_for_all: bool = False
                       ) -> list[GatedPrediction]:
    s = score_batch(X, params, attr_table)
    domains, labels = gate_gosr(s, delta_o)
    return [GatedPrediction(float(s.entropy[i]), domains[i], labels[i],
                            s.semantic[i] if (domains[i] == UNKNOWN or semantic_for_all) else None,
                            s.visual[i])
            for i in range(len(domains))]


def predict_gzsl(x, params: ModelParams, attr_table: ClassAttributeTable,
                 unseen_classes: Sequence[str], delta_g: float) -> GatedPrediction:
    """Seen label by nearest visual prototype if the entropy is below ``delta_g``,
    otherwise the unseen class whose attribute row is nearest the semantic embedding."""
    return predict_gzsl_batch(np.asarray(x, dtype=np.float64)[None], params, attr_table,
                              unseen_classes, delta_g)[0]


def predict_gosr(x, params: ModelParams, attr_table: ClassAttributeTable, delta_o: float,
                 semantic_for_all: bool = False) -> GatedPrediction:
    return predict_gosr_batch(np.asarray(x, dtype=np.float64)[None], params, attr_table,
                              delta_o, semantic_for_all)[0]


def describe_unknown(sem, attr_names: Sequence[str], centered: bool) -> list[tuple[str, float, str]]:
    """Signed attribute readout: positive means the instance has the attribute.

    Sorted by descending magnitude; ties keep attribute order.
    """
    if not centered:
        raise ValueError("attribute descriptions need centered attributes (sign carries the meaning)")
    sem = np.asarray(sem, dtype=np.float64)
    if len(attr_names) != len(sem):
        raise ValueError(f"{len(attr_names)} attribute names for a vector of length {len(sem)}")
    order = np.argsort(-np.abs(sem), kind="stable")
    return [(attr_names[j], float(sem[j]), "has" if sem[j] > 0 else "has-not") for j in order]
