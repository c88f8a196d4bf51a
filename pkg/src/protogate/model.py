"""Two-head prototype model: distance softmax, DCE/PL losses and their analytic gradients.

Both heads read the same fixed feature vector. The visual head is scored
against learnable per-class prototypes, the semantic head against the fixed
seen-class attribute rows, and each head pays ``DCE + lambda * PL``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ClassAttributeTable

FORMAT_TAG = "protogate-params/1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 1.0
    lambda_pl: float = 0.01
    proto_dim: int = 32
    # 0 keeps each head a single affine map; >0 inserts one tanh hidden layer
    hidden_dim: int = 0
    # weight of the semantic-head term in the joint objective (0 = visual-only ablation)
    semantic_weight: float = 1.0
    # unseen-class matching in attribute space: "sqeuclidean" or "cosine"
    unseen_metric: str = "sqeuclidean"
    # z-score inputs with statistics of the training rows (stored in the params)
    standardize: bool = True

    def __post_init__(self):
        if not self.gamma > 0:
            raise ModelError(f"gamma must be > 0, got {self.gamma}")
        if not self.lambda_pl >= 0:
            raise ModelError(f"lambda_pl must be >= 0, got {self.lambda_pl}")
        if int(self.proto_dim) < 1:
            raise ModelError(f"proto_dim must be >= 1, got {self.proto_dim}")
        if int(self.hidden_dim) < 0:
            raise ModelError(f"hidden_dim must be >= 0, got {self.hidden_dim}")
        if not self.semantic_weight >= 0:
            raise ModelError(f"semantic_weight must be >= 0, got {self.semantic_weight}")
        if self.unseen_metric not in ("sqeuclidean", "cosine"):
            raise ModelError(f"unknown unseen_metric {self.unseen_metric!r}")


# ---------------------------------------------------------------------------
# scalar building blocks

def sq_dist(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ModelError(f"length mismatch: {u.shape} vs {v.shape}")
    d = u - v
    return float(d @ d)


def sq_dist_matrix(Z: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, rows of ``Z`` against rows of ``P``."""
    diff = Z[:, None, :] - P[None, :, :]
    return np.einsum("nkt,nkt->nk", diff, diff)


def softmax_neg_dist(D: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax of ``-gamma * D``; returns (probabilities, log-probabilities)."""
    logits = -gamma * D
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    return np.exp(logp), logp


def class_probabilities(z, protos, gamma: float) -> np.ndarray:
    protos = np.atleast_2d(np.asarray(protos, dtype=np.float64))
    if protos.size == 0 or protos.shape[0] == 0:
        raise ModelError("empty prototype matrix")
    if not gamma > 0:
        raise ModelError(f"gamma must be > 0, got {gamma}")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (protos.shape[1],):
        raise ModelError(f"vector of length {z.shape} does not match prototype width {protos.shape[1]}")
    p, _ = softmax_neg_dist(sq_dist_matrix(z[None], protos), gamma)
    return p[0]


def _check_index(k, protos):
    if not 0 <= k < len(protos):
        raise ModelError(f"class index {k} out of range for {len(protos)} prototypes")


def dce_loss(z, true_class_index: int, protos, gamma: float) -> float:
    protos = np.atleast_2d(np.asarray(protos, dtype=np.float64))
    _check_index(true_class_index, protos)
    D = sq_dist_matrix(np.asarray(z, dtype=np.float64)[None], protos)
    _, logp = softmax_neg_dist(D, gamma)
    return float(-logp[0, true_class_index])


def pl_loss(z, true_class_index: int, protos) -> float:
    protos = np.atleast_2d(np.asarray(protos, dtype=np.float64))
    _check_index(true_class_index, protos)
    return sq_dist(z, protos[true_class_index])


def head_loss(z, true_class_index: int, protos, gamma: float, lambda_pl: float) -> float:
    return dce_loss(z, true_class_index, protos, gamma) + lambda_pl * pl_loss(z, true_class_index, protos)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class Head:
    """Affine map, or affine -> tanh -> affine when two layers are present."""

    weights: list
    biases: list

    def forward(self, X: np.ndarray):
        acts = [X]
        h = X
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if j < len(self.weights) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, dZ: np.ndarray, acts: list) -> "Head":
        gW, gb = [None] * len(self.weights), [None] * len(self.weights)
        delta = dZ
        for j in range(len(self.weights) - 1, -1, -1):
            gW[j] = delta.T @ acts[j]
            gb[j] = delta.sum(axis=0)
            if j > 0:
                delta = (delta @ self.weights[j]) * (1.0 - acts[j] ** 2)
        return Head(gW, gb)

    def arrays(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Head":
        return Head([W.copy() for W in self.weights], [b.copy() for b in self.biases])


@dataclass
class ModelParams:
    visual_head: Head
    semantic_head: Head
    visual_prototypes: np.ndarray
    seen_classes: tuple
    hp: Hyperparams = field(default_factory=Hyperparams)
    # fixed input normalization, not trained
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        self.seen_classes = tuple(str(c) for c in self.seen_classes)
        d = self.visual_head.weights[0].shape[1]
        if self.input_shift is None:
            self.input_shift = np.zeros(d)
        if self.input_scale is None:
            self.input_scale = np.ones(d)
        if self.visual_prototypes.shape[0] != len(self.seen_classes):
            raise ModelError(
                f"{self.visual_prototypes.shape[0]} prototype rows for {len(self.seen_classes)} seen classes")

    @property
    def input_dim(self) -> int:
        return self.visual_head.weights[0].shape[1]

    @property
    def attr_dim(self) -> int:
        return self.semantic_head.weights[-1].shape[0]

    def arrays(self) -> list:
        """Trainable tensors, in a fixed order shared with ``Gradients.arrays``."""
        return self.visual_head.arrays() + self.semantic_head.arrays() + [self.visual_prototypes]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def normalize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.input_shift) / self.input_scale

    def embed(self, X: np.ndarray):
        """(visual embedding, semantic embedding) of raw feature rows."""
        Xn = self.normalize(X)
        return self.visual_head.forward(Xn)[0], self.semantic_head.forward(Xn)[0]

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        new = self.copy()
        pos = 0
        for a in new.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        return new

    def copy(self) -> "ModelParams":
        return ModelParams(self.visual_head.copy(), self.semantic_head.copy(),
                           self.visual_prototypes.copy(), self.seen_classes, self.hp,
                           self.input_shift.copy(), self.input_scale.copy())

    def class_index(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.seen_classes)}
        try:
            return np.array([lookup[str(y)] for y in labels], dtype=np.int64)
        except KeyError as exc:
            raise ModelError(f"label {exc.args[0]!r} is not a seen class of this model") from None

    def check_compatible(self, input_dim: int, attr_dim: int | None = None) -> None:
        if input_dim != self.input_dim:
            raise ModelError(f"model expects feature width {self.input_dim}, got {input_dim}")
        if attr_dim is not None and attr_dim != self.attr_dim:
            raise ModelError(f"model expects attribute width {self.attr_dim}, got {attr_dim}")


@dataclass
class Gradients:
    visual_head: Head
    semantic_head: Head
    visual_prototypes: np.ndarray

    def arrays(self) -> list:
        return self.visual_head.arrays() + self.semantic_head.arrays() + [self.visual_prototypes]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def _init_head(rng, sizes) -> Head:
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Head(ws, bs)


def init_params(input_dim: int, attr_dim: int, seen_classes, hp: Hyperparams,
                rng: np.random.Generator, X_train: np.ndarray | None = None) -> ModelParams:
    """Prototypes ~ U[0, 1); head weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases.

    With ``hp.standardize`` and training rows given, the input normalization is
    fitted to their per-dimension mean and standard deviation.
    """
    hid = [hp.hidden_dim] if hp.hidden_dim else []
    visual = _init_head(rng, [input_dim, *hid, hp.proto_dim])
    semantic = _init_head(rng, [input_dim, *hid, attr_dim])
    protos = rng.uniform(0.0, 1.0, size=(len(seen_classes), hp.proto_dim))
    shift = scale = None
    if hp.standardize and X_train is not None:
        shift = X_train.mean(axis=0)
        sd = X_train.std(axis=0)
        scale = np.where(sd > 0, sd, 1.0)
    return ModelParams(visual, semantic, protos, tuple(seen_classes), hp, shift, scale)


# ---------------------------------------------------------------------------
# batch objective

@dataclass(frozen=True)
class LossParts:
    total: float
    visual: float
    semantic: float


def _head_terms(Z, P, y, gamma, lam):
    """Per-instance head loss and dLoss/dD for a batch against prototype rows ``P``."""
    D = sq_dist_matrix(Z, P)
    p, logp = softmax_neg_dist(D, gamma)
    rows = np.arange(len(y))
    losses = -logp[rows, y] + lam * D[rows, y]
    G = gamma * (-p)
    G[rows, y] += gamma + lam
    return losses, G


def _dist_backward(G, Z, P):
    # d/dZ and d/dP of sum_{i,k} G[i,k] * ||Z_i - P_k||^2
    dZ = 2.0 * (G.sum(axis=1)[:, None] * Z - G @ P)
    dP = -2.0 * (G.T @ Z - G.sum(axis=0)[:, None] * P)
    return dZ, dP


def _prepare(params, X, labels, attr_table):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise ModelError("empty batch")
    params.check_compatible(X.shape[1], attr_table.dim)
    y = params.class_index(labels)
    A_s = attr_table.rows(params.seen_classes)
    return params.normalize(X), y, A_s


def _forward(params, X, y, A_s):
    hp = params.hp
    Zv, acts_v = params.visual_head.forward(X)
    Zs, acts_s = params.semantic_head.forward(X)
    lv, Gv = _head_terms(Zv, params.visual_prototypes, y, hp.gamma, hp.lambda_pl)
    ls, Gs = _head_terms(Zs, A_s, y, hp.gamma, hp.lambda_pl)
    vis, sem = lv.mean(), ls.mean()
    parts = LossParts(float(vis + hp.semantic_weight * sem), float(vis), float(sem))
    return parts, (Zv, acts_v, Gv), (Zs, acts_s, Gs)


def joint_loss_parts(params: ModelParams, X, labels, attr_table: ClassAttributeTable) -> LossParts:
    X, y, A_s = _prepare(params, X, labels, attr_table)
    return _forward(params, X, y, A_s)[0]


def joint_loss(params: ModelParams, X, labels, attr_table: ClassAttributeTable) -> float:
    """Mean visual-head loss plus (weighted) mean semantic-head loss over the batch."""
    return joint_loss_parts(params, X, labels, attr_table).total


def joint_loss_gradients(params: ModelParams, X, labels, attr_table: ClassAttributeTable
                         ) -> tuple[LossParts, Gradients]:
    """Loss and analytic gradient from one shared forward pass.

    Attribute rows are constants; no gradient is produced for them.
    """
    X, y, A_s = _prepare(params, X, labels, attr_table)
    parts, (Zv, acts_v, Gv), (Zs, acts_s, Gs) = _forward(params, X, y, A_s)
    n = len(X)
    dZv, dP = _dist_backward(Gv / n, Zv, params.visual_prototypes)
    dZs, _ = _dist_backward(Gs * (params.hp.semantic_weight / n), Zs, A_s)
    grads = Gradients(params.visual_head.backward(dZv, acts_v),
                      params.semantic_head.backward(dZs, acts_s), dP)
    return parts, grads


# ---------------------------------------------------------------------------
# serialization

def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def params_to_json(params: ModelParams, extra: dict | None = None) -> dict:
    doc = {
        "format": FORMAT_TAG,
        "hyperparams": asdict(params.hp),
        "seen_classes": list(params.seen_classes),
        "visual_head": {"weights": [_arr(w) for w in params.visual_head.weights],
                        "biases": [_arr(b) for b in params.visual_head.biases]},
        "semantic_head": {"weights": [_arr(w) for w in params.semantic_head.weights],
                          "biases": [_arr(b) for b in params.semantic_head.biases]},
        "visual_prototypes": _arr(params.visual_prototypes),
        "input_shift": _arr(params.input_shift),
        "input_scale": _arr(params.input_scale),
    }
    if extra:
        doc.update(extra)
    return doc


def params_from_json(doc: dict) -> ModelParams:
    if doc.get("format") != FORMAT_TAG:
        raise ModelError(f"unsupported parameter format {doc.get('format')!r}")
    heads = []
    for key in ("visual_head", "semantic_head"):
        h = doc[key]
        heads.append(Head([_unarr(w) for w in h["weights"]], [_unarr(b) for b in h["biases"]]))
    params = ModelParams(heads[0], heads[1], _unarr(doc["visual_prototypes"]),
                         tuple(doc["seen_classes"]), Hyperparams(**doc["hyperparams"]),
                         _unarr(doc["input_shift"]), _unarr(doc["input_scale"]))
    if not np.all(np.isfinite(params.flat())):
        raise ModelError("non-finite parameter values in checkpoint")
    return params


def save_params(params: ModelParams, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(params_to_json(params, extra), fh, sort_keys=True)
        fh.write("\n")


def load_params(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    with open(path, encoding="utf-8") as fh:
        return params_from_json(json.load(fh))
