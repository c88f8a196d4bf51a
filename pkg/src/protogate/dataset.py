"""Data model, delimited-file ingestion, synthetic generation and split construction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised when dataset files or values violate the data model."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ClassAttributeTable:
    """One semantic prototype row per class."""

    attributes: np.ndarray
    class_ids: tuple
    names: tuple = ()
    centered: bool = False

    def __post_init__(self):
        attrs = np.asarray(self.attributes, dtype=np.float64)
        if attrs.ndim != 2:
            raise DatasetError("attribute table must be a 2-D matrix")
        ids = tuple(str(c) for c in self.class_ids)
        if len(ids) != attrs.shape[0]:
            raise DatasetError(f"{len(ids)} class ids for {attrs.shape[0]} attribute rows")
        if len(set(ids)) != len(ids):
            dup = sorted({c for c in ids if ids.count(c) > 1})
            raise DatasetError(f"duplicate class id(s) in attribute table: {dup}")
        bad = np.argwhere(~np.isfinite(attrs))
        if len(bad):
            r, c = bad[0]
            raise DatasetError(f"non-finite attribute value for class {ids[r]!r} (row {r}, column {c})")
        names = tuple(self.names) or tuple(f"attr_{j}" for j in range(attrs.shape[1]))
        if len(names) != attrs.shape[1]:
            raise DatasetError(f"{len(names)} attribute names for width {attrs.shape[1]}")
        object.__setattr__(self, "attributes", _frozen(attrs))
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_row", {c: i for i, c in enumerate(ids)})

    @property
    def dim(self) -> int:
        return self.attributes.shape[1]

    def row_index(self, class_id) -> int:
        try:
            return self._row[str(class_id)]
        except KeyError:
            raise DatasetError(f"class without attribute row: {class_id!r}") from None

    def rows(self, class_ids: Sequence) -> np.ndarray:
        return self.attributes[[self.row_index(c) for c in class_ids]]

    def __contains__(self, class_id) -> bool:
        return str(class_id) in self._row


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: tuple
    attr_table: ClassAttributeTable
    seen_classes: tuple
    unseen_classes: tuple
    # predefined seen-validation classes (a subset of seen), as benchmark splits provide
    val_classes: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DatasetError(f"features must be an N x d matrix with N, d >= 1, got shape {x.shape}")
        bad = np.argwhere(~np.isfinite(x))
        if len(bad):
            r, c = bad[0]
            raise DatasetError(f"non-finite feature value at row {r}, column {c}")
        labels = tuple(str(y) for y in self.labels)
        if len(labels) != x.shape[0]:
            raise DatasetError(f"{len(labels)} labels for {x.shape[0]} feature rows")
        # canonical class order is attribute-table order
        table = self.attr_table
        seen_set = {str(c) for c in self.seen_classes}
        unseen_set = {str(c) for c in self.unseen_classes}
        overlap = seen_set & unseen_set
        if overlap:
            raise DatasetError(f"classes both seen and unseen: {sorted(overlap)}")
        for c in sorted(seen_set | unseen_set):
            if c not in table:
                raise DatasetError(f"class without attribute row: {c!r}")
        known = seen_set | unseen_set
        for i, y in enumerate(labels):
            if y not in known:
                raise DatasetError(f"label {y!r} at row {i} is neither a seen nor an unseen class")
        val_set = {str(c) for c in self.val_classes}
        if not val_set <= seen_set:
            raise DatasetError(f"validation classes must be seen classes: {sorted(val_set - seen_set)}")
        order = table.class_ids
        object.__setattr__(self, "val_classes", tuple(c for c in order if c in val_set))
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "seen_classes", tuple(c for c in order if c in seen_set))
        object.__setattr__(self, "unseen_classes", tuple(c for c in order if c in unseen_set))
        object.__setattr__(self, "label_rows", _frozen([table.row_index(y) for y in labels], np.int64))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def labels_at(self, indices) -> np.ndarray:
        return np.asarray(self.labels, dtype=object)[np.asarray(indices, dtype=np.int64)]

    def indices_of(self, classes) -> np.ndarray:
        wanted = {str(c) for c in classes}
        return np.array([i for i, y in enumerate(self.labels) if y in wanted], dtype=np.int64)


@dataclass(frozen=True)
class ValidationSplit:
    """The part of a split that parameter selection may read: no test indices."""

    fitting_indices: tuple
    gzsl_val_indices: tuple
    fitting_classes: tuple
    val_seen_classes: tuple


@dataclass(frozen=True)
class SplitSpec:
    fitting_indices: tuple
    gzsl_val_indices: tuple
    train_indices: tuple
    test_indices: tuple
    val_seen_classes: tuple
    fitting_classes: tuple = ()

    def validate(self, ds: Dataset) -> None:
        lists = {
            "fitting": self.fitting_indices,
            "gzsl_val": self.gzsl_val_indices,
            "train": self.train_indices,
            "test": self.test_indices,
        }
        for name, idx in lists.items():
            if any(i < 0 or i >= ds.n for i in idx):
                raise DatasetError(f"{name} indices out of range for N={ds.n}")
            if len(set(idx)) != len(idx):
                raise DatasetError(f"{name} indices contain duplicates")
        if set(self.fitting_indices) & set(self.gzsl_val_indices):
            raise DatasetError("fitting and gzsl_val indices overlap")
        if set(self.train_indices) & set(self.test_indices):
            raise DatasetError("train and test indices overlap")
        seen = set(ds.seen_classes)
        if any(ds.labels[i] not in seen for i in self.fitting_indices):
            raise DatasetError("fitting indices contain a non-seen-class instance")

    def validation(self) -> ValidationSplit:
        return ValidationSplit(self.fitting_indices, self.gzsl_val_indices,
                               self.fitting_classes, self.val_seen_classes)

    def to_json(self) -> dict:
        return {
            "fitting_indices": list(self.fitting_indices),
            "gzsl_val_indices": list(self.gzsl_val_indices),
            "train_indices": list(self.train_indices),
            "test_indices": list(self.test_indices),
            "val_seen_classes": list(self.val_seen_classes),
            "fitting_classes": list(self.fitting_classes),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SplitSpec":
        return cls(**{k: tuple(int(i) for i in d[k]) for k in
                      ("fitting_indices", "gzsl_val_indices", "train_indices", "test_indices")},
                   val_seen_classes=tuple(d["val_seen_classes"]),
                   fitting_classes=tuple(d.get("fitting_classes", ())))


# ---------------------------------------------------------------------------
# file ingestion

def _read_rows(path: Path, delimiter: str) -> list[tuple[int, list[str]]]:
    """Split non-blank lines into tokens, keeping the 0-based line number."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rows.append((lineno, [tok.strip() for tok in line.split(delimiter)]))
    return rows


def _parse_floats(tokens, path, lineno):
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise DatasetError(f"{path}: row {lineno}: {exc}") from None
    for j, v in enumerate(vals):
        if not math.isfinite(v):
            raise DatasetError(f"{path}: non-finite value at row {lineno}, column {j}")
    return vals


def read_feature_matrix(path, delimiter: str = ",", width: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    out = []
    for lineno, toks in _read_rows(path, delimiter):
        vals = _parse_floats(toks, path, lineno)
        w = width if width is not None else (len(out[0]) if out else len(vals))
        if len(vals) != w:
            raise DatasetError(f"{path}: row {lineno} has {len(vals)} columns, expected {w}")
        out.append(vals)
    if not out:
        return np.zeros((0, width or 0))
    return np.array(out, dtype=np.float64)


def load_dataset(manifest_path) -> Dataset:
    """Load a dataset described by a JSON manifest.

    Relative paths in the manifest resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        man = json.load(fh)
    for key in ("features", "labels", "attributes", "seen_classes", "unseen_classes"):
        if key not in man:
            raise DatasetError(f"{manifest_path}: manifest missing key {key!r}")
    base = manifest_path.parent
    delim = man.get("delimiter", ",")

    def resolve(p):
        p = Path(p)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise FileNotFoundError(f"missing file: {p}")
        return p

    feat_path = resolve(man["features"])
    features = read_feature_matrix(feat_path, delim)

    label_path = resolve(man["labels"])
    with open(label_path, encoding="utf-8") as fh:
        labels = [ln.strip() for ln in fh if ln.strip()]
    if len(labels) != features.shape[0]:
        raise DatasetError(
            f"{label_path}: {len(labels)} labels but {feat_path} has {features.shape[0]} rows")

    attr_path = resolve(man["attributes"])
    ids, vals, width = [], [], None
    for lineno, toks in _read_rows(attr_path, delim):
        row = _parse_floats(toks[1:], attr_path, lineno)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DatasetError(f"{attr_path}: row {lineno} has {len(row)} attribute values, expected {width}")
        ids.append(toks[0])
        vals.append(row)
    table = ClassAttributeTable(np.array(vals, dtype=np.float64).reshape(len(vals), width or 0), ids,
                                names=tuple(man.get("attribute_names", ())),
                                centered=bool(man.get("centered", False)))
    seen = [str(c) for c in man["seen_classes"]]
    unseen = [str(c) for c in man["unseen_classes"]]
    for c in seen + unseen:
        if c not in table:
            raise DatasetError(f"{attr_path}: class without attribute row: {c!r}")
    for i, y in enumerate(labels):
        if y not in table:
            raise DatasetError(f"{label_path}: row {i}: label {y!r} references unknown class")
    return Dataset(features, labels, table, seen, unseen, tuple(man.get("val_classes", ())))


def write_dataset(ds: Dataset, directory, delimiter: str = ",") -> Path:
    """Write ``ds`` as manifest + features/labels/attributes files; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fmt = lambda v: repr(float(v))  # shortest round-trip decimal
    with open(directory / "features.csv", "w", encoding="utf-8", newline="\n") as fh:
        for row in ds.features:
            fh.write(delimiter.join(map(fmt, row)) + "\n")
    with open(directory / "labels.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{y}\n" for y in ds.labels)
    t = ds.attr_table
    with open(directory / "attributes.csv", "w", encoding="utf-8", newline="\n") as fh:
        for cid, row in zip(t.class_ids, t.attributes):
            fh.write(delimiter.join([cid, *map(fmt, row)]) + "\n")
    manifest = {
        "features": "features.csv",
        "labels": "labels.txt",
        "attributes": "attributes.csv",
        "seen_classes": list(ds.seen_classes),
        "unseen_classes": list(ds.unseen_classes),
        "val_classes": list(ds.val_classes),
        "attribute_names": list(t.names),
        "centered": t.centered,
        "delimiter": delimiter,
    }
    path = directory / "manifest.json"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# attribute preprocessing

def center_attributes(ds: Dataset, force: bool = False) -> Dataset:
    """Shift every attribute dimension to zero mean over the seen-class rows.

    The same shift is applied to unseen rows so seen/unseen stay comparable.
    """
    t = ds.attr_table
    if t.centered and not force:
        raise DatasetError("attribute table is already centered")
    seen_rows = t.rows(ds.seen_classes)
    shifted = t.attributes - seen_rows.mean(axis=0)
    return replace(ds, attr_table=replace(t, attributes=shifted, centered=True))


def normalize_attributes(ds: Dataset, mode: str = "raw") -> Dataset:
    """Optional attribute preprocessing: ``raw``, ``center``, ``l2`` or ``standardize``."""
    if mode == "raw":
        return ds
    if mode == "center":
        return center_attributes(ds)
    t = ds.attr_table
    a = t.attributes
    if mode == "l2":
        norms = np.linalg.norm(a, axis=1, keepdims=True)
        a = a / np.where(norms > 0, norms, 1.0)
        return replace(ds, attr_table=replace(t, attributes=a))
    if mode == "standardize":
        seen = t.rows(ds.seen_classes)
        sd = seen.std(axis=0)
        a = (a - seen.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        return replace(ds, attr_table=replace(t, attributes=a, centered=True))
    raise DatasetError(f"unknown attribute preprocessing mode {mode!r}")


# ---------------------------------------------------------------------------
# splits

def _rng(seed: int, name: str) -> np.random.Generator:
    from zlib import crc32
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, crc32(name.encode())])


def make_gzsl_val_split(ds: Dataset, val_class_fraction: float | None = None,
                        holdout_fraction: float = 1 / 7, seed: int = 0,
                        test_fraction: float = 0.2,
                        train_indices: Sequence[int] | None = None,
                        test_indices: Sequence[int] | None = None) -> SplitSpec:
    """Build train/test and the fitting / G-ZSL-val sub-split of the training set.

    Without explicit ``train_indices``/``test_indices``, a ``test_fraction`` of
    each seen class is held out for test and every unseen-class instance goes to
    test. Within training, the validation classes (the dataset's predefined
    ``val_classes`` when ``val_class_fraction`` is None, otherwise a random
    ``val_class_fraction`` of the seen classes) play the unseen role; the other
    (fitting) classes give ``1 - holdout_fraction`` of their instances to
    fitting and the rest to G-ZSL-val, together with all validation-class
    instances.
    """
    if not 0 < holdout_fraction < 1:
        raise DatasetError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    if not 0 <= test_fraction < 1:
        raise DatasetError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    seen = ds.seen_classes
    if len(seen) < 2:
        raise DatasetError("need at least 2 seen classes for a G-ZSL-val split")
    if val_class_fraction is None and not ds.val_classes:
        val_class_fraction = 0.25
    if val_class_fraction is None:
        val_classes = ds.val_classes
        if len(val_classes) >= len(seen):
            raise DatasetError("predefined validation classes leave no fitting class")
    else:
        if not 0 < val_class_fraction < 1:
            raise DatasetError(f"val_class_fraction must lie in (0, 1), got {val_class_fraction}")
        n_val = int(round(val_class_fraction * len(seen)))
        if n_val < 1 or n_val >= len(seen):
            raise DatasetError(
                f"val_class_fraction={val_class_fraction} gives {n_val} validation classes out of {len(seen)}")
        rng = _rng(seed, "val_classes")
        pick = sorted(rng.choice(len(seen), size=n_val, replace=False).tolist())
        val_classes = tuple(seen[i] for i in pick)
    fit_classes = tuple(c for c in seen if c not in val_classes)

    labels = np.asarray(ds.labels, dtype=object)
    if train_indices is None:
        rng = _rng(seed, "test")
        train, test = [], []
        for c in seen:
            idx = np.flatnonzero(labels == c)
            idx = idx[rng.permutation(len(idx))]
            k = int(round(test_fraction * len(idx)))
            test.extend(idx[:k].tolist())
            train.extend(idx[k:].tolist())
        test.extend(ds.indices_of(ds.unseen_classes).tolist())
        train_indices, test_indices = sorted(train), sorted(test)
    else:
        train_indices = sorted(int(i) for i in train_indices)
        test_indices = sorted(int(i) for i in (test_indices or ()))

    rng = _rng(seed, "holdout")
    train_arr = np.asarray(train_indices, dtype=np.int64)
    fitting, held = [], []
    for c in fit_classes:
        idx = train_arr[labels[train_arr] == c]
        idx = idx[rng.permutation(len(idx))]
        k = int(round(holdout_fraction * len(idx)))
        held.extend(idx[:k].tolist())
        fitting.extend(idx[k:].tolist())
    val_inst = train_arr[np.isin(labels[train_arr], val_classes)].tolist()
    split = SplitSpec(
        fitting_indices=tuple(sorted(fitting)),
        gzsl_val_indices=tuple(sorted(held + val_inst)),
        train_indices=tuple(train_indices),
        test_indices=tuple(test_indices),
        val_seen_classes=val_classes,
        fitting_classes=fit_classes,
    )
    split.validate(ds)
    return split


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SyntheticConfig:
    n_seen: int = 8
    n_unseen: int = 4
    # seen classes designated as predefined validation classes
    n_val: int = 2
    per_class: int = 100
    feature_dim: int = 16
    attr_dim: int = 8
    sigma: float = 1.0
    separation: float = 8.0
    # Dirichlet concentration of hybrid mixing weights; large values keep hybrids near midpoints
    mix_concentration: float = 50.0
    # std of each hybrid's own attribute offset, relative to attr_scale
    hybrid_noise: float = 0.05
    attr_scale: float = 1.0
    feature_offset: float = 0.0

    def validate(self):
        for name in ("n_seen", "n_unseen", "per_class", "feature_dim", "attr_dim"):
            if getattr(self, name) < 1:
                raise DatasetError(f"synthetic config field {name!r} must be positive, got {getattr(self, name)}")
        for name in ("separation", "attr_scale", "mix_concentration"):
            if not getattr(self, name) > 0:
                raise DatasetError(f"synthetic config field {name!r} must be positive, got {getattr(self, name)}")
        if self.sigma < 0 or self.hybrid_noise < 0:
            raise DatasetError("synthetic config fields 'sigma' and 'hybrid_noise' must be non-negative")
        if not 0 <= self.n_val <= self.n_seen - 2:
            raise DatasetError(f"synthetic config field 'n_val' must lie in [0, n_seen - 2], got {self.n_val}")


def generate_synthetic(config: SyntheticConfig, seed: int = 0) -> Dataset:
    """Gaussian class clusters whose centers are a linear image of the class attributes.

    The ``n_seen - n_val`` base classes get random attributes. Every other class
    (the unseen ones and the predefined validation classes) is a hybrid: a
    near-even mix of two base classes' attributes plus a small private offset,
    each hybrid on a different base pair while pairs last. Unseen and
    validation classes thus come from the same distribution. The linear
    attribute-to-feature map is rescaled so that the closest pair of class
    centers is exactly ``separation`` apart.
    """
    config.validate()
    rng = _rng(seed, "synth")
    A = config.attr_dim
    n_base = config.n_seen - config.n_val
    n_hybrid = config.n_val + config.n_unseen
    base_attr = rng.uniform(0.0, 1.0, size=(n_base, A)) * config.attr_scale
    pairs = [(i, j) for i in range(n_base) for j in range(i + 1, n_base)]
    picks = rng.choice(len(pairs), size=n_hybrid, replace=n_hybrid > len(pairs))
    hybrid_attr = np.empty((n_hybrid, A))
    for h, k in enumerate(picks):
        w = rng.dirichlet(np.full(2, config.mix_concentration))
        private = rng.normal(0.0, config.hybrid_noise * config.attr_scale, size=A)
        hybrid_attr[h] = w @ base_attr[list(pairs[k])] + private
    # class order: base seen, validation (hybrid) seen, unseen
    attrs = np.vstack([base_attr, hybrid_attr])

    proj = rng.normal(size=(config.feature_dim, A))
    centers = (attrs - attrs.mean(axis=0)) @ proj.T
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    min_dist = dist[~np.eye(len(centers), dtype=bool)].min() if len(centers) > 1 else 1.0
    centers = centers * (config.separation / min_dist) + config.feature_offset

    n_cls = config.n_seen + config.n_unseen
    noise = rng.normal(size=(n_cls, config.per_class, config.feature_dim))
    feats = (centers[:, None, :] + config.sigma * noise).reshape(-1, config.feature_dim)
    ids = [f"s{k:02d}" for k in range(config.n_seen)] + [f"u{k:02d}" for k in range(config.n_unseen)]
    labels = [c for c in ids for _ in range(config.per_class)]
    table = ClassAttributeTable(attrs, ids)
    return Dataset(feats, labels, table, ids[:config.n_seen], ids[config.n_seen:],
                   tuple(ids[n_base:config.n_seen]))
