import json
import sys

import numpy as np
import pytest

from protogate.dataset import ClassAttributeTable, Dataset, SyntheticConfig, generate_synthetic, make_gzsl_val_split
from protogate.model import Head, Hyperparams, ModelParams, init_params
from protogate.trainer import TrainConfig, train

# acceptance-size pipeline settings shared by the end-to-end tests
E2E_SYNTH = SyntheticConfig(n_seen=8, n_unseen=4, n_val=2, per_class=100, feature_dim=16, attr_dim=8,
                            sigma=1.0, separation=8.0)
E2E_EPOCHS = 100
E2E_GRID = dict(threshold_start=0.0, threshold_step=1e-4, threshold_stop=2.1,
                lambda_candidates=(0.1, 1.0), proto_dim_candidates=(32,), threshold_tie="median")


@pytest.fixture
def tiny_ds():
    """Two seen classes and one unseen class in 3-d, attribute width 2."""
    X = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [3.0, 3.0, 0.0], [3.1, 3.0, 0.0],
                  [1.5, 1.5, 2.0], [1.6, 1.5, 2.0]])
    labels = ["a", "a", "b", "b", "c", "c"]
    table = ClassAttributeTable(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]), ["a", "b", "c"],
                                names=("spots", "stripes"))
    return Dataset(X, labels, table, ["a", "b"], ["c"])


@pytest.fixture(scope="session")
def synth_small():
    cfg = SyntheticConfig(n_seen=5, n_unseen=2, n_val=1, per_class=30, feature_dim=6, attr_dim=4,
                          sigma=0.5, separation=8.0)
    return generate_synthetic(cfg, seed=3)


@pytest.fixture(scope="session")
def trained_small(synth_small):
    ds = synth_small
    sp = make_gzsl_val_split(ds, seed=3)
    hp = Hyperparams(gamma=1.0, lambda_pl=0.1, proto_dim=8)
    params, report = train(ds, sp.train_indices, hp, TrainConfig(epochs=60, seed=3))
    return ds, sp, params, report


def random_params(rng, d, t, a, classes, hidden=0, gamma=1.0, lam=0.1, sw=1.0):
    hp = Hyperparams(gamma=gamma, lambda_pl=lam, proto_dim=t, hidden_dim=hidden, semantic_weight=sw,
                     standardize=False)
    p = init_params(d, a, classes, hp, rng)
    # non-zero biases so every tensor carries a gradient signal
    for head in (p.visual_head, p.semantic_head):
        for b in head.biases:
            b[:] = rng.normal(scale=0.3, size=b.shape)
    return p


def identity_params(d, attr_dim, classes, protos, hp, sem_weight=None):
    """Visual head = identity (t = d), semantic head = given matrix or zeros."""
    W_s = np.zeros((attr_dim, d)) if sem_weight is None else sem_weight
    return ModelParams(Head([np.eye(d)], [np.zeros(d)]), Head([W_s], [np.zeros(attr_dim)]),
                       np.array(protos, dtype=np.float64), tuple(classes), hp)


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in lines:
            terminalreporter.write_line(line)
