import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import identity_params, random_params
from protogate.dataset import ClassAttributeTable
from protogate.model import (FORMAT_TAG, Hyperparams, ModelError, class_probabilities, dce_loss, head_loss,
                             joint_loss, joint_loss_gradients, joint_loss_parts, load_params, params_from_json,
                             params_to_json, pl_loss, save_params, softmax_neg_dist, sq_dist)

LN3 = math.log(3.0)


def fd_gradient(params, X, labels, table, h=1e-5):
    v = params.flat()
    g = np.empty_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        g[i] = (joint_loss(params.with_flat(v + e), X, labels, table)
                - joint_loss(params.with_flat(v - e), X, labels, table)) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-8):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)))


def random_case(rng, hidden=None, lam=None):
    d, t, C, n, a = (int(rng.integers(1, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                     int(rng.integers(1, 6)), int(rng.integers(1, 4)))
    classes = [f"c{i}" for i in range(C)]
    table = ClassAttributeTable(rng.normal(size=(C, a)), classes)
    hid = int(rng.integers(0, 2)) * 3 if hidden is None else hidden
    lam_v = float(rng.choice([0.0, 0.01, 0.1, 1.0])) if lam is None else lam
    params = random_params(rng, d, t, a, classes, hidden=hid, gamma=float(rng.uniform(0.5, 2.0)), lam=lam_v)
    X = rng.normal(size=(n, d))
    labels = [classes[i] for i in rng.integers(0, C, n)]
    return params, X, labels, table


class TestSqDist:
    def test_identity(self):
        assert sq_dist([1.5, -2.0], [1.5, -2.0]) == 0.0

    def test_three_four_five(self):
        assert sq_dist([0, 0], [3, 4]) == 25.0

    def test_summation_oracle(self):
        rng = np.random.default_rng(0)
        u, v = rng.normal(size=5), rng.normal(size=5)
        assert sq_dist(u, v) == pytest.approx(sum((a - b) ** 2 for a, b in zip(u, v)), rel=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sq_dist([1, 2], [1, 2, 3])


class TestClassProbabilities:
    def test_single_class(self):
        assert class_probabilities([0.3, 0.1], [[5.0, 5.0]], 1.0).tolist() == [1.0]

    def test_equidistant(self):
        p = class_probabilities([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], 2.0)
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)

    def test_hand_value(self):
        # distances (0, ln 3) along one axis
        p = class_probabilities([0.0], [[0.0], [math.sqrt(LN3)]], 1.0)
        np.testing.assert_allclose(p, [0.75, 0.25], atol=1e-12)

    def test_no_overflow_at_large_distances(self):
        p = class_probabilities([0.0], [[30.0], [31.0]], 5.0)
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)

    def test_empty_prototypes(self):
        with pytest.raises(ValueError):
            class_probabilities([0.0], np.zeros((0, 1)), 1.0)

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            class_probabilities([0.0], [[0.0]], 0.0)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 50)), st.floats(0.01, 10))
    def test_simplex(self, D, gamma):
        p, _ = softmax_neg_dist(D[None], gamma)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all((p >= 0) & (p <= 1))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 50)), st.floats(0.01, 10),
           st.floats(-100, 100))
    def test_shift_invariance(self, D, gamma, c):
        p1, _ = softmax_neg_dist(D[None], gamma)
        p2, _ = softmax_neg_dist(D[None] + c, gamma)
        np.testing.assert_allclose(p1, p2, atol=1e-12, rtol=0)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 50)), st.floats(0.01, 10),
           st.floats(0.1, 10))
    def test_gamma_distance_rescaling(self, D, gamma, a):
        p1, _ = softmax_neg_dist(D[None], gamma)
        p2, _ = softmax_neg_dist(D[None] / a, a * gamma)
        np.testing.assert_allclose(p1, p2, atol=1e-12, rtol=0)


class TestLosses:
    def test_dce_single_class_zero(self):
        assert dce_loss([1.0, 2.0], 0, [[0.0, 0.0]], 1.0) == 0.0

    def test_dce_hand_value(self):
        assert dce_loss([0.0], 0, [[0.0], [math.sqrt(LN3)]], 1.0) == pytest.approx(0.2876820724517809, abs=1e-9)

    def test_dce_grows_without_bound(self):
        protos = [[0.0], [4.0]]
        losses = [dce_loss([4.0], 0, protos, g) for g in (1, 10, 100, 1000)]
        assert all(b > a for a, b in zip(losses, losses[1:]))
        assert losses[-1] > 1e4

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 5.0), st.floats(0.0, 1.0), st.floats(0.1, 3.0))
    def test_dce_monotone_in_true_distance(self, x_true, shrink, gamma):
        protos = [[x_true], [-2.0], [3.0]]
        closer = [[x_true * shrink], [-2.0], [3.0]]
        assert dce_loss([0.0], 0, closer, gamma) <= dce_loss([0.0], 0, protos, gamma) + 1e-12

    def test_index_out_of_range(self):
        with pytest.raises(ModelError):
            dce_loss([0.0], 2, [[0.0], [1.0]], 1.0)
        with pytest.raises(ModelError):
            pl_loss([0.0], -1, [[0.0]])

    def test_pl(self):
        assert pl_loss([0.0, 0.0], 0, [[0.0, 0.0]]) == 0.0
        assert pl_loss([0.0, 0.0], 0, [[3.0, 4.0]]) == 25.0
        rng = np.random.default_rng(1)
        z, P = rng.normal(size=4), rng.normal(size=(3, 4))
        assert pl_loss(z, 2, P) == pytest.approx(float(np.sum((z - P[2]) ** 2)), rel=1e-14)

    def test_head_loss_degenerate_cases(self):
        z, P = [0.5, -1.0], [[0.0, 0.0], [2.0, 1.0]]
        assert head_loss(z, 1, P, 1.3, 0.0) == dce_loss(z, 1, P, 1.3)
        assert head_loss([1.0], 0, [[1.0]], 1.0, 0.7) == 0.0

    def test_head_loss_hand_value(self):
        # true prototype at squared distance ln 3, the other at 2 ln 3: p = (0.75, 0.25), pl = ln 3
        P = [[math.sqrt(LN3)], [-math.sqrt(2 * LN3)]]
        np.testing.assert_allclose(class_probabilities([0.0], P, 1.0), [0.75, 0.25], atol=1e-12)
        assert pl_loss([0.0], 0, P) == pytest.approx(LN3, abs=1e-12)
        assert head_loss([0.0], 0, P, 1.0, 0.1) == pytest.approx(0.3975433013185919, abs=1e-9)


class TestJointLoss:
    def test_zero_at_optimum(self):
        hp = Hyperparams(proto_dim=2, lambda_pl=0.5, standardize=False)
        table = ClassAttributeTable(np.array([[0.3, -0.2]]), ["a"])
        x = np.array([[1.0, 2.0]])
        p = identity_params(2, 2, ["a"], [[1.0, 2.0]], hp)
        p.semantic_head.biases[0][:] = [0.3, -0.2]
        assert joint_loss(p, x, ["a"], table) == 0.0
        _, g = joint_loss_gradients(p, x, ["a"], table)
        assert np.max(np.abs(g.flat())) <= 1e-10

    def test_recomputation_oracle(self):
        rng = np.random.default_rng(7)
        params, X, labels, table = random_case(rng, hidden=0)
        hp = params.hp
        A_s = table.rows(params.seen_classes)
        Zv, Zs = params.embed(X)
        idx = params.class_index(labels)
        vis = np.mean([head_loss(Zv[i], idx[i], params.visual_prototypes, hp.gamma, hp.lambda_pl)
                       for i in range(len(X))])
        sem = np.mean([head_loss(Zs[i], idx[i], A_s, hp.gamma, hp.lambda_pl) for i in range(len(X))])
        parts = joint_loss_parts(params, X, labels, table)
        assert parts.visual == pytest.approx(vis, rel=1e-12)
        assert parts.semantic == pytest.approx(sem, rel=1e-12)
        assert parts.total == pytest.approx(vis + sem, rel=1e-12)

    def test_total_dominates_each_head(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            params, X, labels, table = random_case(rng)
            parts = joint_loss_parts(params, X, labels, table)
            assert parts.total >= parts.visual and parts.total >= parts.semantic

    def test_unseen_label_rejected(self):
        rng = np.random.default_rng(9)
        params, X, labels, table = random_case(rng)
        with pytest.raises(ModelError):
            joint_loss(params, X, ["zzz"] * len(X), table)

    def test_empty_batch(self):
        rng = np.random.default_rng(9)
        params, X, labels, table = random_case(rng)
        with pytest.raises(ModelError):
            joint_loss(params, X[:0], [], table)

    def test_semantic_weight_scales_only_semantic_term(self):
        rng = np.random.default_rng(10)
        params, X, labels, table = random_case(rng)
        params0 = params.copy()
        params0.hp = replace(params.hp, semantic_weight=0.0)
        a, b = joint_loss_parts(params, X, labels, table), joint_loss_parts(params0, X, labels, table)
        assert b.total == b.visual == a.visual and b.semantic == a.semantic
        _, g0 = joint_loss_gradients(params0, X, labels, table)
        assert all(np.all(x == 0) for x in g0.semantic_head.arrays())


class TestGradients:
    def test_finite_difference_random_configs(self):
        rng = np.random.default_rng(2024)
        for _ in range(20):
            params, X, labels, table = random_case(rng)
            _, g = joint_loss_gradients(params, X, labels, table)
            assert rel_error(g.flat(), fd_gradient(params, X, labels, table)) < 1e-6

    def test_hidden_layer_variant(self):
        rng = np.random.default_rng(5)
        params, X, labels, table = random_case(rng, hidden=4)
        _, g = joint_loss_gradients(params, X, labels, table)
        assert rel_error(g.flat(), fd_gradient(params, X, labels, table)) < 1e-6

    def test_loss_shared_with_forward(self):
        rng = np.random.default_rng(6)
        params, X, labels, table = random_case(rng)
        parts, _ = joint_loss_gradients(params, X, labels, table)
        assert parts.total == joint_loss(params, X, labels, table)

    def test_prototype_closed_form_without_pl(self):
        # dL/dm_k = sum_i 2 gamma (1{y_i = k} - p_k(z_i)) (m_k - z_i) / n
        rng = np.random.default_rng(11)
        params, X, labels, table = random_case(rng, hidden=0, lam=0.0)
        _, g = joint_loss_gradients(params, X, labels, table)
        Zv, _ = params.embed(X)
        M, gamma = params.visual_prototypes, params.hp.gamma
        y = params.class_index(labels)
        closed = np.zeros_like(M)
        for i in range(len(X)):
            p = class_probabilities(Zv[i], M, gamma)
            for k in range(len(M)):
                closed[k] += 2 * gamma * (float(y[i] == k) - p[k]) * (M[k] - Zv[i])
        closed /= len(X)
        np.testing.assert_allclose(g.visual_prototypes, closed, rtol=1e-10, atol=1e-14)
        # and the closed form itself matches finite differences
        n_head = sum(a.size for a in params.visual_head.arrays() + params.semantic_head.arrays())
        fd = fd_gradient(params, X, labels, table)[n_head:].reshape(M.shape)
        assert rel_error(closed, fd) < 1e-6

    def test_no_attribute_gradient_slot(self):
        rng = np.random.default_rng(12)
        params, X, labels, table = random_case(rng)
        _, g = joint_loss_gradients(params, X, labels, table)
        assert [a.shape for a in g.arrays()] == [a.shape for a in params.arrays()]
        shifted = ClassAttributeTable(table.attributes + 0.5, table.class_ids)
        a = joint_loss_parts(params, X, labels, table)
        b = joint_loss_parts(params, X, labels, shifted)
        assert a.visual == b.visual and a.semantic != b.semantic


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        params, X, labels, table = random_case(rng, hidden=3)
        path = tmp_path / "m.json"
        save_params(params, path, {"note": "x"})
        back = load_params(path)
        np.testing.assert_array_equal(back.flat(), params.flat())
        assert back.hp == params.hp and back.seen_classes == params.seen_classes
        assert joint_loss(back, X, labels, table) == joint_loss(params, X, labels, table)

    def test_format_tag_checked(self):
        rng = np.random.default_rng(3)
        doc = params_to_json(random_case(rng)[0])
        assert doc["format"] == FORMAT_TAG
        doc["format"] = "other/0"
        with pytest.raises(ModelError):
            params_from_json(doc)

    def test_non_finite_rejected(self):
        rng = np.random.default_rng(3)
        doc = params_to_json(random_case(rng)[0])
        doc["visual_prototypes"]["data"][0] = float("nan")
        with pytest.raises(ModelError):
            params_from_json(doc)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_params(tmp_path / "none.json")


class TestHyperparams:
    @pytest.mark.parametrize("kwargs", [{"gamma": 0.0}, {"lambda_pl": -1.0}, {"proto_dim": 0},
                                        {"hidden_dim": -1}, {"semantic_weight": -0.1},
                                        {"unseen_metric": "manhattan"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ModelError):
            Hyperparams(**kwargs)
