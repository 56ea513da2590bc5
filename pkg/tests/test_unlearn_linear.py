import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from muso.data import PM_ONE
from muso.numerics import projector_exact, projector_woodbury
from muso.rf_model import featurize, init_head, sample_rf_map
from muso.unlearn_linear import (
    InterpolationError,
    RelabelResult,
    TeacherConfig,
    amnesiac_labels,
    badteacher_labels,
    finetune,
    gap_decomposition,
    mixed_features,
    muso_labels,
    retrain,
)

from _instances import kkt_minnorm, rel, rf_instance


def muso_finetune(inst, lam=0.0):
    proj = projector_exact(inst["Z_r"], lam)
    y = muso_labels(inst["Z_u"], proj, inst["w_p"], inst["w_init"]).y
    return finetune(inst["Z_r"], inst["y_r"], inst["Z_u"], y, inst["w_p"], lam)


class TestMusoLabels:
    def test_pretrained_equals_init(self, rng):
        Z_r, Z_u = rng.standard_normal((10, 3)), rng.standard_normal((10, 2))
        w = rng.standard_normal((10, 1))
        y = muso_labels(Z_u, projector_exact(Z_r), w, w).y
        np.testing.assert_allclose(y, Z_u.T @ w, atol=1e-12)

    def test_forget_span_inside_retain_span(self, rng):
        inst = rf_instance(rng, D=40, N=12, n_u=3)
        # forget columns rebuilt as combinations of retain columns
        Z_u = inst["Z_r"] @ rng.standard_normal((inst["Z_r"].shape[1], 3))
        w_p = inst["w_p"]
        y = muso_labels(Z_u, projector_exact(inst["Z_r"]), w_p, inst["w_init"]).y
        np.testing.assert_allclose(y, Z_u.T @ w_p, atol=1e-9)

    def test_exactness_one_instance(self, rng):
        inst = rf_instance(rng, D=40, N=20, n_u=5)
        w_r = retrain(inst["Z_r"], inst["y_r"], inst["w_init"])
        assert rel(muso_finetune(inst), w_r) < 1e-8

    @given(seed=st.integers(0, 2**31), zero=st.booleans(), C=st.sampled_from([1, 3]))
    def test_exactness_property(self, seed, zero, C):
        inst = rf_instance(np.random.default_rng(seed), C=C, zero_init=zero)
        w_r = retrain(inst["Z_r"], inst["y_r"], inst["w_init"])
        assert rel(muso_finetune(inst), w_r) < 1e-8

    def test_woodbury_projector_path(self, rng):
        inst = rf_instance(rng, D=60, N=20, n_u=4)
        proj = projector_woodbury(inst["Z_r"], 1e-8)
        y = muso_labels(inst["Z_u"], proj, inst["w_p"], inst["w_init"]).y
        w_u = finetune(inst["Z_r"], inst["y_r"], inst["Z_u"], y, inst["w_p"])
        assert rel(w_u, retrain(inst["Z_r"], inst["y_r"], inst["w_init"])) < 1e-5

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="dimension"):
            muso_labels(rng.standard_normal((5, 2)), projector_exact(rng.standard_normal((6, 2))),
                        np.zeros((6, 1)), np.zeros((6, 1)))


class TestFinetuneRetrain:
    def test_finetune_fixed_point(self, rng):
        inst = rf_instance(rng, D=30, N=10, n_u=3)
        w_p = inst["w_p"]
        w_u = finetune(inst["Z_r"], inst["Z_r"].T @ w_p, inst["Z_u"], inst["Z_u"].T @ w_p, w_p)
        np.testing.assert_allclose(w_u, w_p, atol=1e-12)

    def test_finetune_interpolates_other_labels(self, rng):
        inst = rf_instance(rng, D=30, N=10, n_u=3)
        y_t = rng.standard_normal(inst["y_u"].shape)
        w_u = finetune(inst["Z_r"], inst["y_r"], inst["Z_u"], y_t, inst["w_p"])
        Z_a = np.hstack([inst["Z_r"], inst["Z_u"]])
        assert rel(Z_a.T @ w_u, np.vstack([inst["y_r"], y_t])) < 1e-8

    def test_retrain_simple(self):
        w = retrain(np.array([[1.0], [0.0]]), np.array([2.0]), np.zeros(2))
        np.testing.assert_allclose(w[:, 0], [2.0, 0.0])

    def test_retrain_fixed_point(self, rng):
        Z, w0 = rng.standard_normal((9, 4)), rng.standard_normal((9, 1))
        np.testing.assert_allclose(retrain(Z, Z.T @ w0, w0), w0, atol=1e-12)

    def test_retrain_kkt(self, rng):
        inst = rf_instance(rng, D=50, N=20, n_u=5)
        w = retrain(inst["Z_r"], inst["y_r"], inst["w_init"])
        assert rel(w, kkt_minnorm(inst["Z_r"], inst["y_r"], inst["w_init"])) < 1e-8


class TestGapDecomposition:
    def test_optimal_labels_zero_gap(self, rng):
        inst = rf_instance(rng, D=50, N=20, n_u=5)
        g = gap_decomposition(**inst, y_u_tilde=np.zeros_like(inst["y_u"]))
        np.testing.assert_allclose(g.predicted_gap(g.b_vector), 0.0, atol=1e-12)
        w_u = finetune(inst["Z_r"], inst["y_r"], inst["Z_u"], g.b_vector, inst["w_p"])
        assert np.linalg.norm(retrain(inst["Z_r"], inst["y_r"], inst["w_init"]) - w_u) < 1e-8

    @given(seed=st.integers(0, 2**31), zero=st.booleans())
    def test_identity_random_labels(self, seed, zero):
        r = np.random.default_rng(seed)
        inst = rf_instance(r, C=2, zero_init=zero)
        y_t = r.standard_normal(inst["y_u"].shape)
        g = gap_decomposition(**inst, y_u_tilde=y_t)
        w_r = retrain(inst["Z_r"], inst["y_r"], inst["w_init"])
        w_u = finetune(inst["Z_r"], inst["y_r"], inst["Z_u"], y_t, inst["w_p"])
        assert rel(g.predicted_gap(y_t), w_r - w_u) < 1e-8
        assert rel(g.term_rp + g.term_pu, w_r - w_u) < 1e-8
        assert rel(g.term_rp, w_r - inst["w_p"]) < 1e-8
        assert rel(g.term_pu, inst["w_p"] - w_u) < 1e-8

    def test_columns_orthogonal_to_retain(self, rng):
        inst = rf_instance(rng, D=60, N=30, n_u=6)
        g = gap_decomposition(**inst, y_u_tilde=inst["y_u"])
        P = projector_exact(inst["Z_r"])
        assert np.linalg.norm(P.apply(g.C_matrix)) < 1e-8 * np.linalg.norm(g.C_matrix)

    def test_forget_span_inside_retain_span(self, rng):
        D, n_r = 30, 8
        Z_r = rng.standard_normal((D, n_r))
        Z_u = Z_r[:, :2] + 0.5 * Z_r[:, 2:4]
        w_init = rng.standard_normal((D, 1)) / np.sqrt(D)
        y_r = rng.standard_normal((n_r, 1))
        w_p = retrain(Z_r, y_r, w_init)
        # the left factor of C vanishes; M itself does not exist at lam=0
        assert np.abs(projector_exact(Z_r).complement(Z_u)).max() < 1e-8
        y_t = muso_labels(Z_u, projector_exact(Z_r), w_p, w_init).y
        np.testing.assert_allclose(y_t, Z_u.T @ w_p, atol=1e-10)
        w_u = finetune(Z_r, y_r, Z_u, y_t, w_p, lam=1e-10)
        assert rel(w_u, w_p) < 1e-6

    def test_interpolation_checked(self, rng):
        inst = rf_instance(rng, D=30, N=10, n_u=3)
        inst["y_u"] = inst["y_u"] + 1.0
        with pytest.raises(InterpolationError, match="forget"):
            gap_decomposition(**inst, y_u_tilde=inst["y_u"])


class TestBaselines:
    def test_amnesiac_binary_flips(self):
        res = amnesiac_labels(np.array([0, 1, 1, 0]), 2, seed=3, scheme=PM_ONE)
        np.testing.assert_array_equal(res.y[:, 0], [1, -1, -1, 1])

    def test_amnesiac_never_keeps_class(self, rng):
        y = rng.integers(0, 10, 500)
        res = amnesiac_labels(y, 10, seed=1)
        assert np.all(res.y.argmax(axis=1) != y)
        assert set(res.y.argmax(axis=1)) <= set(range(10))

    def test_amnesiac_reproducible(self):
        a = amnesiac_labels(np.arange(5) % 3, 3, seed=8).y
        np.testing.assert_array_equal(a, amnesiac_labels(np.arange(5) % 3, 3, seed=8).y)

    def test_amnesiac_single_class(self):
        with pytest.raises(ValueError):
            amnesiac_labels(np.zeros(3, dtype=int), 1)

    def test_badteacher_zero_input_tanh(self):
        cfg = TeacherConfig(d=4, D=20, sigma=1.0, n_outputs=2, activation="tanh")
        np.testing.assert_array_equal(badteacher_labels(np.zeros((4, 3)), 7, cfg).y, 0.0)

    def test_badteacher_forward_oracle(self, rng):
        cfg = TeacherConfig(d=4, D=20, sigma=2.0, n_outputs=2)
        X = rng.standard_normal((4, 6))
        y = badteacher_labels(X, 11, cfg).y
        map_seed, head_seed = np.random.SeedSequence(11).generate_state(2)
        W = np.random.default_rng(int(map_seed)).standard_normal((20, 4)) / 2.0
        w = np.random.default_rng(int(head_seed)).standard_normal((20, 2)) / np.sqrt(20)
        np.testing.assert_allclose(y, np.maximum(W @ X, 0).T @ w, atol=1e-12)
        np.testing.assert_array_equal(y, badteacher_labels(X, 11, cfg).y)


class TestMixedFeatures:
    def test_midpoint(self, rng):
        a, b = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(mixed_features(a, b, 0.5), (a + b) / 2)

    def test_limit(self, rng):
        a, b = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(mixed_features(a, b, 0.999), b, atol=1e-2 * np.abs(a - b).max())

    @pytest.mark.parametrize("c", [0.0, 1.0, -0.2])
    def test_bad_c(self, rng, c):
        with pytest.raises(ValueError):
            mixed_features(np.ones((2, 2)), np.ones((2, 2)), c)

    def test_column_mismatch(self):
        with pytest.raises(ValueError):
            mixed_features(np.ones((2, 3)), np.ones((2, 2)), 0.5)

    def test_gap_independent_of_c(self, rng):
        inst = rf_instance(rng, D=80, N=30, n_u=6)
        Z_r, y_r = inst["Z_r"], inst["y_r"]
        sub = rng.choice(Z_r.shape[1], 6, replace=False)
        w_r = retrain(Z_r, y_r, inst["w_init"])
        gaps = []
        for c in (0.25, 0.5, 0.9):
            Z_t = mixed_features(Z_r[:, sub], inst["Z_u"], c)
            gaps.append(w_r - finetune(Z_r, y_r, Z_t, y_r[sub], inst["w_p"]))
        for g in gaps[1:]:
            assert rel(g, gaps[0]) < 1e-8


class TestRelabelResult:
    def test_csv_audit(self, tmp_path):
        res = RelabelResult(y=np.array([[0.5, -1.0], [2.0, 0.0]]), method="muso",
                            original_labels=np.array([1, 0]), indices=np.array([4, 9]))
        res.to_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["index", "original_label", "y0", "y1"]
        assert rows[1] == ["4", "1", "0.5", "-1.0"]

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            RelabelResult(y=np.array([np.inf]), method="muso")

    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError):
            RelabelResult(y=np.zeros(2), method="salun")


def test_rf_pipeline_end_to_end(rng):
    rf = sample_rf_map(6, 150, 1.0, seed=4)
    X = rng.standard_normal((6, 40))
    Z = featurize(rf, X)
    Y = rng.standard_normal((40, 2))
    w_init = init_head(150, 2, seed=5).w
    inst = {"Z_r": Z[:, 8:], "Z_u": Z[:, :8], "y_r": Y[8:], "w_init": w_init}
    inst["w_p"] = finetune(inst["Z_r"], inst["y_r"], inst["Z_u"], Y[:8], w_init)
    assert rel(muso_finetune(inst), retrain(inst["Z_r"], inst["y_r"], w_init)) < 1e-8
