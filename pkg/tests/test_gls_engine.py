"""GLS paths against hat-matrix, dense, refit, and closed-form oracles."""
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from levaudit import diff_models as dm
from levaudit import gls_engine as ge
from levaudit.errors import (
    DimensionMismatch,
    FeasibilityGuard,
    IndefiniteCurvature,
    InputFormatError,
    NonConvergence,
    NonOptimalModelWarning,
    NotASimplex,
    RankDeficient,
    SingularHessian,
    SingularWeightedGram,
)
from levaudit.linear_gaussian import Dataset, fit_ols

QUAD = dm.LossKind.QUADRATIC
CE = dm.LossKind.CROSS_ENTROPY

TIGHT = ge.CgConfig(damping=0.0, max_iters=2000, residual_tol=1e-12)


def mark_optimal(model):
    # stamp training metadata on a model used purely as a linear-algebra
    # fixture, so score computations don't warn
    return replace(model, grad_norm=0.0, train_tol=1.0)


def quad_data(n, d, m, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(x=rng.standard_normal((n, d)), y=rng.standard_normal((n, m)))


def overlap_binary_data(n=40, d=2, seed=1):
    # overlapping classes so an unregularized logistic fit has an
    # interior optimum
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    flip = rng.uniform(size=n) < 0.3
    labels = ((x[:, 0] > 0) ^ flip).astype(float)
    return Dataset(x=x, y=labels[:, None])


def augmented_leverage(data):
    aug = Dataset(x=np.hstack([data.x, np.ones((data.n, 1))]), y=data.y)
    return fit_ols(aug).leverage


class TestCgSolve:
    def test_zero_curvature_stub(self):
        jt = np.arange(6.0).reshape(3, 2)
        cfg = ge.CgConfig(damping=1.0)
        z = ge.cg_solve_operator(lambda v: np.zeros_like(v), jt, cfg)
        assert np.allclose(z, jt, atol=1e-12)

    def test_linear_quadratic_dense_solve(self):
        data = quad_data(30, 4, 2, seed=2)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (4, 2), seed=2))
        jt = np.random.default_rng(3).standard_normal((model.p, 2))
        z = ge.cg_solve(model, QUAD, data, jt, TIGHT)
        h = ge._dense_hessian(model, QUAD, data, ge.LayerMask.full(model))
        assert np.allclose(z, np.linalg.solve(h, jt), atol=1e-8)

    def test_huge_damping_limit(self):
        data = quad_data(20, 3, 1, seed=4)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (3, 1), seed=4))
        jt = np.ones((model.p, 1))
        lam = 1e6
        cfg = ge.CgConfig(damping=lam, max_iters=200, residual_tol=1e-10)
        z = ge.cg_solve(model, QUAD, data, jt, cfg)
        assert np.allclose(z, jt / lam, rtol=1e-3)

    def test_non_convergence_carries_partial(self):
        data = quad_data(40, 6, 1, seed=5)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (6, 1), seed=5))
        jt = np.random.default_rng(6).standard_normal((model.p, 1))
        cfg = ge.CgConfig(damping=0.0, max_iters=1, residual_tol=1e-14)
        with pytest.raises(NonConvergence) as exc:
            ge.cg_solve(model, QUAD, data, jt, cfg)
        assert exc.value.residuals is not None
        assert exc.value.partial.shape == jt.shape
        assert np.any(exc.value.partial != 0)

    def test_indefinite_curvature(self):
        jt = np.ones((3, 1))
        cfg = ge.CgConfig(damping=0.0)
        with pytest.raises(IndefiniteCurvature):
            ge.cg_solve_operator(lambda v: -v, jt, cfg)

    def test_zero_column_is_fine(self):
        jt = np.zeros((4, 2))
        jt[:, 1] = [1.0, 0.0, 0.0, 0.0]
        z = ge.cg_solve_operator(lambda v: v, jt, ge.CgConfig(damping=0.0))
        assert np.allclose(z[:, 0], 0.0)
        assert np.allclose(z[:, 1], jt[:, 1], atol=1e-12)

    def test_shape_and_finiteness_validation(self):
        data = quad_data(10, 2, 1)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (2, 1), seed=0))
        with pytest.raises(DimensionMismatch):
            ge.cg_solve(model, QUAD, data, np.ones((99, 1)), TIGHT)
        with pytest.raises(ValueError):
            ge.cg_solve(model, QUAD, data, np.full((model.p, 1), np.nan), TIGHT)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ge.CgConfig(damping=-1.0)
        with pytest.raises(ValueError):
            ge.CgConfig(max_iters=0)
        with pytest.raises(ValueError):
            ge.CgConfig(residual_tol=0.0)


class TestGlsComputeOlsOracle:
    def test_hat_diagonal_scalar_output(self):
        data = quad_data(25, 3, 1, seed=7)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (3, 1), seed=7))
        lev = augmented_leverage(data)
        results = ge.gls_compute(model, QUAD, data, range(data.n), TIGHT)
        for i, g in enumerate(results):
            assert isinstance(g, ge.GlsMatrix)
            assert g.matrix.shape == (1, 1)
            assert g.matrix[0, 0] == pytest.approx(lev[i], abs=1e-8)

    def test_single_point_interpolation(self):
        data = Dataset(x=np.array([[2.0]]), y=np.array([[1.0]]))
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (1, 1), seed=8))
        (g,) = ge.gls_compute(model, QUAD, data, [0], TIGHT)
        assert g.matrix[0, 0] == pytest.approx(1.0, abs=1e-10)

    def test_hat_diagonal_multi_output(self):
        data = quad_data(40, 5, 2, seed=9)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (5, 2), seed=9))
        lev = augmented_leverage(data)
        results = ge.gls_compute(model, QUAD, data, [0, 13, 39], TIGHT)
        for g in results:
            assert np.allclose(g.matrix, lev[g.index] * np.eye(2), atol=1e-8)

    def test_larger_scale_ols_equivalence(self):
        data = quad_data(500, 50, 1, seed=10)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (50, 1), seed=10))
        lev = augmented_leverage(data)
        targets = [0, 123, 499]
        for g in ge.gls_compute(model, QUAD, data, targets, TIGHT):
            assert g.matrix[0, 0] == pytest.approx(lev[g.index], abs=1e-8)


class TestGlsComputeBehavior:
    def test_non_convergence_keeps_batch_going(self):
        data = quad_data(30, 4, 1, seed=11)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (4, 1), seed=11))
        cfg = ge.CgConfig(damping=0.0, max_iters=1, residual_tol=1e-14)
        results = ge.gls_compute(model, QUAD, data, [0, 1, 2], cfg)
        assert len(results) == 3
        for g in results:
            assert isinstance(g, ge.GlsMatrix)
            assert not g.converged
            assert g.cg_residual > cfg.residual_tol

    def test_warns_on_stale_optimality(self):
        data = quad_data(10, 2, 1, seed=12)
        model = dm.init_model(dm.ModelKind.LINEAR, (2, 1), seed=12)
        bad = replace(model, grad_norm=1.0, train_tol=1e-8)
        with pytest.warns(NonOptimalModelWarning):
            ge.gls_compute(bad, QUAD, data, [0], TIGHT)
        with pytest.warns(NonOptimalModelWarning):
            ge.gls_compute(model, QUAD, data, [0], TIGHT)  # no metadata at all

    def test_probability_space_requires_cross_entropy(self):
        data = quad_data(10, 2, 1, seed=13)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (2, 1), seed=13))
        with pytest.raises(ValueError):
            ge.gls_compute(
                model, QUAD, data, [0], TIGHT, space=ge.Space.PROBABILITY
            )

    def test_target_range_validation(self):
        data = quad_data(10, 2, 1, seed=14)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (2, 1), seed=14))
        with pytest.raises(ValueError):
            ge.gls_compute(model, QUAD, data, [10], TIGHT)

    def test_probability_columns_sum_to_zero(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((30, 3))
        y = np.eye(3)[rng.integers(0, 3, size=30)]
        data = Dataset(x=x, y=y)
        model = dm.train(
            dm.init_model(dm.ModelKind.LOGISTIC, (3, 3), seed=15),
            CE,
            data,
            dm.TrainConfig(l2=1e-3, tolerance=1e-9),
        )
        cfg = ge.CgConfig(damping=1e-3, residual_tol=1e-10, max_iters=500)
        results = ge.gls_compute(
            model, CE, data, [0, 5], cfg, space=ge.Space.PROBABILITY
        )
        for g in results:
            assert np.max(np.abs(g.matrix.sum(axis=0))) <= 1e-10

    def test_damping_continuity_on_logistic(self):
        data = overlap_binary_data(seed=16)
        model = dm.train(
            dm.init_model(dm.ModelKind.LOGISTIC, (2, 1), seed=16),
            CE,
            data,
            dm.TrainConfig(l2=1e-3, tolerance=1e-9),
        )
        lams = [4e-2, 2e-2, 1e-2, 5e-3, 2.5e-3]
        mats = []
        for lam in lams:
            cfg = ge.CgConfig(damping=lam, residual_tol=1e-12, max_iters=1000)
            (g,) = ge.gls_compute(model, CE, data, [3], cfg)
            mats.append(g.matrix)
        gaps = [np.linalg.norm(a - b) for a, b in zip(mats, mats[1:])]
        # successive halvings of the damping produce shrinking changes
        assert gaps[0] >= gaps[1] >= gaps[2] >= gaps[3]
        assert gaps[-1] <= gaps[0] / 2


class TestDense:
    def make_trained_zoo(self):
        zoo = []
        data_q = quad_data(20, 3, 2, seed=17)
        zoo.append((mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (3, 2), seed=17)), QUAD, data_q))
        rng = np.random.default_rng(18)
        x = rng.standard_normal((24, 3))
        y3 = np.eye(3)[rng.integers(0, 3, size=24)]
        zoo.append(
            (
                dm.train(
                    dm.init_model(dm.ModelKind.LOGISTIC, (3, 3), seed=18),
                    CE,
                    Dataset(x=x, y=y3),
                    dm.TrainConfig(l2=1e-3, tolerance=1e-8),
                ),
                CE,
                Dataset(x=x, y=y3),
            )
        )
        data_b = overlap_binary_data(seed=19)
        zoo.append(
            (
                dm.train(
                    dm.init_model(dm.ModelKind.LOGISTIC, (2, 1), seed=19),
                    CE,
                    data_b,
                    dm.TrainConfig(l2=1e-3, tolerance=1e-8),
                ),
                CE,
                data_b,
            )
        )
        data_m = quad_data(18, 2, 2, seed=20)
        zoo.append(
            (
                dm.train(
                    dm.init_model(dm.ModelKind.MLP, (2, 4, 2), seed=20),
                    QUAD,
                    data_m,
                    dm.TrainConfig(l2=1e-3, tolerance=1e-7, max_epochs=2000),
                ),
                QUAD,
                data_m,
            )
        )
        return zoo

    def test_cg_agrees_with_dense_across_zoo(self):
        lam = 1e-3
        cfg = ge.CgConfig(damping=lam, residual_tol=1e-11, max_iters=3000)
        for model, loss, data in self.make_trained_zoo():
            for mask in (ge.LayerMask.full(model), ge.LayerMask.last_layers(model, 1)):
                dense = ge.gls_dense(
                    model, loss, data, [0, 3], mask=mask, damping=lam
                )
                cg = ge.gls_compute(model, loss, data, [0, 3], cfg, mask=mask)
                for a, b in zip(dense, cg):
                    assert isinstance(b, ge.GlsMatrix) and b.converged
                    assert np.allclose(a.matrix, b.matrix, atol=1e-6)

    def test_quadratic_linear_identity_blocks(self):
        data = quad_data(15, 3, 2, seed=21)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (3, 2), seed=21))
        lev = augmented_leverage(data)
        for g in ge.gls_dense(model, QUAD, data, [0, 7]):
            assert np.allclose(g.matrix, lev[g.index] * np.eye(2), atol=1e-10)

    def test_identity_hessian_stub(self, monkeypatch):
        monkeypatch.setattr(ge, "_dense_hessian", lambda *a: np.eye(1))
        x = np.array([[1.0], [2.0], [0.5]])
        y = np.array([[1.0], [0.0], [1.0]])
        data = Dataset(x=x, y=y)
        model = mark_optimal(dm.init_model(dm.ModelKind.LOGISTIC, (1, 1), seed=22))
        mask = ge.LayerMask(ranges=((0, 1),))
        (g,) = ge.gls_dense(model, CE, data, [0], mask=mask)
        # J restricted to the first weight is x_0 = 1, H is the identity
        # stub, and the cross-entropy scale is 1/n
        assert g.matrix[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_feasibility_guard(self, monkeypatch):
        monkeypatch.setattr(ge, "_DENSE_MAX_P_SUB", 3)
        data = quad_data(10, 3, 1, seed=23)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (3, 1), seed=23))
        with pytest.raises(FeasibilityGuard):
            ge.gls_dense(model, QUAD, data, [0])

    def test_guard_default_value(self):
        assert ge._DENSE_MAX_P_SUB == 2000

    def test_singular_hessian(self):
        # fewer samples than parameters makes the undamped least-squares
        # Hessian rank deficient
        data = quad_data(3, 3, 1, seed=24)
        model = mark_optimal(dm.init_model(dm.ModelKind.LINEAR, (3, 1), seed=24))
        with pytest.raises(SingularHessian):
            ge.gls_dense(model, QUAD, data, [0], damping=0.0)


class TestBinaryLogistic:
    def trained_binary(self, seed=25, l2=0.0, tol=1e-10):
        data = overlap_binary_data(seed=seed)
        model = dm.train(
            dm.init_model(dm.ModelKind.LOGISTIC, (2, 1), seed=seed),
            CE,
            data,
            dm.TrainConfig(l2=l2, tolerance=tol, max_epochs=3000),
        )
        return model, data

    def test_symmetric_pair(self):
        data = Dataset(x=np.array([[1.0], [-1.0]]), y=np.array([[1.0], [0.0]]))
        model = dm.train(
            dm.init_model(dm.ModelKind.LOGISTIC, (1, 1), seed=26),
            CE,
            data,
            dm.TrainConfig(l2=1e-2, tolerance=1e-10),
        )
        scores = ge.binary_logistic_gls(model, data)
        assert scores[0] == pytest.approx(scores[1], abs=1e-9)

    def test_scores_within_unit_interval(self):
        model, data = self.trained_binary()
        scores = ge.binary_logistic_gls(model, data)
        assert np.all(scores >= -1e-9)
        assert np.all(scores <= 1 + 1e-9)

    def test_matches_engine_probability_space(self):
        model, data = self.trained_binary()
        closed = ge.binary_logistic_gls(model, data)
        cfg = ge.CgConfig(damping=0.0, residual_tol=1e-12, max_iters=1000)
        results = ge.gls_compute(
            model, CE, data, range(data.n), cfg, space=ge.Space.PROBABILITY
        )
        for g in results:
            assert g.matrix[0, 0] == pytest.approx(closed[g.index], abs=1e-6)

    def test_refit_oracle(self):
        from scipy.special import expit

        base = overlap_binary_data(seed=27)
        i, eps = 4, 1e-3
        # a soft label at the probed index keeps the central difference
        # inside the valid target range
        y0 = base.y.copy()
        y0[i, 0] = 0.4
        data = Dataset(x=base.x, y=y0)
        model = dm.train(
            dm.init_model(dm.ModelKind.LOGISTIC, (2, 1), seed=27),
            CE,
            data,
            dm.TrainConfig(l2=0.0, tolerance=1e-10, max_epochs=3000),
        )
        scores = ge.binary_logistic_gls(model, data)
        preds = []
        for sign in (+1.0, -1.0):
            y = y0.copy()
            y[i, 0] += sign * eps
            refit = dm.train(
                model,
                CE,
                Dataset(x=data.x, y=y),
                dm.TrainConfig(l2=0.0, tolerance=1e-10, max_epochs=3000),
            )
            preds.append(expit(dm.predict(refit, data.x[i])[0]))
        fd = (preds[0] - preds[1]) / (2 * eps)
        assert fd == pytest.approx(scores[i], rel=1e-2)

    def test_degenerate_probabilities(self):
        data = Dataset(x=np.array([[1.0], [-1.0]]), y=np.array([[1.0], [0.0]]))
        model = dm.DiffModel(
            kind=dm.ModelKind.LOGISTIC, widths=(1, 1), theta=np.array([800.0, 0.0])
        )
        with pytest.raises(SingularWeightedGram):
            ge.binary_logistic_gls(model, data)

    def test_needs_single_logit(self):
        model = mark_optimal(dm.init_model(dm.ModelKind.LOGISTIC, (2, 3), seed=28))
        data = quad_data(10, 2, 3, seed=28)
        with pytest.raises(DimensionMismatch):
            ge.binary_logistic_gls(model, data)


class TestLastLayerQuadratic:
    def test_square_invertible_features_give_ones(self):
        feats = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        scores = ge.gls_last_layer_quadratic(feats, [0, 1, 2])
        assert np.allclose(scores, 1.0, atol=1e-10)

    def test_scores_sum_to_feature_dim_plus_one(self):
        feats = np.random.default_rng(29).standard_normal((20, 4))
        scores = ge.gls_last_layer_quadratic(feats, range(20))
        assert scores.sum() == pytest.approx(5.0, abs=1e-9)

    def test_matches_engine_on_last_layer_mask(self):
        data = quad_data(18, 2, 2, seed=30)
        model = dm.train(
            dm.init_model(dm.ModelKind.MLP, (2, 4, 2), seed=30),
            QUAD,
            data,
            dm.TrainConfig(l2=1e-3, tolerance=1e-7, max_epochs=2000),
        )
        lam = 1e-3
        cfg = ge.CgConfig(damping=lam, residual_tol=1e-12, max_iters=2000)
        mask = ge.LayerMask.last_layers(model, 1)
        engine = ge.gls_compute(model, QUAD, data, [0, 5, 17], cfg, mask=mask)
        feats = dm.features(model, data.x)[:, :-1]
        closed = ge.gls_last_layer_quadratic(
            feats, [0, 5, 17], damping=model.l2 + lam
        )
        for g, s in zip(engine, closed):
            assert np.allclose(g.matrix, s * np.eye(2), atol=1e-6)

    def test_rank_deficient(self):
        feats = np.ones((5, 2))  # both columns collinear with the bias
        with pytest.raises(RankDeficient):
            ge.gls_last_layer_quadratic(feats, [0])


class TestLastLayerCrossEntropy:
    def test_one_hot_probs_reduce_to_damping_identity(self):
        rng = np.random.default_rng(31)
        feats = rng.standard_normal((6, 2))
        probs = np.eye(3)[rng.integers(0, 3, size=6)]
        lam = 1e-2
        results = ge.gls_last_layer_crossentropy(feats, probs, [0, 4], damping=lam)
        aug = np.hstack([feats, np.ones((6, 1))])
        for g in results:
            expected = np.linalg.norm(aug[g.index]) ** 2 / (6 * lam) * np.eye(3)
            assert np.allclose(g.matrix, expected, atol=1e-10)

    def test_two_class_reduces_to_binary_closed_form(self):
        data = Dataset(
            x=overlap_binary_data(seed=32).x, y=overlap_binary_data(seed=32).y
        )
        model = dm.train(
            dm.init_model(dm.ModelKind.LOGISTIC, (2, 1), seed=32),
            CE,
            data,
            dm.TrainConfig(l2=0.0, tolerance=1e-10, max_epochs=3000),
        )
        from scipy.special import expit

        p1 = expit(dm.predict(model, data.x)[:, 0])
        probs = np.column_stack([p1, 1.0 - p1])
        binary = ge.binary_logistic_gls(model, data)
        targets = [0, 7, 21]
        results = ge.gls_last_layer_crossentropy(
            data.x, probs, targets, damping=1e-8
        )
        for g in results:
            s = dm.softmax_jacobian(probs[g.index])
            prob_mat = s @ g.matrix
            reduced = prob_mat[0, 0] - prob_mat[0, 1]
            assert reduced == pytest.approx(binary[g.index], abs=1e-6)

    def test_matches_engine_on_last_layer_mask(self):
        rng = np.random.default_rng(33)
        x = rng.standard_normal((21, 2))
        y = np.eye(3)[rng.integers(0, 3, size=21)]
        data = Dataset(x=x, y=y)
        model = dm.train(
            dm.init_model(dm.ModelKind.MLP, (2, 4, 3), seed=33),
            CE,
            data,
            dm.TrainConfig(l2=1e-3, tolerance=1e-8, max_epochs=2000),
        )
        lam = 1e-3
        cfg = ge.CgConfig(damping=lam, residual_tol=1e-12, max_iters=3000)
        mask = ge.LayerMask.last_layers(model, 1)
        engine = ge.gls_compute(model, CE, data, [0, 9], cfg, mask=mask)
        feats = dm.features(model, data.x)[:, :-1]
        probs = dm.softmax(dm.predict(model, data.x))
        closed = ge.gls_last_layer_crossentropy(
            feats, probs, [0, 9], damping=model.l2 + lam
        )
        for a, b in zip(engine, closed):
            assert np.allclose(a.matrix, b.matrix, atol=1e-5)

    def test_undamped_is_singular(self):
        rng = np.random.default_rng(34)
        feats = rng.standard_normal((10, 2))
        probs = dm.softmax(rng.standard_normal((10, 3)))
        with pytest.raises(SingularHessian):
            ge.gls_last_layer_crossentropy(feats, probs, [0], damping=0.0)

    def test_simplex_validation(self):
        feats = np.ones((3, 2))
        probs = np.full((3, 2), 0.7)
        with pytest.raises(NotASimplex):
            ge.gls_last_layer_crossentropy(feats, probs, [0])

    def test_feasibility_guard(self, monkeypatch):
        monkeypatch.setattr(ge, "_LAST_LAYER_CE_MAX", 10)
        feats = np.random.default_rng(35).standard_normal((8, 3))
        probs = dm.softmax(np.random.default_rng(35).standard_normal((8, 3)))
        with pytest.raises(FeasibilityGuard):
            ge.gls_last_layer_crossentropy(feats, probs, [0])


class TestRefitConsistency:
    def test_mlp_quadratic_refit(self):
        data = quad_data(14, 2, 1, seed=36)
        model = dm.train(
            dm.init_model(dm.ModelKind.MLP, (2, 3, 1), seed=36),
            QUAD,
            data,
            dm.TrainConfig(l2=1e-3, tolerance=1e-10, max_epochs=3000),
        )
        (g,) = ge.gls_dense(model, QUAD, data, [2], damping=0.0)
        eps = 1e-3
        preds = []
        for sign in (+1.0, -1.0):
            y = data.y.copy()
            y[2, 0] += sign * eps
            refit = dm.train(
                model,
                QUAD,
                Dataset(x=data.x, y=y),
                dm.TrainConfig(l2=1e-3, tolerance=1e-10, max_epochs=3000),
            )
            preds.append(dm.predict(refit, data.x[2])[0])
        fd = (preds[0] - preds[1]) / (2 * eps)
        assert fd == pytest.approx(g.matrix[0, 0], rel=2e-2)


class TestLayerMask:
    def test_full_and_last(self):
        model = dm.init_model(dm.ModelKind.MLP, (3, 4, 2), seed=37)
        full = ge.LayerMask.full(model)
        assert full.p_sub == model.p
        last = ge.LayerMask.last_layers(model, 1)
        assert last.ranges == ((model.layer_ranges[-1][0], model.p),)
        assert last.p_sub == 4 * 2 + 2
        both = ge.LayerMask.last_layers(model, 2)
        assert both.p_sub == model.p

    def test_parse(self):
        model = dm.init_model(dm.ModelKind.MLP, (3, 4, 2), seed=38)
        assert ge.parse_layer_mask("full", model) == ge.LayerMask.full(model)
        assert ge.parse_layer_mask("last:1", model) == ge.LayerMask.last_layers(
            model, 1
        )
        for bad in ("last:0", "last:9", "last:x", "model", "last"):
            with pytest.raises(InputFormatError):
                ge.parse_layer_mask(bad, model)

    def test_validation(self):
        with pytest.raises(ValueError):
            ge.LayerMask(ranges=((3, 2),))
        with pytest.raises(ValueError):
            ge.LayerMask(ranges=((0, 4), (2, 6)))
        mask = ge.LayerMask(ranges=((0, 2), (4, 6)))
        assert mask.p_sub == 4
        assert np.array_equal(mask.indices, [0, 1, 4, 5])

    def test_last_layer_restriction_is_cheaper(self):
        # fitting the model's own outputs makes it exactly optimal with a
        # positive semidefinite curvature, so both paths run to completion
        rng = np.random.default_rng(39)
        x = rng.standard_normal((100, 20))
        model = mark_optimal(dm.init_model(dm.ModelKind.MLP, (20, 40, 5), seed=39))
        data = Dataset(x=x, y=dm.predict(model, x))
        cfg = ge.CgConfig(damping=1e-3, residual_tol=1e-6, max_iters=600)
        targets = [0, 1]

        def clock(mask):
            start = time.perf_counter()
            results = ge.gls_compute(model, QUAD, data, targets, cfg, mask=mask)
            assert all(isinstance(g, ge.GlsMatrix) for g in results)
            return time.perf_counter() - start

        full = clock(ge.LayerMask.full(model))
        last = clock(ge.LayerMask.last_layers(model, 1))
        assert last <= full

    def test_indefinite_targets_fail_in_isolation(self):
        # a randomly initialized network has indefinite curvature under
        # squared error, which should surface per-target, not abort
        rng = np.random.default_rng(41)
        x = rng.standard_normal((30, 4))
        y = rng.standard_normal((30, 2))
        data = Dataset(x=x, y=y)
        model = mark_optimal(dm.init_model(dm.ModelKind.MLP, (4, 8, 2), seed=41))
        cfg = ge.CgConfig(damping=0.0, residual_tol=1e-10, max_iters=500)
        results = ge.gls_compute(model, QUAD, data, [0, 1, 2], cfg)
        assert len(results) == 3
        assert any(isinstance(g, ge.GlsFailure) for g in results)
        for g in results:
            if isinstance(g, ge.GlsFailure):
                assert g.error == "indefinite_curvature"
                assert "damping" in g.message


class TestScalarize:
    def test_scaled_identity(self):
        g = ge.GlsMatrix.from_matrix(0, 0.3 * np.eye(4), ge.Space.LOGIT)
        assert ge.scalarize(g, ge.ScalarOp.TRACE) == pytest.approx(1.2)
        assert ge.scalarize(g, ge.ScalarOp.TRACE) / 4 == pytest.approx(0.3)
        assert ge.scalarize(g, ge.ScalarOp.SPECTRAL) == pytest.approx(0.3, abs=1e-10)

    def test_zero_matrix(self):
        g = ge.GlsMatrix.from_matrix(0, np.zeros((3, 3)), ge.Space.LOGIT)
        for op in ge.ScalarOp:
            assert ge.scalarize(g, op) == 0.0

    def test_spectral_against_power_iteration_oracle(self):
        rng = np.random.default_rng(40)
        mat = rng.standard_normal((3, 3))
        g = ge.GlsMatrix.from_matrix(1, mat, ge.Space.LOGIT)
        # independent straight-line power iteration on mat^T mat
        gram = mat.T @ mat
        v = rng.standard_normal(3)
        for _ in range(5000):
            v = gram @ v
            v /= np.linalg.norm(v)
        oracle = np.sqrt(v @ gram @ v)
        assert ge.scalarize(g, ge.ScalarOp.SPECTRAL) == pytest.approx(
            oracle, abs=1e-8
        )
        assert ge.scalarize(g, ge.ScalarOp.SPECTRAL) == pytest.approx(
            np.linalg.norm(mat, 2), abs=1e-8
        )
        assert ge.scalarize(g, ge.ScalarOp.FROBENIUS) == pytest.approx(
            np.linalg.norm(mat), abs=1e-12
        )

    def test_cached_reduction_validation(self):
        with pytest.raises(ValueError):
            ge.GlsMatrix(
                index=0,
                matrix=np.eye(2),
                space=ge.Space.LOGIT,
                trace=99.0,
                frobenius=np.sqrt(2.0),
                spectral=1.0,
            )
