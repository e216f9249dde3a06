import numpy as np
import pytest

from oracles import pca_eig, platt_grid_fit, svm_dual_pg, svm_primal_objective
from strokeprog.model import (
    DimMismatch,
    OneClass,
    PlattModel,
    _per_sample_costs,
    decision_scores,
    load_bundle,
    pca_fit,
    pca_transform,
    platt_fit,
    platt_probability,
    predict,
    save_bundle,
    svm_fit,
    train_bundle,
)
from strokeprog.tabular import FeatureVector, NameMismatch, TooFewSamples


class TestPCA:
    def test_planar_data_rank_two(self, rng):
        basis = rng.normal(size=(2, 10))
        coords = rng.normal(size=(30, 2))
        x = coords @ basis + rng.normal(size=10)
        model = pca_fit(x)
        assert model.k == 2
        assert float(model.explained_ratio.sum()) == pytest.approx(1.0, abs=1e-9)

    def test_matches_eigendecomposition_oracle(self, rng):
        for _ in range(20):
            x = rng.normal(size=(20, 8))
            model = pca_fit(x, max_k=8, var_target=1.1)
            mean_o, comps_o, vals_o = pca_eig(x)
            np.testing.assert_allclose(model.mean, mean_o, atol=1e-12)
            k = model.k
            np.testing.assert_allclose(model.explained_variance, vals_o[:k], atol=1e-8)
            np.testing.assert_allclose(model.components, comps_o[:k], atol=1e-8)

    def test_rank_bound_small_n(self, rng):
        x = rng.normal(size=(5, 200))
        model = pca_fit(x, max_k=50, var_target=0.9999)
        assert model.k <= 4

    def test_cap_at_12(self, rng):
        x = rng.normal(size=(60, 40))
        model = pca_fit(x)  # white noise needs many components for 95%
        assert model.k == 12

    def test_orthonormal_components(self, rng):
        x = rng.normal(size=(25, 9))
        model = pca_fit(x, max_k=9, var_target=1.1)
        gram = model.components @ model.components.T
        np.testing.assert_allclose(gram, np.eye(model.k), atol=1e-8)

    def test_sign_convention(self, rng):
        x = rng.normal(size=(15, 6))
        model = pca_fit(x)
        for row in model.components:
            assert row[int(np.argmax(np.abs(row)))] > 0

    def test_transform_of_mean_is_zero(self, rng):
        x = rng.normal(size=(12, 5))
        model = pca_fit(x)
        np.testing.assert_allclose(pca_transform(model, x.mean(axis=0)), 0.0, atol=1e-12)

    def test_reconstruction_error_nonincreasing_in_k(self, rng):
        x = rng.normal(size=(30, 10))
        errors = []
        for k in range(1, 9):
            model = pca_fit(x, max_k=k, var_target=1.1)
            scores = pca_transform(model, x)
            recon = scores @ model.components + model.mean
            errors.append(float(np.linalg.norm(x - recon)))
        assert all(a >= b - 1e-9 for a, b in zip(errors, errors[1:]))

    def test_explained_variance_nonincreasing(self, rng):
        x = rng.normal(size=(30, 10))
        model = pca_fit(x)
        assert np.all(np.diff(model.explained_variance) <= 1e-12)

    def test_identity_components_transform_is_centering(self, rng):
        from strokeprog.model import PCAModel

        x = rng.normal(size=(6, 4))
        mean = x.mean(axis=0)
        model = PCAModel(
            mean=mean,
            components=np.eye(4),
            explained_variance=np.ones(4),
            explained_ratio=np.full(4, 0.25),
        )
        np.testing.assert_allclose(pca_transform(model, x), x - mean, atol=1e-15)

    def test_dim_mismatch(self, rng):
        model = pca_fit(rng.normal(size=(10, 4)))
        with pytest.raises(DimMismatch):
            pca_transform(model, np.zeros((3, 7)))

    def test_too_few_samples(self):
        with pytest.raises(TooFewSamples):
            pca_fit(np.ones((1, 4)))


class TestSVM:
    def test_symmetric_separable_pair(self):
        x = np.array([[-1.0], [1.0]])
        y = np.array([-1.0, 1.0])
        model = svm_fit(x, y, C=1.0, balanced=False, seed=0)
        assert model.w[0] > 0
        assert abs(model.b) < 1e-4
        assert np.all(np.sign(decision_scores(model, x)) == y)
        assert model.converged

    def test_objective_matches_dual_oracle(self, rng):
        for trial in range(10):
            n = int(rng.integers(4, 9))
            x = rng.normal(size=(n, 2))
            y = np.ones(n)
            y[: n // 2] = -1.0
            rng.shuffle(y)
            if np.all(y > 0) or np.all(y < 0):
                y[0] = -y[0]
            costs, _ = _per_sample_costs(y, 0.1, True)
            model = svm_fit(x, y, C=0.1, balanced=True, seed=trial)
            w_o, b_o, _ = svm_dual_pg(x, y, costs)
            obj = svm_primal_objective(x, y, costs, model.w, model.b)
            obj_o = svm_primal_objective(x, y, costs, w_o, b_o)
            assert obj <= obj_o + 1e-4, f"trial {trial}: {obj} vs oracle {obj_o}"
            assert abs(obj - obj_o) < 1e-4

    def test_balanced_cost_ratio(self):
        y = np.array([1.0] * 10 + [-1.0] * 30)
        costs, by_class = _per_sample_costs(y, 0.1, True)
        assert by_class[+1] / by_class[-1] == pytest.approx(3.0)
        assert by_class[+1] == pytest.approx(0.1 * 40 / 20)

    def test_kkt_certificate(self, rng):
        x = rng.normal(size=(20, 3))
        y = np.sign(x[:, 0] + 0.3 * rng.normal(size=20))
        y[y == 0] = 1.0
        model = svm_fit(x, y, seed=3)
        assert model.converged
        assert model.kkt_violation < 1e-5

    def test_one_class_rejected(self):
        with pytest.raises(OneClass):
            svm_fit(np.ones((3, 1)), np.ones(3))

    def test_seeded_determinism(self, rng):
        x = rng.normal(size=(12, 3))
        y = np.sign(rng.normal(size=12))
        y[y == 0] = 1.0
        if np.all(y > 0) or np.all(y < 0):
            y[0] = -y[0]
        a = svm_fit(x, y, seed=42)
        b = svm_fit(x, y, seed=42)
        np.testing.assert_array_equal(a.w, b.w)
        assert a.b == b.b
        np.testing.assert_array_equal(a.alpha, b.alpha)

    def test_alpha_in_box(self, rng):
        x = rng.normal(size=(15, 2))
        y = np.sign(x[:, 0])
        y[y == 0] = 1.0
        costs, _ = _per_sample_costs(y, 0.1, True)
        model = svm_fit(x, y)
        assert np.all(model.alpha >= -1e-12)
        assert np.all(model.alpha <= costs + 1e-12)


class TestPlatt:
    def test_separated_scores_monotone(self):
        scores = np.array([-2.0, -1.0, 1.0, 2.0])
        y = np.array([-1.0, -1.0, 1.0, 1.0])
        model = platt_fit(scores, y)
        assert model.A < 0
        probs = platt_probability(model, scores)
        assert np.all(np.diff(probs) > 0)

    def test_constant_scores_give_base_rate(self):
        scores = np.zeros(10)
        y = np.array([1.0] * 6 + [-1.0] * 4)
        model = platt_fit(scores, y)
        t_pos = (6 + 1) / (6 + 2)
        t_neg = 1 / (4 + 2)
        expected = (6 * t_pos + 4 * t_neg) / 10
        probs = platt_probability(model, np.array([-5.0, 0.0, 5.0]))
        oracle_a, oracle_b = platt_grid_fit(scores, y)
        oracle_prob = 1.0 / (1.0 + np.exp(oracle_a * 0.0 + oracle_b))
        assert probs[1] == pytest.approx(expected, abs=1e-6)
        assert probs[1] == pytest.approx(oracle_prob, abs=1e-3)

    def test_matches_grid_search_oracle(self, rng):
        scores = rng.normal(size=10)
        y = np.sign(scores + 0.5 * rng.normal(size=10))
        y[y == 0] = 1.0
        if np.all(y > 0) or np.all(y < 0):
            y[0] = -y[0]
        model = platt_fit(scores, y)
        oracle_a, oracle_b = platt_grid_fit(scores, y)
        grid = np.linspace(scores.min() - 1, scores.max() + 1, 25)
        p_model = platt_probability(model, grid)
        p_oracle = 1.0 / (1.0 + np.exp(oracle_a * grid + oracle_b))
        assert np.max(np.abs(p_model - p_oracle)) < 1e-3

    def test_one_class(self):
        with pytest.raises(OneClass):
            platt_fit(np.arange(4.0), np.ones(4))


def make_features(rng, n=20, d=6) -> list[FeatureVector]:
    names = tuple(f"f{i}" for i in range(d))
    x = rng.normal(size=(n, d))
    w_true = rng.normal(size=d)
    labels = np.sign(x @ w_true + 0.2 * rng.normal(size=n))
    labels[labels == 0] = 1.0
    if np.all(labels > 0) or np.all(labels < 0):
        labels[0] = -labels[0]
    return [
        FeatureVector(patient_id=f"P{i}", names=names, values=x[i], label=int(labels[i]))
        for i in range(n)
    ]


class TestPredictAndBundle:
    def test_probability_exactly_half_labels_unfavorable(self):
        from strokeprog.model import ModelBundle, PCAModel, SvmModel
        from strokeprog.tabular import Scaler

        model = PlattModel(A=-1.0, B=0.0)
        assert float(platt_probability(model, 0.0)) == 0.5
        bundle = ModelBundle(
            scaler=Scaler(mean=np.zeros(2), std=np.ones(2)),
            pca=PCAModel(
                mean=np.zeros(2),
                components=np.eye(2),
                explained_variance=np.ones(2),
                explained_ratio=np.full(2, 0.5),
            ),
            svm=SvmModel(
                w=np.zeros(2), b=0.0, C=0.1, class_weights={+1: 0.1, -1: 0.1},
                alpha=np.zeros(1), converged=True, epochs=1, kkt_violation=0.0,
            ),
            platt=model,
            feature_names=("a", "b"),
            config_id="halfway",
            weight_hash=None,
        )
        fv = FeatureVector(patient_id="X", names=("a", "b"), values=np.ones(2), label=None)
        pred = predict(bundle, fv)
        assert pred.probability == 0.5
        assert pred.label == +1  # the >= rule breaks ties toward unfavorable

    def test_predict_boundary_and_monotonicity(self, rng):
        features = make_features(rng)
        bundle = train_bundle(features, config_id="test", svm_seed=5)
        preds = [predict(bundle, fv) for fv in features]
        for p in preds:
            assert p.label == (1 if p.probability >= 0.5 else -1)
        order = np.argsort([p.score for p in preds])
        probs = np.array([preds[i].probability for i in order])
        assert np.all(np.diff(probs) >= -1e-12)

    def test_name_mismatch(self, rng):
        features = make_features(rng)
        bundle = train_bundle(features, config_id="test")
        bad = FeatureVector(
            patient_id="X",
            names=tuple(f"g{i}" for i in range(6)),
            values=np.zeros(6),
            label=None,
        )
        with pytest.raises(NameMismatch):
            predict(bundle, bad)

    def test_bundle_roundtrip_bit_exact(self, tmp_path, rng):
        features = make_features(rng)
        bundle = train_bundle(features, config_id="rt", weight_hash=0xDEADBEEF, svm_seed=2)
        path = str(tmp_path / "bundle.adct")
        save_bundle(bundle, path)
        loaded = load_bundle(path)
        assert loaded.config_id == "rt"
        assert loaded.weight_hash == 0xDEADBEEF
        assert loaded.feature_names == bundle.feature_names
        for fv in features:
            a = predict(bundle, fv)
            b = predict(loaded, fv)
            assert a.score == b.score
            assert a.probability == b.probability
            assert a.label == b.label

    def test_scaling_covariance_labels_invariant(self, rng):
        features = make_features(rng, n=24, d=5)
        bundle = train_bundle(features, config_id="scale", svm_seed=9)
        base_labels = [predict(bundle, fv).label for fv in features]
        scaled = [
            FeatureVector(
                patient_id=fv.patient_id,
                names=fv.names,
                values=fv.values * np.array([1.0, 250.0, 1.0, 1.0, 1.0]),
                label=fv.label,
            )
            for fv in features
        ]
        bundle2 = train_bundle(scaled, config_id="scale", svm_seed=9)
        new_labels = [predict(bundle2, fv).label for fv in scaled]
        assert base_labels == new_labels
