import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import approx_fprime

from mqiv.learners import (
    FittedModel, LearnerError, LearnerSpec, ensemble_weights, fit, irls, logistic_gradient,
    logistic_loglik, polynomial_features, predict, project_simplex, simplex_least_squares,
)


def _grid(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 2))


def test_least_squares_interpolates_two_points():
    model = fit(LearnerSpec("least_squares"), [[0.0], [1.0]], [0.0, 1.0])
    coef = model.params[0]
    np.testing.assert_allclose(coef, [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(model.predict([[0.0], [1.0], [0.25]]), [0.0, 1.0, 0.25], atol=1e-12)


def test_least_squares_rank_deficient_ridge():
    x = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
    model = fit(LearnerSpec("least_squares"), x, np.arange(10.0))
    assert "rank_deficient_ridge" in model.flags
    np.testing.assert_allclose(model.predict(x), np.arange(10.0), atol=1e-5)


def test_least_squares_degree2_recovers_quadratic():
    x = _grid(200)
    y = 1 + x[:, 0] - 2 * x[:, 1] ** 2 + 0.5 * x[:, 0] * x[:, 1]
    model = fit(LearnerSpec("least_squares", {"degree": 2}), x, y)
    np.testing.assert_allclose(model.predict(x), y, atol=1e-10)


def test_logistic_symmetric_half():
    x = np.linspace(-2, 2, 40)
    x = x[x != 0].reshape(-1, 1)
    y = (x[:, 0] > 0).astype(float)
    model = fit(LearnerSpec("logistic"), x, y)
    assert abs(predict(model, np.array([0.0])) - 0.5) <= 1e-6
    assert "irls_not_converged" in model.flags  # separable data: last iterate returned


def test_logistic_recovers_coefficients():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20000, 2))
    beta = np.array([-0.5, 1.0, -2.0])
    y = (rng.random(20000) < 1 / (1 + np.exp(-polynomial_features(x, 1) @ beta))).astype(float)
    design = polynomial_features(x, 1)
    coef, converged, iters = irls(design, y)
    assert converged and iters < 20
    np.testing.assert_allclose(coef, beta, atol=0.08)
    np.testing.assert_allclose(logistic_gradient(coef, design, y), 0, atol=1e-6)


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(20)
    design = polynomial_features(rng.normal(size=(20, 2)), 1)
    y = (rng.random(20) < 0.5).astype(float)
    beta = rng.normal(size=3)
    h = 1e-5
    numeric = np.array([
        (logistic_loglik(beta + h * e, design, y) - logistic_loglik(beta - h * e, design, y)) / (2 * h)
        for e in np.eye(3)
    ])
    analytic = logistic_gradient(beta, design, y)
    assert np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-12)) <= 1e-4
    np.testing.assert_allclose(approx_fprime(beta, logistic_loglik, 1e-7, design, y), analytic, rtol=1e-3)


def test_zero_coefficient_logistic_predicts_half():
    model = fit(LearnerSpec("logistic"), [[0.0], [1.0], [2.0], [3.0]], [0, 1, 0, 1])
    zeroed = FittedModel("logistic", (np.zeros_like(model.params[0]), *model.params[1:]), 1, True)
    np.testing.assert_array_equal(zeroed.predict(np.array([[-5.0], [0.0], [7.0]])), 0.5)


def test_probability_clip():
    fn = lambda x: np.full(x.shape[0], 0.999)  # noqa: E731
    model = fit(LearnerSpec("oracle", {"function": fn}), np.zeros((3, 1)), [0, 1, 1], probability=True)
    assert predict(model, np.array([0.3])) == 0.99
    low = fit(LearnerSpec("oracle", {"function": lambda x: -x[:, 0]}), np.zeros((2, 1)), [0, 1],
              probability=True)
    assert predict(low, np.array([0.5])) == 0.01


def test_regression_unclipped():
    model = fit(LearnerSpec("least_squares"), [[0.0], [1.0]], [0.0, 5.0])
    assert predict(model, np.array([2.0])) == pytest.approx(10.0)


def test_knn_k1_training_point():
    x = _grid(50, 1)
    y = np.arange(50.0)
    model = fit(LearnerSpec("knn", {"k": 1}), x, y)
    np.testing.assert_array_equal(model.predict(x), y)


def test_boosted_stumps_noiseless_rmse():
    x = _grid(2000, 2)
    f = x[:, 0] + x[:, 1] ** 2
    model = fit(LearnerSpec("boosted_stumps", {"rounds": 200, "learning_rate": 0.1}), x, f)
    assert np.sqrt(np.mean((model.predict(x) - f) ** 2)) < 0.05


def test_predict_dimension_mismatch():
    model = fit(LearnerSpec("least_squares"), _grid(20), np.ones(20))
    with pytest.raises(LearnerError):
        model.predict(np.ones((3, 3)))
    with pytest.raises(ValueError):
        predict(model, np.ones(1))


@pytest.mark.parametrize("kind,hp", [
    ("bogus", {}),
    ("knn", {"k": 0}),
    ("knn", {"neighbours": 3}),
    ("boosted_stumps", {"max_depth": 2}),
    ("boosted_stumps", {"learning_rate": 0.0}),
    ("least_squares", {"degree": 3}),
    ("cv_ensemble", {"candidates": []}),
    ("cv_ensemble", {"candidates": [LearnerSpec("cv_ensemble")]}),
    ("cv_ensemble", {"inner_k": 1}),
    ("oracle", {}),
])
def test_spec_validation(kind, hp):
    with pytest.raises(LearnerError):
        LearnerSpec(kind, hp)


def test_spec_candidates_from_dicts():
    spec = LearnerSpec("cv_ensemble", {"candidates": [{"kind": "knn", "hyperparameters": {"k": 3}}]})
    assert spec.hp["candidates"][0] == LearnerSpec("knn", {"k": 3})


def test_logistic_rejects_continuous_targets():
    with pytest.raises(LearnerError):
        fit(LearnerSpec("logistic"), _grid(20), np.linspace(0, 1, 20))
    with pytest.raises(LearnerError):
        fit(LearnerSpec("knn"), _grid(20), np.linspace(0, 1, 20), probability=True)


@pytest.mark.parametrize("spec", [
    LearnerSpec("least_squares", {"degree": 2}),
    LearnerSpec("knn", {"k": 7}),
    LearnerSpec("boosted_stumps", {"rounds": 30}),
    LearnerSpec("cv_ensemble"),
])
def test_fit_deterministic(spec):
    x = _grid(300, 6)
    y = np.sin(3 * x[:, 0]) + x[:, 1]
    p1 = fit(spec, x, y).predict(x)
    p2 = fit(spec, x, y).predict(x)
    assert p1.tobytes() == p2.tobytes()


def test_project_simplex_examples():
    np.testing.assert_allclose(project_simplex(np.array([0.2, 0.8])), [0.2, 0.8])
    np.testing.assert_allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
    np.testing.assert_allclose(project_simplex(np.array([0.0, 0.0])), [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_project_simplex_property(v):
    w = project_simplex(np.array(v))
    assert np.all(w >= 0)
    assert abs(w.sum() - 1) < 1e-9


def test_simplex_least_squares_exact_mixture():
    rng = np.random.default_rng(3)
    preds = rng.normal(size=(500, 3))
    y = preds @ np.array([0.2, 0.0, 0.8])
    np.testing.assert_allclose(simplex_least_squares(preds, y, iterations=5000), [0.2, 0.0, 0.8], atol=1e-4)


def test_ensemble_prefers_oracle_candidate():
    x = _grid(600, 7)
    truth = lambda x: x[:, 0] + x[:, 1] ** 2  # noqa: E731
    zero = lambda x: np.zeros(x.shape[0])  # noqa: E731
    spec = LearnerSpec("cv_ensemble", {"candidates": [
        LearnerSpec("oracle", {"function": truth}), LearnerSpec("oracle", {"function": zero})]})
    model = fit(spec, x, truth(x))
    weights = [w for _, w in model.params[1]]
    assert weights[0] >= 0.99
    assert sum(weights) == pytest.approx(1.0)


def test_ensemble_single_candidate_weight_one():
    spec = LearnerSpec("cv_ensemble", {"candidates": [LearnerSpec("knn", {"k": 3})]})
    model = fit(spec, _grid(50), np.arange(50.0))
    assert ensemble_weights(model) == {"knn": 1.0}


def test_ensemble_duplicate_candidates_match_single_fit():
    x = _grid(200, 8)
    y = x[:, 0] * 3 + np.cos(5 * x[:, 1])
    cand = LearnerSpec("least_squares", {"degree": 2})
    dup = fit(LearnerSpec("cv_ensemble", {"candidates": [cand, cand]}), x, y)
    single = fit(cand, x, y)
    np.testing.assert_allclose(dup.predict(x), single.predict(x), atol=1e-12)
    assert sum(ensemble_weights(dup).values()) == pytest.approx(1.0)


def test_ensemble_drops_failing_candidate():
    def broken(x):
        raise np.linalg.LinAlgError("boom")
    spec = LearnerSpec("cv_ensemble", {"candidates": [
        LearnerSpec("oracle", {"function": broken}), LearnerSpec("knn", {"k": 2})]})
    model = fit(spec, _grid(40), np.arange(40.0))
    assert any(f.startswith("dropped_oracle") for f in model.flags)
    all_broken = LearnerSpec("cv_ensemble", {"candidates": [LearnerSpec("oracle", {"function": broken})]})
    with pytest.raises(LearnerError):
        fit(all_broken, _grid(40), np.arange(40.0))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_ensemble_prediction_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((120, 2))
    y = x[:, 0] - x[:, 1] ** 2 + rng.normal(0, 0.3, 120)
    cands = [LearnerSpec("least_squares"), LearnerSpec("knn", {"k": 5}),
             LearnerSpec("boosted_stumps", {"rounds": 20})]
    model = fit(LearnerSpec("cv_ensemble", {"candidates": cands, "seed": seed}), x, y)
    xs = rng.random((50, 2))
    each = np.column_stack([fit(c, x, y).predict(xs) for c in cands])
    ens = model.predict(xs)
    assert np.all(ens >= each.min(axis=1) - 1e-10)
    assert np.all(ens <= each.max(axis=1) + 1e-10)


def test_ensemble_probability_predictions_clipped():
    x = _grid(300, 9)
    y = (x[:, 0] > 0.5).astype(float)
    model = fit(LearnerSpec("cv_ensemble"), x, y, probability=True)
    p = model.predict(x)
    assert p.min() >= 0.01 and p.max() <= 0.99
