import numpy as np
import pytest

from treebal.errors import DimensionError, InvalidSpecError
from treebal.forest import (
    EnsembleModel,
    ForestParams,
    ensemble_from_text,
    ensemble_to_text,
    fit_random_forest,
    predict_ensemble,
)
from treebal.trees import count_leaves, leaf_ids


def test_constant_outcome_gives_single_leaf_trees():
    X = np.random.default_rng(0).random((30, 3))
    model = fit_random_forest(X, np.full(30, 7.0), ForestParams(T=5), seed=1)
    for _, _, root in model.trees:
        assert count_leaves(root) == 1
        assert root.value == 7.0
    np.testing.assert_array_equal(predict_ensemble(model, X[:4]), np.full(4, 7.0))


def test_two_point_hand_trace():
    model = fit_random_forest(
        [[0.0], [1.0]],
        [0.0, 10.0],
        ForestParams(T=1, mtry=1, min_leaf=1, bootstrap=False),
        seed=0,
    )
    root = model.trees[0][2]
    assert root.var == 0
    assert root.threshold == 0.5
    ids = leaf_ids(root, [[0.0], [1.0]])
    assert ids[0] != ids[1]


def test_tree_count_matches_params():
    X = np.random.default_rng(1).random((40, 2))
    y = np.random.default_rng(2).random(40)
    model = fit_random_forest(X, y, ForestParams(T=100, min_leaf=2), seed=3)
    assert len(model.trees) == 100
    assert model.B == 1 and model.T == 100


def test_training_data_validation():
    with pytest.raises(InvalidSpecError):
        fit_random_forest([[1.0]], [1.0], ForestParams(T=1), seed=0)
    with pytest.raises(InvalidSpecError):
        fit_random_forest([[1.0], [np.nan]], [0.0, 1.0], ForestParams(T=1), seed=0)
    with pytest.raises(InvalidSpecError):
        fit_random_forest(
            [[1.0], [2.0]], [0.0, 1.0], ForestParams(T=1, mtry=5), seed=0
        )
    with pytest.raises(DimensionError):
        fit_random_forest([[1.0], [2.0]], [0.0, 1.0, 2.0], ForestParams(T=1), seed=0)


def test_unpruned_forest_interpolates_training_data():
    rng = np.random.default_rng(5)
    X = rng.random((40, 4))
    y = rng.random(40)
    model = fit_random_forest(
        X, y, ForestParams(T=10, min_leaf=1, bootstrap=False), seed=2
    )
    np.testing.assert_allclose(predict_ensemble(model, X), y, atol=1e-12)


def test_predict_empty_input():
    X = np.random.default_rng(6).random((20, 3))
    model = fit_random_forest(X, X[:, 0], ForestParams(T=3, min_leaf=2), seed=0)
    assert predict_ensemble(model, np.zeros((0, 3))).shape == (0,)


def test_predict_dimension_mismatch():
    X = np.random.default_rng(7).random((20, 3))
    model = fit_random_forest(X, X[:, 0], ForestParams(T=2, min_leaf=2), seed=0)
    with pytest.raises(DimensionError):
        predict_ensemble(model, np.zeros((4, 2)))


def test_monotone_transform_invariance_of_leaf_memberships():
    for d in range(3):
        rng = np.random.default_rng(40 + d)
        X = rng.standard_normal((150, 5))
        y = rng.standard_normal(150)
        a = fit_random_forest(X, y, ForestParams(T=15), seed=70 + d)
        b = fit_random_forest(np.exp(X), y, ForestParams(T=15), seed=70 + d)
        for (_, _, ra), (_, _, rb) in zip(a.trees, b.trees):
            np.testing.assert_array_equal(leaf_ids(ra, X), leaf_ids(rb, np.exp(X)))


def test_fit_deterministic_given_seed():
    rng = np.random.default_rng(8)
    X = rng.random((60, 3))
    y = rng.random(60)
    a = fit_random_forest(X, y, ForestParams(T=8), seed=5)
    b = fit_random_forest(X, y, ForestParams(T=8), seed=5)
    assert ensemble_to_text(a) == ensemble_to_text(b)
    c = fit_random_forest(X, y, ForestParams(T=8), seed=6)
    assert ensemble_to_text(a) != ensemble_to_text(c)


def test_ensemble_text_roundtrip():
    rng = np.random.default_rng(9)
    X = rng.random((30, 3))
    y = rng.random(30)
    model = fit_random_forest(X, y, ForestParams(T=4, min_leaf=2), seed=1)
    back = ensemble_from_text(ensemble_to_text(model))
    assert ensemble_to_text(back) == ensemble_to_text(model)
    np.testing.assert_array_equal(predict_ensemble(back, X), predict_ensemble(model, X))


def test_ensemble_shape_invariant():
    with pytest.raises(InvalidSpecError):
        EnsembleModel(trees=[], kind="rf", B=1, T=1, p=2)
