import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pogrid.forest import (CLASSIFICATION, REGRESSION, ForestParams, RandomForest, Tree, forest_from_bytes,
                           forest_to_bytes, forests_from_bytes, forests_to_bytes, grid_from_bytes,
                           grid_to_bytes, oob_accuracy, predict_class, predict_regression, train_forest,
                           train_percell_forests, train_perlatent_forests)
from pogrid.grid import LEVELS

FULL_TREE = ForestParams(n_trees=1, mtry=None, bootstrap=False)


def leaf(value):
    value = np.asarray(value, dtype=np.float64)
    return Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                value[None] if value.ndim else value.reshape(1))


def walk(tree, x):
    """Scalar traversal, independent of Tree.apply."""
    k = 0
    while tree.feature[k] >= 0:
        k = tree.left[k] if x[tree.feature[k]] <= tree.threshold[k] else tree.right[k]
    return k


def xor_data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 2))
    return X, ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)


def test_full_tree_memorizes_distinct_points():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(500, 5))
    y = rng.integers(0, 6, size=500)
    forest = train_forest(X, y, ForestParams(n_trees=1, mtry=5, bootstrap=False), n_classes=6)
    assert np.array_equal(forest.predict_index(X), y)


def test_full_tree_memorizes_regression_targets():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(100, 3))
    y = rng.normal(size=100)
    forest = train_forest(X, y, ForestParams(n_trees=1, mtry=3, bootstrap=False), REGRESSION)
    assert np.array_equal(forest.predict_mean(X), y)


def test_constant_target_gives_single_leaf():
    X = np.random.default_rng(3).normal(size=(40, 4))
    forest = train_forest(X, np.full(40, 2), ForestParams(n_trees=5), n_classes=6)
    assert all(t.n_nodes == 1 for t in forest.trees)
    assert set(forest.predict_index(np.random.default_rng(4).normal(size=(20, 4)))) == {2}
    reg = train_forest(X, np.full(40, 0.25), ForestParams(n_trees=3), REGRESSION)
    assert predict_regression(reg, [9.0, 9.0, 9.0, 9.0]) == 0.25


def test_xor_out_of_bag_accuracy():
    X, y = xor_data()
    forest = train_forest(X, y, ForestParams(n_trees=50, mtry=2, rng_seed=0))
    assert oob_accuracy(forest, X, y) > 0.95


def test_vote_tie_goes_to_lower_level():
    counts = lambda k: np.eye(6)[k]
    forest = RandomForest((leaf(counts(2)), leaf(counts(3))), CLASSIFICATION, 1, ForestParams(n_trees=2), 6)
    assert predict_class(forest, [0.0], LEVELS) == 0.4
    unanimous = RandomForest((leaf(counts(4)),) * 3, CLASSIFICATION, 1, ForestParams(n_trees=3), 6)
    assert predict_class(unanimous, [0.0], LEVELS) == 0.8


def test_regression_is_tree_mean():
    forest = RandomForest((leaf(0.0), leaf(1.0)), REGRESSION, 2, ForestParams(n_trees=2))
    assert predict_regression(forest, [3.0, 4.0]) == 0.5


def test_votes_match_traversal_oracle():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(120, 6))
    y = rng.integers(0, 4, size=120)
    forest = train_forest(X, y, ForestParams(n_trees=7, rng_seed=9), n_classes=4)
    probe = rng.normal(size=(50, 6))
    for x, got in zip(probe, forest.predict_index(probe)):
        votes = [0] * 4
        for t in forest.trees:
            votes[int(np.argmax(t.value[walk(t, x)]))] += 1
        assert got == votes.index(max(votes))


def test_regression_matches_summation_oracle():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(80, 4))
    y = X[:, 0] * 2 - X[:, 2]
    forest = train_forest(X, y, ForestParams(n_trees=6, rng_seed=2), REGRESSION)
    for x in rng.normal(size=(20, 4)):
        want = sum(t.value[walk(t, x)] for t in forest.trees) / len(forest.trees)
        assert predict_regression(forest, x) == pytest.approx(want, abs=1e-12)


def test_split_tie_prefers_lowest_feature():
    # both features separate the classes perfectly
    X = np.array([[0.0, 0.0], [1.0, 1.0]])
    forest = train_forest(X, [0, 1], ForestParams(n_trees=1, mtry=2, bootstrap=False))
    tree = forest.trees[0]
    assert tree.feature[0] == 0 and tree.threshold[0] == 0.5


def test_dimension_mismatch_rejected():
    forest = train_forest(np.zeros((3, 2)), [0, 1, 0], FULL_TREE)
    with pytest.raises(ValueError):
        forest.predict_index(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        forest.predict_mean(np.zeros((1, 2)))


@pytest.mark.parametrize("kw", [{"n_trees": 0}, {"mtry": 0}, {"min_samples_leaf": 0}])
def test_bad_params_rejected(kw):
    with pytest.raises(ValueError):
        ForestParams(**kw)


def test_mtry_above_dimension_rejected():
    with pytest.raises(ValueError):
        train_forest(np.zeros((3, 2)), [0, 1, 0], ForestParams(mtry=3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 5))
def test_predictions_stay_in_training_range(seed, d, leaf_size):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, d))
    y = rng.normal(size=30)
    forest = train_forest(X, y, ForestParams(n_trees=3, min_samples_leaf=leaf_size, rng_seed=seed), REGRESSION)
    pred = forest.predict_mean(rng.normal(size=(25, d)) * 3)
    assert np.all((pred >= y.min()) & (pred <= y.max()))
    labels = rng.choice([1, 4], size=30)
    clf = train_forest(X, labels, ForestParams(n_trees=3, rng_seed=seed), n_classes=6)
    assert set(clf.predict_index(rng.normal(size=(25, d)))) <= {1, 4}
    assert np.array_equal(clf.predict_index(X), clf.predict_index(X))


def test_percell_constant_cell():
    rng = np.random.default_rng(7)
    latents = rng.normal(size=(30, 4))
    targets = rng.integers(0, 6, size=(30, 2, 2))
    targets[:, 0, 0] = 5
    grid = train_percell_forests(latents, targets, ForestParams(n_trees=3))
    assert len(grid) == 4
    pred = grid.predict_index(rng.normal(size=(10, 4)))
    assert pred.shape == (10, 2, 2)
    assert np.all(pred[:, 0, 0] == 5)
    assert np.array_equal(grid[1, 0].predict_index(latents), pred_cell(grid, latents, 1, 0))


def pred_cell(grid, X, i, j):
    return grid.predict_index(X)[:, i, j]


def test_percell_determinism_across_workers():
    rng = np.random.default_rng(8)
    latents = rng.normal(size=(40, 5))
    targets = rng.integers(0, 6, size=(40, 20, 20))  # the desk-scale 400 forests
    a = grid_to_bytes(train_percell_forests(latents, targets, ForestParams(n_trees=2, rng_seed=1), workers=1))
    b = grid_to_bytes(train_percell_forests(latents, targets, ForestParams(n_trees=2, rng_seed=1), workers=4))
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()
    back = grid_from_bytes(a)
    assert (back.rows, back.cols, len(back)) == (20, 20, 400)
    assert grid_to_bytes(back) == a


def test_perlatent_single_and_constant_outputs():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(50, 4))
    (single,) = train_perlatent_forests(A, A[:, 0], ForestParams(n_trees=2))
    assert single.task == REGRESSION
    B = np.column_stack([A[:, 1], np.full(50, -0.75)])
    forests = train_perlatent_forests(A, B, ForestParams(n_trees=2))
    assert np.all(forests[1].predict_mean(rng.normal(size=(5, 4))) == -0.75)


def test_perlatent_beats_constant_predictor():
    rng = np.random.default_rng(10)
    M = rng.normal(size=(30, 30)) / np.sqrt(30)
    A = rng.normal(size=(300, 30))
    B = A @ M
    forests = train_perlatent_forests(A[:200], B[:200], ForestParams(n_trees=5, rng_seed=3), workers=2)
    assert len(forests) == 30
    pred = np.column_stack([f.predict_mean(A[200:]) for f in forests])
    mse = np.mean((pred - B[200:]) ** 2, axis=0)
    assert mse.mean() < B[200:].var(axis=0).mean()


def test_forest_file_roundtrip():
    X, y = xor_data(60)
    forest = train_forest(X, y, ForestParams(n_trees=4, rng_seed=5))
    data = forest_to_bytes(forest)
    back, end = forest_from_bytes(data)
    assert end == len(data)
    assert np.array_equal(back.predict_index(X), forest.predict_index(X))
    reg = train_perlatent_forests(X, np.column_stack([X.sum(1), X[:, 0]]), ForestParams(n_trees=2))
    blob = forests_to_bytes(reg)
    assert forests_to_bytes(forests_from_bytes(blob)) == blob
    with pytest.raises(ValueError):
        forest_from_bytes(b"NOPE" + data[4:])
