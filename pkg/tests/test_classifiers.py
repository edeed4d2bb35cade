import numpy as np
import pytest

from classifiers import (
    LABEL_ORDER,
    ForestConfig,
    IssueLabel,
    ModelKind,
    TrainedModel,
    _best_split,
    _grow_tree,
    _tree_proba,
    evaluate,
    init_network,
    label_indices,
    load_model,
    logistic_loss_and_gradient,
    model_to_dict,
    model_from_dict,
    network_loss_and_gradient,
    one_hot,
    predict_label,
    predict_matrix,
    rank_auc,
    save_model,
    train,
)
from errors import DataFormatError, SchemaVersionError
from evalstats import u_statistic
from features import FeatureVector

LABELS = [label.value for label in LABEL_ORDER]


def separable(n_per_class=40, seed=0, spread=0.5):
    """Five Gaussian blobs on the coordinate axes"""
    rng = np.random.default_rng(seed)
    X, y = [], []
    for k, label in enumerate(LABELS):
        centre = np.zeros(len(LABELS))
        centre[k] = 5.0
        X.append(centre + rng.normal(0.0, spread, size=(n_per_class, len(LABELS))))
        y.extend([label] * n_per_class)
    X = np.vstack(X)
    order = rng.permutation(len(y))
    return X[order], [y[i] for i in order]


def finite_difference(loss, value, eps=1e-6):
    grad = np.zeros_like(value)
    for index in np.ndindex(value.shape):
        saved = value[index]
        value[index] = saved + eps
        up = loss()
        value[index] = saved - eps
        down = loss()
        value[index] = saved
        grad[index] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_every_model_kind_learns_separable_data(kind):
    X, y = separable()
    model = train(kind, X[:150], y[:150], seed=3)
    result = evaluate(model, X[150:], y[150:])
    assert result.accuracy >= 0.95
    assert result.n == 50


@pytest.mark.parametrize("seed", range(20))
def test_logistic_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(6, 3))
    y_idx = rng.integers(0, len(LABELS), size=6)
    W = rng.normal(size=(3, len(LABELS)))
    b = rng.normal(size=len(LABELS))
    _, (dW, db) = logistic_loss_and_gradient(W, b, X, y_idx, l2=0.1)
    numeric_W = finite_difference(lambda: logistic_loss_and_gradient(W, b, X, y_idx, 0.1)[0], W)
    numeric_b = finite_difference(lambda: logistic_loss_and_gradient(W, b, X, y_idx, 0.1)[0], b)
    assert relative_error(dW, numeric_W) < 1e-4
    assert relative_error(db, numeric_b) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_network_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 3))
    y_idx = rng.integers(0, len(LABELS), size=5)
    params = init_network(3, 4, rng)
    params["b1"] = rng.normal(size=4)
    _, grads = network_loss_and_gradient(params, X, y_idx, l2=0.05)
    for name, value in params.items():
        numeric = finite_difference(lambda: network_loss_and_gradient(params, X, y_idx, 0.05)[0], value)
        assert relative_error(grads[name], numeric) < 1e-4, name


def test_rank_auc_equals_normalized_u_statistic():
    rng = np.random.default_rng(11)
    for _ in range(200):
        positive = np.round(rng.random(rng.integers(1, 15)), 1)
        negative = np.round(rng.random(rng.integers(1, 15)), 1)
        expected = u_statistic(positive, negative) / (len(positive) * len(negative))
        assert abs(rank_auc(positive, negative) - expected) < 1e-12


def test_evaluate_auc_matches_u_statistic_on_model_scores():
    X, y = separable(n_per_class=12, spread=3.0, seed=5)
    model = train(ModelKind.LOGISTIC_REGRESSION, X[:40], y[:40], seed=0)
    result = evaluate(model, X[40:], y[40:])
    proba = predict_matrix(model, X[40:])
    truth = np.array(y[40:])
    for k, label in enumerate(LABELS):
        positive = truth == label
        if positive.any() and not positive.all():
            expected = u_statistic(proba[positive, k], proba[~positive, k]) / (positive.sum() * (~positive).sum())
            assert abs(result.auc[label] - expected) < 1e-12


def test_evaluate_flags_absent_classes():
    X, y = separable(n_per_class=10)
    model = train(ModelKind.LOGISTIC_REGRESSION, X, y)
    keep = [i for i, label in enumerate(y) if label in ("Logic", "Balance")]
    result = evaluate(model, X[keep], [y[i] for i in keep])
    assert result.auc["Performance"] is None
    assert "Performance" in result.zero_division
    assert result.precision["Performance"] == 0.0
    assert result.to_dict()["labels"] == LABELS


def test_training_is_deterministic_for_a_seed():
    X, y = separable(n_per_class=10)
    first = train(ModelKind.RANDOM_FOREST, X, y, seed=9)
    second = train(ModelKind.RANDOM_FOREST, X, y, seed=9)
    assert model_to_dict(first) == model_to_dict(second)


def test_training_rejects_single_class_and_nan():
    X = np.ones((4, 2))
    with pytest.raises(ValueError):
        train(ModelKind.LOGISTIC_REGRESSION, X, ["Logic"] * 4)
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        train(ModelKind.LOGISTIC_REGRESSION, X, ["Logic", "Balance"] * 2)


def test_unknown_label_is_a_data_error():
    with pytest.raises(DataFormatError):
        train(ModelKind.LOGISTIC_REGRESSION, np.eye(2), ["Logic", "Bug"])


def test_ties_resolve_in_label_order():
    model = TrainedModel(
        kind=ModelKind.LOGISTIC_REGRESSION, hyper={}, feature_names=("a",),
        mean=np.zeros(1), scale=np.ones(1),
        parameters={"W": [[0.0] * len(LABELS)], "b": [0.0] * len(LABELS)},
    )
    vector = FeatureVector(values=np.array([1.0]), names=("a",))
    assert predict_label(model, vector) is IssueLabel.NON_INFORMATIVE


def test_prediction_checks_feature_layout():
    X, y = separable(n_per_class=10)
    model = train(ModelKind.LOGISTIC_REGRESSION, X, y)
    with pytest.raises(ValueError):
        predict_matrix(model, X[:, :3])
    with pytest.raises(ValueError):
        predict_matrix(model, X, feature_names=[f"g{i}" for i in range(X.shape[1])])


@pytest.mark.parametrize("kind", list(ModelKind))
def test_saved_model_predicts_identically(tmp_path, kind):
    X, y = separable(n_per_class=10)
    model = train(kind, X, y, seed=2)
    path = save_model(model, tmp_path / "model.json")
    loaded = load_model(path)
    assert np.allclose(predict_matrix(loaded, X), predict_matrix(model, X), rtol=0, atol=1e-12)


def test_model_schema_version_is_checked():
    X, y = separable(n_per_class=10)
    data = model_to_dict(train(ModelKind.LOGISTIC_REGRESSION, X, y))
    data["schema_version"] = 99
    with pytest.raises(SchemaVersionError):
        model_from_dict(data)


@pytest.mark.parametrize("seed", range(40))
def test_single_stump_forest_predicts_the_majority_class(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(11, 3))
    y = ["Logic"] * 6 + ["Balance"] * 5
    model = train(ModelKind.RANDOM_FOREST, X, y, hyper=ForestConfig(n_trees=1, max_depth=0), seed=seed)
    predicted = predict_matrix(model, X).argmax(axis=1)
    assert [LABELS[k] for k in predicted] == ["Logic"] * 11


def test_split_between_adjacent_floats_keeps_both_children():
    a = np.nextafter(1.0, 2.0)
    b = np.nextafter(a, 2.0)
    X = np.array([[a], [a], [b], [b]])
    Y = one_hot(label_indices(["Logic", "Logic", "Balance", "Balance"]))
    _, feature, threshold = _best_split(X, Y, np.arange(4), np.array([0]), 1)
    assert feature == 0
    assert a <= threshold < b
    tree = _grow_tree(X, Y, np.arange(4), ForestConfig(min_leaf=1), np.random.default_rng(0))
    assert np.all(np.isfinite(tree["value"]))
    assert [LABELS[k] for k in _tree_proba(tree, X).argmax(axis=1)] == ["Logic", "Logic", "Balance", "Balance"]


@pytest.mark.parametrize("seed", range(5))
def test_logistic_regression_ignores_feature_scale_and_offset(seed):
    rng = np.random.default_rng(seed)
    X, y = separable(n_per_class=8, spread=2.0, seed=seed)
    scale = rng.uniform(0.1, 50.0, size=X.shape[1])
    offset = rng.normal(0.0, 100.0, size=X.shape[1])
    plain = train(ModelKind.LOGISTIC_REGRESSION, X, y, seed=seed)
    moved = train(ModelKind.LOGISTIC_REGRESSION, X * scale + offset, y, seed=seed)
    assert np.allclose(predict_matrix(plain, X), predict_matrix(moved, X * scale + offset), atol=1e-8)
