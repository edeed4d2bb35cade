import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import softmax
from scipy.stats import rankdata
from sklearn.metrics import confusion_matrix

from artifacts import read_json, write_json
from errors import DataFormatError, SchemaVersionError

# Configure logging
logger = logging.getLogger(__name__)

MODEL_SCHEMA_VERSION = 1


class IssueLabel(str, Enum):
    NON_INFORMATIVE = "NonInformative"
    LOGIC = "Logic"
    PRESENTATION = "Presentation"
    BALANCE = "Balance"
    PERFORMANCE = "Performance"


LABEL_ORDER: Tuple[IssueLabel, ...] = tuple(IssueLabel)
N_LABELS = len(LABEL_ORDER)


class ModelKind(str, Enum):
    LOGISTIC_REGRESSION = "LogisticRegression"
    RANDOM_FOREST = "RandomForest"
    FEED_FORWARD_NET = "FeedForwardNet"


class LogisticConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    l2: float = Field(1e-4, ge=0)
    iterations: int = Field(500, ge=1)
    learning_rate: float = Field(0.1, gt=0)


class ForestConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_trees: int = Field(100, ge=1)
    min_leaf: int = Field(2, ge=1)
    max_depth: Optional[int] = Field(None, ge=0)
    bootstrap: bool = True
    n_jobs: int = 1


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden: int = Field(64, ge=1)
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    l2: float = Field(0.0, ge=0)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: ModelKind = ModelKind.RANDOM_FOREST
    logistic: LogisticConfig = Field(default_factory=LogisticConfig)
    forest: ForestConfig = Field(default_factory=ForestConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)

    def hyper(self, kind: Optional[ModelKind] = None) -> BaseModel:
        kind = ModelKind(kind or self.kind)
        return {
            ModelKind.LOGISTIC_REGRESSION: self.logistic,
            ModelKind.RANDOM_FOREST: self.forest,
            ModelKind.FEED_FORWARD_NET: self.network,
        }[kind]


@dataclass
class TrainedModel:
    kind: ModelKind
    hyper: Dict
    feature_names: Tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray
    parameters: Dict
    label_order: Tuple[IssueLabel, ...] = LABEL_ORDER
    metadata: Dict = field(default_factory=dict)
    training_accuracy: float = 0.0

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


@dataclass
class Evaluation:
    accuracy: float
    precision: Dict[str, float]
    recall: Dict[str, float]
    auc: Dict[str, Optional[float]]
    confusion: np.ndarray
    zero_division: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "auc": self.auc,
            "confusion": self.confusion.tolist(),
            "labels": [label.value for label in LABEL_ORDER],
            "zero_division": self.zero_division,
            "n": self.n,
        }


def label_indices(y: Sequence) -> np.ndarray:
    try:
        return np.array([LABEL_ORDER.index(IssueLabel(label)) for label in y], dtype=np.int64)
    except ValueError as e:
        raise DataFormatError(f"unknown issue label: {e}") from e


def one_hot(y_idx: np.ndarray) -> np.ndarray:
    return np.eye(N_LABELS)[y_idx]


def _standardization(X: np.ndarray):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    # constant columns pass through centred
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


# Logistic regression

def logistic_loss_and_gradient(W: np.ndarray, b: np.ndarray, X: np.ndarray, y_idx: np.ndarray, l2: float):
    """Mean cross-entropy of a softmax model plus (l2/2)·|W|²; returns (loss, (dW, db))"""
    n = X.shape[0]
    P = softmax(X @ W + b, axis=1)
    Y = one_hot(y_idx)
    loss = -np.log(np.clip(P[np.arange(n), y_idx], 1e-300, None)).mean() + 0.5 * l2 * np.sum(W * W)
    residual = (P - Y) / n
    return float(loss), (X.T @ residual + l2 * W, residual.sum(axis=0))


def _train_logistic(X, y_idx, cfg: LogisticConfig, seed: int):
    W = np.zeros((X.shape[1], N_LABELS))
    b = np.zeros(N_LABELS)
    for _ in range(cfg.iterations):
        _, (dW, db) = logistic_loss_and_gradient(W, b, X, y_idx, cfg.l2)
        W -= cfg.learning_rate * dW
        b -= cfg.learning_rate * db
    return {"W": W.tolist(), "b": b.tolist()}


def _logistic_proba(parameters, X):
    return softmax(X @ np.asarray(parameters["W"]) + np.asarray(parameters["b"]), axis=1)


# Random forest

def _gini(counts: np.ndarray, totals: np.ndarray) -> np.ndarray:
    shares = counts / totals[:, None]
    return 1.0 - np.sum(shares * shares, axis=1)


def _best_split(X, Y, rows, features, min_leaf):
    n = len(rows)
    node_Y = Y[rows]
    total = node_Y.sum(axis=0)
    best = None
    for feature in features:
        values = X[rows, feature]
        order = np.argsort(values, kind="stable")
        xs = values[order]
        left = np.cumsum(node_Y[order], axis=0)[:-1]
        right = total - left
        n_left = np.arange(1, n, dtype=np.float64)
        n_right = n - n_left
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            continue
        impurity = (n_left * _gini(left, n_left) + n_right * _gini(right, n_right)) / n
        impurity = np.where(valid, impurity, np.inf)
        position = int(np.argmin(impurity))
        if best is None or impurity[position] < best[0]:
            threshold = (xs[position] + xs[position + 1]) / 2.0
            if threshold >= xs[position + 1]:
                # adjacent floats: the midpoint rounds up and would empty the right child
                threshold = xs[position]
            best = (float(impurity[position]), int(feature), float(threshold))
    return best


def _grow_tree(X, Y, rows, cfg: ForestConfig, rng: np.random.Generator):
    tree = {"feature": [], "threshold": [], "left": [], "right": [], "value": []}
    n_candidates = math.ceil(math.sqrt(X.shape[1]))

    def add_leaf(node_rows):
        counts = Y[node_rows].sum(axis=0)
        tree["feature"].append(-1)
        tree["threshold"].append(0.0)
        tree["left"].append(-1)
        tree["right"].append(-1)
        tree["value"].append((counts / counts.sum()).tolist())
        return len(tree["feature"]) - 1

    def grow(node_rows, depth):
        counts = Y[node_rows].sum(axis=0)
        pure = np.count_nonzero(counts) <= 1
        if pure or len(node_rows) < 2 * cfg.min_leaf or (cfg.max_depth is not None and depth >= cfg.max_depth):
            return add_leaf(node_rows)
        features = rng.choice(X.shape[1], size=n_candidates, replace=False)
        split = _best_split(X, Y, node_rows, features, cfg.min_leaf)
        if split is None or split[0] >= _gini(counts[None, :], np.array([len(node_rows)], dtype=float))[0] - 1e-12:
            return add_leaf(node_rows)
        _, feature, threshold = split
        node = add_leaf(node_rows)
        tree["feature"][node] = feature
        tree["threshold"][node] = threshold
        goes_left = X[node_rows, feature] <= threshold
        tree["left"][node] = grow(node_rows[goes_left], depth + 1)
        tree["right"][node] = grow(node_rows[~goes_left], depth + 1)
        return node

    grow(rows, 0)
    return tree


def _fit_tree(X, Y, cfg: ForestConfig, seed_seq: np.random.SeedSequence):
    rng = np.random.default_rng(seed_seq)
    n = X.shape[0]
    # a depth-0 tree is a single leaf, fitted to the full training class frequencies
    if not cfg.bootstrap or cfg.max_depth == 0:
        rows = np.arange(n)
    else:
        rows = rng.integers(0, n, size=n)
    return _grow_tree(X, Y, rows, cfg, rng)


def _train_forest(X, y_idx, cfg: ForestConfig, seed: int):
    Y = one_hot(y_idx)
    seeds = np.random.SeedSequence(seed).spawn(cfg.n_trees)
    trees = Parallel(n_jobs=cfg.n_jobs)(delayed(_fit_tree)(X, Y, cfg, s) for s in seeds)
    return {"trees": list(trees)}


def _tree_proba(tree, X):
    feature = np.asarray(tree["feature"])
    threshold = np.asarray(tree["threshold"])
    left = np.asarray(tree["left"])
    right = np.asarray(tree["right"])
    node = np.zeros(X.shape[0], dtype=np.int64)
    active = feature[node] >= 0
    while active.any():
        current = node[active]
        goes_left = X[active, feature[current]] <= threshold[current]
        node[active] = np.where(goes_left, left[current], right[current])
        active = feature[node] >= 0
    return np.asarray(tree["value"])[node]


def _forest_proba(parameters, X):
    return np.mean([_tree_proba(tree, X) for tree in parameters["trees"]], axis=0)


# Feed-forward network

def _network_tensors(parameters) -> Dict[str, torch.Tensor]:
    return {
        name: torch.tensor(np.asarray(value), dtype=torch.float64, requires_grad=True)
        for name, value in parameters.items()
    }


def _network_loss(tensors, X: torch.Tensor, y: torch.Tensor, l2: float) -> torch.Tensor:
    hidden = torch.relu(X @ tensors["W1"] + tensors["b1"])
    logits = hidden @ tensors["W2"] + tensors["b2"]
    penalty = 0.5 * l2 * (tensors["W1"].pow(2).sum() + tensors["W2"].pow(2).sum())
    return F.cross_entropy(logits, y) + penalty


def network_loss_and_gradient(parameters: Dict[str, np.ndarray], X: np.ndarray, y_idx: np.ndarray, l2: float = 0.0):
    """Loss and backpropagated gradients for parameters W1, b1, W2, b2"""
    tensors = _network_tensors(parameters)
    loss = _network_loss(tensors, torch.from_numpy(np.asarray(X, dtype=np.float64)),
                         torch.from_numpy(np.asarray(y_idx, dtype=np.int64)), l2)
    loss.backward()
    return float(loss.item()), {name: t.grad.numpy().copy() for name, t in tensors.items()}


def init_network(d: int, hidden: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return {
        "W1": rng.normal(0.0, math.sqrt(2.0 / d), size=(d, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, math.sqrt(1.0 / hidden), size=(hidden, N_LABELS)),
        "b2": np.zeros(N_LABELS),
    }


def _train_network(X, y_idx, cfg: NetworkConfig, seed: int):
    rng = np.random.default_rng(seed)
    tensors = _network_tensors(init_network(X.shape[1], cfg.hidden, rng))
    optimizer = torch.optim.SGD(list(tensors.values()), lr=cfg.learning_rate, momentum=cfg.momentum)
    inputs = torch.from_numpy(X)
    targets = torch.from_numpy(y_idx)
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            loss = _network_loss(tensors, inputs[batch], targets[batch], cfg.l2)
            loss.backward()
            optimizer.step()
        logger.debug(f"Network epoch {epoch + 1}/{cfg.epochs}: batch loss {loss.item():.4f}")
    return {name: t.detach().numpy().tolist() for name, t in tensors.items()}


def _network_proba(parameters, X):
    hidden = np.maximum(X @ np.asarray(parameters["W1"]) + np.asarray(parameters["b1"]), 0.0)
    return softmax(hidden @ np.asarray(parameters["W2"]) + np.asarray(parameters["b2"]), axis=1)


_TRAINERS = {
    ModelKind.LOGISTIC_REGRESSION: _train_logistic,
    ModelKind.RANDOM_FOREST: _train_forest,
    ModelKind.FEED_FORWARD_NET: _train_network,
}
_PREDICTORS = {
    ModelKind.LOGISTIC_REGRESSION: _logistic_proba,
    ModelKind.RANDOM_FOREST: _forest_proba,
    ModelKind.FEED_FORWARD_NET: _network_proba,
}


def train(kind, X: np.ndarray, y: Sequence, hyper: Optional[BaseModel] = None, seed: int = 0,
          feature_names: Optional[Sequence[str]] = None, metadata: Optional[Dict] = None) -> TrainedModel:
    """Fit one classifier on standardized features; deterministic for a given seed"""
    kind = ModelKind(kind)
    hyper = hyper if hyper is not None else ModelConfig().hyper(kind)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"expected a non-empty 2-D feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains NaN or infinite values")
    y_idx = label_indices(y)
    if len(y_idx) != X.shape[0]:
        raise ValueError(f"{X.shape[0]} rows but {len(y_idx)} labels")
    if len(np.unique(y_idx)) < 2:
        raise ValueError("training labels contain a single class")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise ValueError(f"{len(names)} feature names for {X.shape[1]} columns")

    mean, scale = _standardization(X)
    Xs = (X - mean) / scale
    parameters = _TRAINERS[kind](Xs, y_idx, hyper, seed)
    model = TrainedModel(kind=kind, hyper=hyper.model_dump(), feature_names=names, mean=mean, scale=scale,
                         parameters=parameters, metadata=dict(metadata or {}))
    model.training_accuracy = float((predict_matrix(model, X).argmax(axis=1) == y_idx).mean())
    logger.info(f"Trained {kind.value} on {X.shape[0]} rows x {X.shape[1]} features; "
                f"training accuracy {model.training_accuracy:.3f}")
    return model


def predict_matrix(model: TrainedModel, X: np.ndarray, feature_names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Class probabilities in label order, one row per input row"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if feature_names is not None and tuple(feature_names) != model.feature_names:
        raise ValueError("feature names do not match the trained model")
    if X.shape[1] != len(model.feature_names):
        raise ValueError(f"expected {len(model.feature_names)} features, got {X.shape[1]}")
    return _PREDICTORS[model.kind](model.parameters, model.standardize(X))


def predict_proba(model: TrainedModel, vector) -> np.ndarray:
    return predict_matrix(model, vector.values[None, :], vector.names)[0]


def predict_label(model: TrainedModel, vector) -> IssueLabel:
    # argmax keeps the first maximum, i.e. label order breaks ties
    return model.label_order[int(np.argmax(predict_proba(model, vector)))]


def rank_auc(positive_scores: Sequence[float], negative_scores: Sequence[float]) -> float:
    """Probability a positive outranks a negative, ties counting one half (midranks)"""
    positive = np.asarray(positive_scores, dtype=np.float64)
    negative = np.asarray(negative_scores, dtype=np.float64)
    if positive.size == 0 or negative.size == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([positive, negative]))
    u = ranks[:positive.size].sum() - positive.size * (positive.size + 1) / 2.0
    return float(u / (positive.size * negative.size))


def evaluate(model: TrainedModel, X_test: np.ndarray, y_test: Sequence) -> Evaluation:
    y_idx = label_indices(y_test)
    if len(y_idx) == 0:
        raise ValueError("test set is empty")
    proba = predict_matrix(model, X_test)
    predicted = proba.argmax(axis=1)
    confusion = confusion_matrix(y_idx, predicted, labels=list(range(N_LABELS)))
    precision, recall, auc, flagged = {}, {}, {}, []
    for k, label in enumerate(LABEL_ORDER):
        tp = confusion[k, k]
        predicted_k = confusion[:, k].sum()
        actual_k = confusion[k, :].sum()
        if predicted_k == 0:
            flagged.append(label.value)
        precision[label.value] = float(tp / predicted_k) if predicted_k else 0.0
        recall[label.value] = float(tp / actual_k) if actual_k else 0.0
        positive = y_idx == k
        if positive.any() and not positive.all():
            auc[label.value] = rank_auc(proba[positive, k], proba[~positive, k])
        else:
            auc[label.value] = None
    return Evaluation(
        accuracy=float((predicted == y_idx).mean()),
        precision=precision,
        recall=recall,
        auc=auc,
        confusion=confusion,
        zero_division=flagged,
    )


def model_to_dict(model: TrainedModel):
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "kind": model.kind.value,
        "hyper": model.hyper,
        "feature_names": list(model.feature_names),
        "label_order": [label.value for label in model.label_order],
        "standardization": {"mean": model.mean.tolist(), "scale": model.scale.tolist()},
        "parameters": model.parameters,
        "metadata": model.metadata,
        "training_accuracy": model.training_accuracy,
    }


def model_from_dict(data) -> TrainedModel:
    if data.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise SchemaVersionError(f"model schema {data.get('schema_version')!r}, expected {MODEL_SCHEMA_VERSION}")
    labels = tuple(IssueLabel(v) for v in data["label_order"])
    if labels != LABEL_ORDER:
        raise DataFormatError(f"unexpected label order {data['label_order']}")
    return TrainedModel(
        kind=ModelKind(data["kind"]),
        hyper=data["hyper"],
        feature_names=tuple(data["feature_names"]),
        mean=np.asarray(data["standardization"]["mean"], dtype=np.float64),
        scale=np.asarray(data["standardization"]["scale"], dtype=np.float64),
        parameters=data["parameters"],
        label_order=labels,
        metadata=data.get("metadata", {}),
        training_accuracy=float(data.get("training_accuracy", 0.0)),
    )


def save_model(model: TrainedModel, path):
    return write_json(path, model_to_dict(model))


def load_model(path) -> TrainedModel:
    return model_from_dict(read_json(path))
