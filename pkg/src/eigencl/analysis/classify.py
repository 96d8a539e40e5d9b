"""Frozen-embedding downstream classifiers: k-NN and multinomial logistic regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..clustering import sq_distances
from ..errors import ContractError, ParameterError


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    macro_f1: float
    macro_precision: float
    macro_recall: float
    per_class_f1: dict
    confusion: tuple[tuple[int, ...], ...]
    classes: tuple

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "per_class_f1": {str(k): v for k, v in self.per_class_f1.items()},
            "classes": [str(c) for c in self.classes],
            "confusion": [list(r) for r in self.confusion],
        }


def confusion_matrix(y_true, y_pred, classes=None) -> tuple[np.ndarray, list]:
    """Rows are true classes, columns predicted; classes default to the sorted union."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ContractError("prediction and truth lengths differ")
    if classes is None:
        classes = sorted(set(y_true.tolist()) | set(y_pred.tolist()))
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true.tolist(), y_pred.tolist()):
        cm[index[t], index[p]] += 1
    return cm, list(classes)


def metrics_from_confusion(cm, classes) -> ClassMetrics:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(float)
    pred = cm.sum(axis=0).astype(float)
    true = cm.sum(axis=1).astype(float)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    total = cm.sum()
    return ClassMetrics(
        accuracy=float(tp.sum() / total) if total else 0.0,
        macro_f1=float(f1.mean()),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        per_class_f1={c: float(v) for c, v in zip(classes, f1)},
        confusion=tuple(tuple(int(x) for x in row) for row in cm),
        classes=tuple(classes),
    )


def classification_metrics(y_true, y_pred, classes=None) -> ClassMetrics:
    cm, classes = confusion_matrix(y_true, y_pred, classes)
    return metrics_from_confusion(cm, classes)


# ---------------------------------------------------------------------------
# k-NN


def knn_predict(train_x, train_y, test_x, k_neighbors: int = 5) -> np.ndarray:
    """Majority vote over the ``k`` nearest training points (Euclidean).

    A tied vote goes to the tied class whose closest member is nearest.
    """
    train_x = np.asarray(train_x, dtype=float)
    train_y = np.asarray(train_y)
    test_x = np.asarray(test_x, dtype=float)
    if train_x.shape[0] == 0:
        raise ContractError("k-NN needs a non-empty training set")
    if train_y.shape[0] != train_x.shape[0]:
        raise ContractError("one label per training point required")
    if k_neighbors < 1:
        raise ParameterError("k_neighbors must be >= 1")
    k = min(k_neighbors, train_x.shape[0])
    classes, codes = np.unique(train_y, return_inverse=True)
    out = np.empty(test_x.shape[0], dtype=codes.dtype)
    step = 1024
    for s in range(0, test_x.shape[0], step):
        d = sq_distances(test_x[s : s + step], train_x)
        # stable sort keeps the lower training index first among equal distances
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
        for r, idx in enumerate(nearest):
            votes = np.bincount(codes[idx], minlength=classes.size)
            tied = np.flatnonzero(votes == votes.max())
            if tied.size == 1:
                out[s + r] = tied[0]
            else:
                out[s + r] = next(c for c in codes[idx] if c in tied)
    return classes[out]


def knn_classify(train_x, train_y, test_x, test_y, k_neighbors: int = 5):
    pred = knn_predict(train_x, train_y, test_x, k_neighbors)
    return pred, classification_metrics(test_y, pred)


# ---------------------------------------------------------------------------
# logistic regression


@dataclass(frozen=True, eq=False)
class LogRegModel:
    W: np.ndarray  # (d, C)
    b: np.ndarray  # (C,)
    classes: np.ndarray

    def logits(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.W + self.b

    def predict(self, x) -> np.ndarray:
        return self.classes[np.argmax(self.logits(x), axis=1)]


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def logreg_loss(W, b, x, codes, l2_penalty: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus ``l2/2 * |W|^2`` and its gradients w.r.t. W and b."""
    n = x.shape[0]
    logits = x @ W + b
    shift = logits.max(axis=1, keepdims=True)
    logz = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    loss = float(np.mean(logz - logits[np.arange(n), codes]) + 0.5 * l2_penalty * np.sum(W * W))
    g = _softmax(logits)
    g[np.arange(n), codes] -= 1.0
    g /= n
    return loss, x.T @ g + l2_penalty * W, g.sum(axis=0)


def logreg_train(x, y, l2_penalty: float = 1e-4, epochs: int = 500, learning_rate: float = 0.5,
                 seed: int = 0) -> LogRegModel:
    """Full-batch gradient descent from small seeded weights."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    classes, codes = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ContractError("logistic regression needs at least two classes in the training data")
    if l2_penalty < 0 or epochs < 0 or learning_rate <= 0:
        raise ParameterError("l2_penalty and epochs must be >= 0, learning_rate > 0")
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(x.shape[1], classes.size))
    b = np.zeros(classes.size)
    for _ in range(epochs):
        _, gW, gb = logreg_loss(W, b, x, codes, l2_penalty)
        W -= learning_rate * gW
        b -= learning_rate * gb
    return LogRegModel(W, b, classes)


def logreg_classify(model: LogRegModel, x, y):
    pred = model.predict(x)
    return pred, classification_metrics(y, pred)
