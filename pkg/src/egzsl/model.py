"""Linear compatibility model and the bilinear base learner that seeds it."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolViolation, ShapeError
from .tensor import AdamState, adam_step, as_matrix, scores, selective_ce_batch


@dataclass(frozen=True)
class AttributeTable:
    """One semantic descriptor per class, rows L2-normalized."""

    rows: np.ndarray

    @classmethod
    def from_raw(cls, rows) -> "AttributeTable":
        rows = as_matrix(rows, "attributes").copy()
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        # all-zero rows stay zero
        np.divide(rows, norms, out=rows, where=norms > 0)
        return cls(rows)

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def attr_dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class CompatibilityModel:
    """Score ``W_y . x`` for every class in the global label set."""

    W: np.ndarray
    # bilinear map the rows were expanded from, when trained here
    projection: np.ndarray | None = None

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("model weights must be finite")

    @property
    def class_count(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]


def clone_model(model: CompatibilityModel) -> CompatibilityModel:
    proj = None if model.projection is None else model.projection.copy()
    return CompatibilityModel(model.W.copy(), proj)


def predict(model: CompatibilityModel, x):
    """Return ``(class, scores)`` for a single feature vector.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"predict expects one feature vector, got shape {x.shape}")
    s = scores(model.W, x)
    return int(np.argmax(s)), s


def predict_batch(model: CompatibilityModel, X) -> np.ndarray:
    return np.argmax(scores(model.W, np.atleast_2d(X)), axis=1)


@dataclass(frozen=True)
class BaseTrainConfig:
    # defaults tuned on synthetic data only
    epochs: int = 30
    minibatch: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def train_base(features, labels, attributes: AttributeTable, seen_classes=None,
               config: BaseTrainConfig = BaseTrainConfig()) -> CompatibilityModel:
    """Fit a bilinear map ``V`` on seen-class data and expand it to all classes.

    Minimizes softmax cross-entropy over the seen classes of ``a_y^T V x``
    plus ``weight_decay/2 * ||V||^2`` with seeded minibatch Adam, then
    returns ``W = A V`` so that unseen classes are scoreable too.
    """
    X = as_matrix(features, "features")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    A = attributes.rows
    if y.size != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} samples but {y.size} labels")
    if X.shape[0] == 0:
        raise ValueError("base set is empty")

    seen = np.unique(y) if seen_classes is None else np.unique(np.asarray(seen_classes, dtype=np.int64))
    if seen.size and (seen.min() < 0 or seen.max() >= attributes.num_classes):
        raise ShapeError("seen class ids exceed the attribute table")
    outside = np.setdiff1d(np.unique(y), seen)
    if outside.size:
        raise ProtocolViolation(f"base labels outside the seen classes: {outside.tolist()}")

    present = np.unique(y)
    empty = np.setdiff1d(seen, present)
    if empty.size:
        warnings.warn(
            f"seen classes without base samples are left out of training: {empty.tolist()}",
            stacklevel=2,
        )

    V = np.zeros((attributes.attr_dim, X.shape[1]))
    adam = AdamState.fresh(V.shape, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            batch = order[start:start + config.minibatch]
            grad_W, _ = selective_ce_batch(A @ V, X[batch], y[batch], present)
            grad_V = A.T @ grad_W + config.weight_decay * V
            V, adam = adam_step(V, grad_V, adam)
    return CompatibilityModel(A @ V, V)
