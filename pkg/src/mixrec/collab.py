"""Matrix-factorization collaborative encoder trained with BCE on binarized labels."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .data import Dataset
from .lm import sigmoid

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class UserEmbedder(Protocol):
    """Anything that yields one embedding row per dense user id."""

    def user_matrix(self) -> np.ndarray: ...


@dataclass(frozen=True)
class CollabTrainConfig:
    d1: int = 32
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if self.d1 < 1 or self.learning_rate <= 0:
            raise ValueError("need d1 >= 1 and learning_rate > 0")


@dataclass
class CollabModel:
    user_vectors: np.ndarray
    item_vectors: np.ndarray

    @property
    def d1(self) -> int:
        return self.user_vectors.shape[1]

    def user_matrix(self) -> np.ndarray:
        return self.user_vectors

    def embed_user(self, user_id: int) -> np.ndarray:
        return _row(self.user_vectors, user_id, "user")

    def embed_item(self, item_id: int) -> np.ndarray:
        return _row(self.item_vectors, item_id, "item")

    def score(self, user_id: int, item_id: int) -> float:
        return float(sigmoid(self.embed_user(user_id) @ self.embed_item(item_id)))

    def scores(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return sigmoid(np.einsum("nd,nd->n", self.user_vectors[users], self.item_vectors[items]))


def _row(mat: np.ndarray, idx: int, kind: str) -> np.ndarray:
    if not 0 <= int(idx) < len(mat):
        raise KeyError(f"unknown {kind} id {idx}")
    out = mat[int(idx)].view()
    out.flags.writeable = False
    return out


def bce_loss(model: CollabModel, users, items, labels, weight_decay: float = 0.0) -> float:
    """Mean of ``BCE(sigmoid(u.i), l) + wd/2 (|u|^2 + |i|^2)`` over the given pairs."""
    U, I = model.user_vectors[users], model.item_vectors[items]
    z = np.einsum("nd,nd->n", U, I)
    bce = np.logaddexp(0.0, z) - labels * z
    reg = 0.5 * weight_decay * ((U * U).sum(1) + (I * I).sum(1))
    return float(np.mean(bce + reg))


def bce_grads(model: CollabModel, users, items, labels, weight_decay: float = 0.0):
    """Per-pair gradients of :func:`bce_loss` (before the 1/n of the mean).

    For one pair the user gradient is ``(sigmoid(u.i) - l) * i + wd * u``.
    """
    U, I = model.user_vectors[users], model.item_vectors[items]
    err = sigmoid(np.einsum("nd,nd->n", U, I)) - labels
    return err[:, None] * I + weight_decay * U, err[:, None] * U + weight_decay * I


class _RowAdam:
    """Adam that only touches rows present in the batch (lazy moments)."""

    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m, self.v = np.zeros(shape), np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=np.int64)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, mat, rows, grad):
        self.t[rows] += 1
        t = self.t[rows][:, None]
        self.m[rows] = self.b1 * self.m[rows] + (1 - self.b1) * grad
        self.v[rows] = self.b2 * self.v[rows] + (1 - self.b2) * grad * grad
        mh = self.m[rows] / (1 - self.b1**t)
        vh = self.v[rows] / (1 - self.b2**t)
        mat[rows] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def sgd_step(model: CollabModel, users, items, labels, lr: float, weight_decay: float = 0.0) -> None:
    """One plain SGD step on the batch mean; only the rows in the batch move."""
    users, items = np.asarray(users), np.asarray(items)
    gu, gi = bce_grads(model, users, items, np.asarray(labels, float), weight_decay)
    n = len(users)
    GU = np.zeros_like(model.user_vectors)
    GI = np.zeros_like(model.item_vectors)
    np.add.at(GU, users, gu / n)
    np.add.at(GI, items, gi / n)
    ru, ri = np.unique(users), np.unique(items)
    model.user_vectors[ru] -= lr * GU[ru]
    model.item_vectors[ri] -= lr * GI[ri]


def train_mf(train: Dataset, config: CollabTrainConfig) -> CollabModel:
    """Fit user/item factors on ``train`` by minibatch BCE, deterministic given the seed."""
    if not len(train):
        raise ValueError("empty training split")
    users = np.array([it.user_id for it in train.interactions])
    items = np.array([it.item_id for it in train.interactions])
    labels = np.array([it.label for it in train.interactions], dtype=float)
    rng = np.random.default_rng(config.seed)
    bound = 0.1 / math.sqrt(config.d1)
    model = CollabModel(
        rng.uniform(-bound, bound, (train.user_count, config.d1)),
        rng.uniform(-bound, bound, (train.item_count, config.d1)),
    )
    opt_u = _RowAdam(model.user_vectors.shape, config.learning_rate)
    opt_i = _RowAdam(model.item_vectors.shape, config.learning_rate)
    n = len(users)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            b = order[s:s + config.batch_size]
            if config.optimizer == "sgd":
                sgd_step(model, users[b], items[b], labels[b], config.learning_rate, config.weight_decay)
                continue
            gu, gi = bce_grads(model, users[b], items[b], labels[b], config.weight_decay)
            for mat, opt, idx, g in ((model.user_vectors, opt_u, users[b], gu),
                                     (model.item_vectors, opt_i, items[b], gi)):
                rows, inv = np.unique(idx, return_inverse=True)
                acc = np.zeros((len(rows), config.d1))
                np.add.at(acc, inv, g / len(b))
                opt.step(mat, rows, acc)
        with np.errstate(over="ignore", invalid="ignore"):
            loss = bce_loss(model, users, items, labels, config.weight_decay)
        if not math.isfinite(loss):
            raise DivergenceError(f"MF loss became {loss} at epoch {epoch}")
        logger.debug("mf epoch %d loss %.5f", epoch, loss)
    return model
