"""Two-layer MLP mapping collaborative embeddings into the LM embedding space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .collab import CollabModel


@dataclass
class Projector:
    """``tanh(e @ w1 + b1) @ w2 + b2``, shared by user and item embeddings."""

    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, d1: int, d2: int, hidden: int | None = None, seed: int = 0,
             zero_last: bool = True) -> "Projector":
        hidden = hidden or 2 * d2
        rng = np.random.default_rng(seed)
        w2 = np.zeros((hidden, d2)) if zero_last else rng.normal(0, 1 / np.sqrt(hidden), (hidden, d2))
        return cls({
            "w1": rng.normal(0, 1 / np.sqrt(d1), (d1, hidden)),
            "b1": np.zeros(hidden),
            "w2": w2,
            "b2": np.zeros(d2),
        })

    @property
    def d_in(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def d_out(self) -> int:
        return self.params["w2"].shape[1]

    def forward(self, E: np.ndarray) -> tuple[np.ndarray, tuple]:
        E = np.atleast_2d(np.asarray(E, dtype=float))
        if E.shape[1] != self.d_in:
            raise ValueError(f"expected inputs of dimension {self.d_in}, got {E.shape[1]}")
        h = np.tanh(E @ self.params["w1"] + self.params["b1"])
        return h @ self.params["w2"] + self.params["b2"], (E, h)

    def backward(self, cache: tuple, dout: np.ndarray) -> dict[str, np.ndarray]:
        E, h = cache
        dh = (dout @ self.params["w2"].T) * (1.0 - h * h)
        return {"w2": h.T @ dout, "b2": dout.sum(0), "w1": E.T @ dh, "b1": dh.sum(0)}

    def project(self, e: np.ndarray) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        if e.ndim != 1 or e.shape[0] != self.d_in:
            raise ValueError(f"expected a vector of dimension {self.d_in}, got shape {e.shape}")
        return self.forward(e[None])[0][0]


class FeatureSource:
    """Resolves placeholder keys (``FEAT:i``, ``USER:u``) to projected vectors."""

    def __init__(self, projector: Projector, collab: CollabModel):
        self.projector = projector
        self.collab = collab

    def raw(self, key: str) -> np.ndarray:
        kind, _, idx = key.partition(":")
        if kind == "FEAT":
            return self.collab.embed_item(int(idx))
        if kind == "USER":
            return self.collab.embed_user(int(idx))
        raise KeyError(f"unknown placeholder {key}")

    def vectors(self, keys: Iterable[str]) -> tuple[dict[str, np.ndarray], list[str], tuple]:
        keys = sorted(set(keys))
        if not keys:
            return {}, [], ()
        out, cache = self.projector.forward(np.stack([self.raw(k) for k in keys]))
        return dict(zip(keys, out)), keys, cache


def train_projector(*args, **kwargs):
    """Fit only the projector on feature-slotted prompts; see :func:`mixrec.training.fit`."""
    from .training import fit_projector

    return fit_projector(*args, **kwargs)
