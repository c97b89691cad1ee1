"""User grouping, expert representations, participation weights, gating and adapter fusion."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .lm import LoraAdapter, as_mix

logger = logging.getLogger(__name__)

GLOBAL, SINGLE, FUSED = "global", "single", "fused"


@dataclass(frozen=True)
class UserGroups:
    assignment: np.ndarray
    centroids: np.ndarray

    @property
    def n_groups(self) -> int:
        return len(self.centroids)

    def members(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == g)


def cluster_users(embeddings: np.ndarray, n_groups: int, seed: int = 0, max_iter: int = 100) -> UserGroups:
    """k-means with k-means++ seeding.

    A cluster that empties is refilled with the point farthest from its
    current centroid, so every group keeps at least one user.
    """
    X = np.asarray(embeddings, dtype=float)
    n = len(X)
    if n_groups < 1:
        raise ValueError("need at least one group")
    if n_groups > n:
        raise ValueError(f"{n_groups} groups requested for {n} users")
    rng = np.random.default_rng(seed)
    centers = [X[rng.integers(n)]]
    for _ in range(1, n_groups):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
    C = np.array(centers)
    assign = np.full(n, -1)
    for _ in range(max_iter):
        dist = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        new = dist.argmin(1)
        for g in range(n_groups):
            if not np.any(new == g):
                # take the farthest point from a group that can spare one
                sizes = np.bincount(new, minlength=n_groups)
                d = np.where(sizes[new] > 1, dist[np.arange(n), new], -np.inf)
                new[int(np.argmax(d))] = g
        if np.array_equal(new, assign):
            break
        assign = new
        C = np.array([X[assign == g].mean(0) for g in range(n_groups)])
    return UserGroups(assign, C)


def expert_representation(groups: UserGroups, user_vectors: np.ndarray) -> np.ndarray:
    """Mean user embedding per group."""
    reps = []
    for g in range(groups.n_groups):
        m = groups.members(g)
        if not len(m):
            raise ValueError(f"group {g} is empty")
        reps.append(np.asarray(user_vectors)[m].mean(0))
    return np.array(reps)


def participation(e_u: np.ndarray, representations: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """Softmax over temperature-scaled cosine similarities to each expert."""
    e_u = np.asarray(e_u, dtype=float)
    R = np.asarray(representations, dtype=float)
    nu, nr = np.linalg.norm(e_u), np.linalg.norm(R, axis=1)
    if nu == 0 or np.any(nr == 0):
        raise ValueError("cosine similarity undefined for zero vectors")
    z = (R @ e_u) / (nr * nu) / tau
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


def entropy(w: np.ndarray, base: float = math.e) -> float:
    w = np.asarray(w, dtype=float)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum() / math.log(base))


@dataclass(frozen=True)
class FusionDecision:
    branch: str
    weights: tuple[float, ...]
    index: int = -1
    entropy: float = 0.0

    @property
    def max_weight(self) -> float:
        return max(self.weights) if self.weights else 0.0


def gate(w: Sequence[float], n_groups: int | None = None, entropy_factor: float = 0.95,
         conc_base: float = 0.5, conc_slope: float = 0.6) -> FusionDecision:
    """Route to the global adapter, one expert, or a weighted fusion.

    The averaged check (entropy above ``entropy_factor * ln N``) runs first,
    then the concentrated check (``max w > conc_base + conc_slope / N``).
    With ``N = 1`` neither fires and the result is a fusion over one expert.
    """
    w = np.asarray(w, dtype=float)
    n = len(w) if n_groups is None else n_groups
    h = entropy(w)
    wt = tuple(float(x) for x in w)
    if h > entropy_factor * math.log(n):
        return FusionDecision(GLOBAL, wt, -1, h)
    if w.max() > conc_base + conc_slope / n:
        return FusionDecision(SINGLE, wt, int(np.argmax(w)), h)
    return FusionDecision(FUSED, wt, -1, h)


def fuse_adapters(base_adapters: Sequence[LoraAdapter], w: Sequence[float], mode: str = "delta"):
    """Serve a weighted combination of experts.

    ``delta`` (default) returns a weighted adapter list, so the applied update
    is exactly ``sum_n w_n (alpha/r) B_n A_n x``. ``factor`` instead averages
    the A and B factors into one adapter, which is not a convex combination
    of the deltas.
    """
    if len(base_adapters) != len(w):
        raise ValueError("one weight per adapter required")
    first = base_adapters[0]
    for ad in base_adapters[1:]:
        if not first.same_structure(ad) or ad.alpha != first.alpha:
            raise ValueError("adapters differ in structure")
    if mode == "delta":
        return [(float(x), ad) for x, ad in zip(w, base_adapters) if x != 0.0]
    if mode == "factor":
        merged = {k: sum(float(x) * ad.weights[k] for x, ad in zip(w, base_adapters)) for k in first.weights}
        return LoraAdapter(first.r, first.alpha, first.dropout, merged)
    raise ValueError(f"unknown fusion mode {mode!r}")


def lora_delta(adapter_mix, layer: int, target: str, x: np.ndarray) -> np.ndarray:
    """The additive update a served adapter (or weighted list) applies to activations ``x``."""
    out = None
    for w, ad in as_mix(adapter_mix):
        A, B = ad.weights[f"h{layer}.{target}.A"], ad.weights[f"h{layer}.{target}.B"]
        term = w * ad.scaling * ((x @ A.T) @ B.T)
        out = term if out is None else out + term
    return out


@dataclass
class ExpertSet:
    global_adapter: LoraAdapter
    base_adapters: list[LoraAdapter]
    representations: np.ndarray

    def __post_init__(self) -> None:
        if len(self.base_adapters) != len(self.representations):
            raise ValueError("one representation per base adapter required")


@dataclass(frozen=True)
class GateConfig:
    tau: float = 0.1
    entropy_factor: float = 0.95
    conc_base: float = 0.5
    conc_slope: float = 0.6
    fusion: str = "delta"


def select_for_user(user_id: int, experts: ExpertSet, user_vectors: np.ndarray,
                    cfg: GateConfig = GateConfig()):
    """Participation, gate and fusion for one user. Unknown users get the global adapter."""
    if not 0 <= user_id < len(user_vectors):
        logger.warning("user %d has no collaborative embedding; serving the global adapter", user_id)
        return FusionDecision(GLOBAL, ()), experts.global_adapter
    w = participation(user_vectors[user_id], experts.representations, cfg.tau)
    d = gate(w, len(w), cfg.entropy_factor, cfg.conc_base, cfg.conc_slope)
    if d.branch == GLOBAL:
        return d, experts.global_adapter
    if d.branch == SINGLE:
        return d, experts.base_adapters[d.index]
    return d, fuse_adapters(experts.base_adapters, d.weights, cfg.fusion)


def write_decision_log(path: str | Path, rows: Sequence[tuple[int, FusionDecision]]) -> None:
    """Columns: user, entropy, max_w, branch, weights (comma-joined)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "entropy", "max_w", "branch", "weights"])
        for user, d in rows:
            w.writerow([user, f"{d.entropy:.6f}", f"{d.max_weight:.6f}", d.branch,
                        ",".join(f"{x:.6f}" for x in d.weights)])

