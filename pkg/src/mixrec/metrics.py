"""Ranking metrics (AUC, UAUC, NDCG@k, MAP@k) and a stem-matching METEOR."""

from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from nltk.stem.porter import PorterStemmer
from scipy.stats import rankdata


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def group_by_user(users: Iterable[int], items: Iterable[int], scores: Iterable[float],
                  labels: Iterable[int]) -> dict[int, list[tuple[int, float, int]]]:
    out: dict[int, list[tuple[int, float, int]]] = defaultdict(list)
    for u, i, s, l in zip(users, items, scores, labels):
        out[int(u)].append((int(i), float(s), int(l)))
    return dict(out)


def uauc(scored: dict[int, list[tuple[int, float, int]]]) -> tuple[float, int]:
    """Unweighted mean of per-user AUC; returns (value, number of single-class users skipped)."""
    vals, skipped = [], 0
    for user in sorted(scored):
        entries = scored[user]
        labels = [e[2] for e in entries]
        if 0 < sum(labels) < len(labels):
            vals.append(auc([e[1] for e in entries], labels))
        else:
            skipped += 1
    if not vals:
        raise ValueError("no user has both classes")
    return math.fsum(vals) / len(vals), skipped


def ranked_labels(entries: Sequence[tuple[int, float, int]]) -> list[int]:
    """Labels ordered by descending score, ties broken by ascending item id."""
    return [e[2] for e in sorted(entries, key=lambda e: (-e[1], e[0]))]


def ndcg_at_k(labels: Sequence[int], k: int = 5) -> float:
    """Binary-gain NDCG of an already ranked label list; 0 when there is no positive."""
    if not len(labels):
        raise ValueError("empty ranking")
    gains = [(2 ** l - 1) / math.log2(r + 2) for r, l in enumerate(labels[:k])]
    ideal = sorted(labels, reverse=True)
    idcg = math.fsum((2 ** l - 1) / math.log2(r + 2) for r, l in enumerate(ideal[:k]))
    return math.fsum(gains) / idcg if idcg > 0 else 0.0


def ap_at_k(labels: Sequence[int], k: int = 5) -> float:
    """Average precision truncated at k, normalized by min(k, #positives)."""
    if not len(labels):
        raise ValueError("empty ranking")
    n_pos = sum(1 for l in labels if l)
    if n_pos == 0:
        return 0.0
    hits, total = 0, 0.0
    for r, l in enumerate(labels[:k], start=1):
        if l:
            hits += 1
            total += hits / r
    return total / min(k, n_pos)


def map_at_k(rankings: Sequence[Sequence[int]], k: int = 5) -> float:
    """Mean of :func:`ap_at_k` over users."""
    return math.fsum(ap_at_k(r, k) for r in rankings) / len(rankings)


# -- METEOR -------------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")
_stemmer = PorterStemmer()


@lru_cache(maxsize=65536)
def _stem(word: str) -> str:
    return _stemmer.stem(word)


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches; prefers continuing the current chunk."""
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for norm in (lambda w: w, _stem):
        cn = [norm(w) for w in cand]
        rn = [norm(w) for w in ref]
        last = -2
        for i, w in enumerate(cn):
            if i in used_c:
                last = dict(pairs).get(i, -2)
                continue
            options = [j for j, v in enumerate(rn) if v == w and j not in used_r]
            if not options:
                continue
            j = last + 1 if (last + 1) in options else options[0]
            used_c.add(i)
            used_r.add(j)
            pairs.append((i, j))
            last = j
    return sorted(pairs)


def meteor(candidate: str, reference: str, alpha: float = 0.9, beta: float = 3.0,
           gamma: float = 0.5) -> float:
    """Unigram METEOR with ``F = 10PR / (R + 9P)`` and penalty ``0.5 (chunks/m)^3``."""
    cand = _TOKEN.findall(candidate.lower())
    ref = _TOKEN.findall(reference.lower())
    if not cand or not ref:
        return 0.0
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    p, r = m / len(cand), m / len(ref)
    f = p * r / (alpha * p + (1 - alpha) * r)
    return f * (1 - gamma * (chunks / m) ** beta)


# -- reporting ----------------------------------------------------------------

@dataclass
class MetricReport:
    auc: float
    uauc: float
    ndcg_at_k: float
    map_at_k: float
    meteor_mean: float
    k: int
    users_skipped: int
    bleurt: str = "unavailable"

    def rows(self) -> list[tuple[str, str]]:
        return [(k, f"{v:.6f}" if isinstance(v, float) else str(v)) for k, v in asdict(self).items()]

    def table(self) -> str:
        rows = self.rows()
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)

    def tsv(self) -> str:
        return "metric\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in self.rows())


def report(users, items, scores, labels, k: int = 5, meteor_scores: Sequence[float] = ()) -> MetricReport:
    """Aggregate every ranking metric from flat per-interaction arrays.

    NDCG and MAP average over users that have at least one positive.
    """
    scored = group_by_user(users, items, scores, labels)
    u, skipped = uauc(scored)
    ranked = [ranked_labels(v) for _, v in sorted(scored.items())]
    ranked = [r for r in ranked if any(r)]
    return MetricReport(
        auc=auc(scores, labels),
        uauc=u,
        ndcg_at_k=math.fsum(ndcg_at_k(r, k) for r in ranked) / len(ranked),
        map_at_k=map_at_k(ranked, k),
        meteor_mean=math.fsum(meteor_scores) / len(meteor_scores) if len(meteor_scores) else 0.0,
        k=k,
        users_skipped=skipped,
    )
