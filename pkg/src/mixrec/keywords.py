"""Deterministic keyword extraction for item descriptions (TF-IDF with stopword removal)."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import replace
from typing import Iterable

from .data import Dataset

_WORD = re.compile(r"[a-z0-9]+")

STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because been
    before being below between both but by can could did do does doing down during
    each few for from further had has have having he her here hers herself him
    himself his how i if in into is it its itself just me more most my myself no nor
    not now of off on once only or other our ours ourselves out over own same she
    should so some such than that the their theirs them themselves then there these
    they this those through to too under until up very was we were what when where
    which while who whom why will with would you your yours yourself yourselves
    also s t one two new may many much must shall us via per
    """.split()
)


def terms(text: str) -> list[str]:
    return [w for w in _WORD.findall(text.lower()) if w not in STOPWORDS]


class KeywordExtractor:
    """Corpus-level TF-IDF ranker.

    Term score in a document is ``count * idf`` with the smoothed
    ``idf = ln((1 + n_docs) / (1 + df)) + 1``, so a term present in every
    document still scores above zero. Ties break lexicographically.
    """

    def __init__(self, documents: Iterable[str] = ()):
        self.n_docs = 0
        self.df: Counter[str] = Counter()
        for doc in documents:
            self.n_docs += 1
            self.df.update(set(terms(doc)))

    def idf(self, term: str) -> float:
        if self.n_docs == 0:
            return 1.0
        return math.log((1 + self.n_docs) / (1 + self.df.get(term, 0))) + 1.0

    def scores(self, description: str) -> dict[str, float]:
        return {t: c * self.idf(t) for t, c in Counter(terms(description)).items()}

    def extract(self, description: str, k: int = 10) -> list[str]:
        ranked = sorted(self.scores(description).items(), key=lambda kv: (-kv[1], kv[0]))
        return [t for t, _ in ranked[:k]]


def extract_keywords(description: str, k: int = 10, extractor: KeywordExtractor | None = None) -> list[str]:
    """Up to ``k`` lowercase, stopword-free terms of ``description``, best first."""
    return (extractor or KeywordExtractor()).extract(description, k)


def augment_items(dataset: Dataset, k: int = 10) -> Dataset:
    """Fill every item's keywords from its description, ranked against the whole item table."""
    ext = KeywordExtractor(it.description for it in dataset.items.values())
    items = {
        i: replace(it, keywords=tuple(ext.extract(it.description, k)))
        for i, it in dataset.items.items()
    }
    return replace(dataset, items=items)
