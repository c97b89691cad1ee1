from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixrec.metrics import (ap_at_k, auc, group_by_user, map_at_k, meteor, ndcg_at_k, ranked_labels, report,
                            uauc)


def brute_auc(s, y):
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_fixtures():
    assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_on_100_cases():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = rng.integers(0, 6, 20) / 5.0  # coarse grid forces ties
        y = rng.integers(0, 2, 20)
        y[:2] = [0, 1]
        assert abs(auc(s, y) - brute_auc(s, y)) <= 1e-12


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_monotone_invariance(pairs):
    s = np.array([p[0] / 10 for p in pairs])
    y = [p[1] for p in pairs]
    if len(set(y)) < 2:
        return
    a = auc(s, y)
    assert 0.0 <= a <= 1.0
    assert auc(np.exp(s) * 3 + s ** 3, y) == pytest.approx(a, abs=1e-12)


def test_uauc_fixtures():
    one = {0: [(0, 0.9, 1), (1, 0.1, 0)], 1: [(0, 0.5, 1), (1, 0.2, 1)]}
    assert uauc(one) == (1.0, 1)
    two = {0: [(0, 0.9, 1), (1, 0.1, 0)], 1: [(0, 0.1, 1), (1, 0.9, 0)]}
    assert uauc(two) == (0.5, 0)
    with pytest.raises(ValueError):
        uauc({0: [(0, 0.5, 1)]})


def test_uauc_matches_per_user_brute_force():
    rng = np.random.default_rng(3)
    users, items, scores, labels = [], [], [], []
    for u in range(10):
        n = int(rng.integers(3, 12))
        users += [u] * n
        items += list(range(n))
        scores += list(rng.random(n))
        labels += list(rng.integers(0, 2, n))
    scored = group_by_user(users, items, scores, labels)
    vals = [brute_auc([e[1] for e in v], [e[2] for e in v]) for v in scored.values()
            if 0 < sum(e[2] for e in v) < len(v)]
    value, skipped = uauc(scored)
    assert abs(value - sum(vals) / len(vals)) <= 1e-12
    assert skipped == 10 - len(vals)


def brute_ndcg(labels, k):
    dcg = sum(l / math.log2(i + 2) for i, l in enumerate(labels[:k]))
    best = sorted(labels, reverse=True)
    idcg = sum(l / math.log2(i + 2) for i, l in enumerate(best[:k]))
    return dcg / idcg if idcg else 0.0


def brute_ap(labels, k):
    npos = sum(labels)
    if not npos:
        return 0.0
    precs = [sum(labels[: r + 1]) / (r + 1) for r in range(min(k, len(labels))) if labels[r]]
    return sum(precs) / min(k, npos)


def test_ndcg_and_map_fixtures():
    assert ndcg_at_k([1, 1, 0, 0, 0]) == 1.0
    assert ndcg_at_k([0, 0, 0]) == 0.0
    assert ndcg_at_k([0, 1, 0, 0, 0]) == pytest.approx(math.log(2) / math.log(3), abs=1e-12)
    assert ndcg_at_k([0, 1, 0, 0, 0]) == pytest.approx(0.6309, abs=1e-4)
    assert ap_at_k([1, 1, 1, 0]) == 1.0
    assert ap_at_k([0, 0, 1, 0, 0]) == pytest.approx(1 / 3, abs=1e-12)
    assert map_at_k([[1, 0], [0, 0, 1, 0, 0]]) == pytest.approx((1 + 1 / 3) / 2)
    with pytest.raises(ValueError):
        ndcg_at_k([])


def test_ranking_metrics_match_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(100):
        labels = list(rng.integers(0, 2, int(rng.integers(1, 15))))
        k = int(rng.integers(1, 8))
        assert abs(ndcg_at_k(labels, k) - brute_ndcg(labels, k)) <= 1e-12
        assert abs(ap_at_k(labels, k) - brute_ap(labels, k)) <= 1e-12


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20), st.floats(0.1, 10))
def test_ranking_depends_only_on_order(pairs, c):
    entries = [(i, s, l) for i, (s, l) in enumerate(pairs)]
    scaled = [(i, s * c, l) for i, s, l in entries]
    assert ranked_labels(entries) == ranked_labels(scaled)
    r = ranked_labels(entries)
    assert 0.0 <= ndcg_at_k(r) <= 1.0 and 0.0 <= ap_at_k(r) <= 1.0


def test_meteor_fixtures():
    assert meteor("dragon", "dragon") == pytest.approx(0.5, abs=1e-9)
    assert meteor("the red dragon flies", "the red dragon flies") == pytest.approx(1 - 1 / 128, abs=1e-9)
    assert meteor("apple banana", "cherry dragon") == 0.0
    assert meteor("", "dragon") == 0.0


def test_meteor_stem_matching():
    assert meteor("dragons", "dragon") == pytest.approx(0.5, abs=1e-9)


def test_meteor_formula_by_hand():
    # 2 of 3 candidate words match 2 of 4 reference words in one chunk
    p, r = 2 / 3, 2 / 4
    f = 10 * p * r / (r + 9 * p)
    expected = f * (1 - 0.5 * (1 / 2) ** 3)
    assert meteor("red dragon sleeps", "the red dragon flies") == pytest.approx(expected, abs=1e-12)


def test_meteor_self_dominates():
    rng = np.random.default_rng(4)
    vocab = "the red dragon wizard flies over a dark castle at night".split()
    for _ in range(200):
        x = " ".join(rng.choice(vocab, size=int(rng.integers(1, 9))))
        y = " ".join(rng.choice(vocab, size=int(rng.integers(1, 9))))
        assert 0.0 <= meteor(y, x) <= 1.0
        if y != x:
            assert meteor(x, x) >= meteor(y, x) - 1e-12 or len(set(y.split()) & set(x.split())) >= len(x.split())


def test_report_fields():
    rep = report([0, 0, 1, 1, 2], [0, 1, 0, 1, 0], [0.9, 0.1, 0.3, 0.6, 0.5], [1, 0, 1, 0, 1], k=5,
                 meteor_scores=[0.5, 0.25])
    assert rep.auc == pytest.approx(brute_auc([0.9, 0.1, 0.3, 0.6, 0.5], [1, 0, 1, 0, 1]))
    assert rep.uauc == 0.5 and rep.users_skipped == 1
    assert rep.meteor_mean == 0.375 and rep.bleurt == "unavailable"
    assert rep.tsv().startswith("metric\tvalue\nauc\t")
    assert "uauc" in rep.table()
