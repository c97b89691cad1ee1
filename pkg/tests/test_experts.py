from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixrec.experts import (FUSED, GLOBAL, SINGLE, ExpertSet, GateConfig, cluster_users, entropy,
                            expert_representation, fuse_adapters, gate, lora_delta, participation,
                            select_for_user, write_decision_log)
from mixrec.lm import LoraAdapter

from conftest import random_adapter, tiny_model


def test_single_group_is_global_mean():
    X = np.random.default_rng(0).normal(size=(30, 4))
    g = cluster_users(X, 1)
    assert set(g.assignment) == {0}
    assert np.allclose(g.centroids[0], X.mean(0), atol=1e-12)


def test_separated_blobs_recovered():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 1, (200, 6))
    b = rng.normal(0, 1, (200, 6)) + 10 * np.ones(6) / np.sqrt(6) * 10
    g = cluster_users(np.vstack([a, b]), 2, seed=4)
    truth = np.r_[np.zeros(200), np.ones(200)]
    agree = max(np.mean(g.assignment == truth), np.mean(g.assignment != truth))
    assert agree >= 0.99


def test_clustering_deterministic_and_nonempty():
    X = np.random.default_rng(2).normal(size=(50, 3))
    a, b = cluster_users(X, 5, seed=9), cluster_users(X, 5, seed=9)
    assert np.array_equal(a.assignment, b.assignment)
    assert all(len(a.members(k)) for k in range(5))


def test_duplicate_points_still_fill_every_group():
    g = cluster_users(np.zeros((4, 2)), 3)
    assert sorted(set(g.assignment)) == [0, 1, 2]


def test_too_many_groups():
    with pytest.raises(ValueError):
        cluster_users(np.zeros((2, 2)), 3)


def test_representation_fixtures():
    from mixrec.experts import UserGroups

    V = np.array([[1.0, 2.0], [-1.0, -2.0], [3.0, 0.5], [0.25, 4.0], [2.0, 2.0]])
    g = UserGroups(np.array([0, 0, 1, 2, 2]), np.zeros((3, 2)))
    R = expert_representation(g, V)
    assert not R[0].any()
    assert np.array_equal(R[1], V[2])
    assert np.allclose(R[2], [(0.25 + 2.0) / 2, (4.0 + 2.0) / 2], atol=1e-12)
    five = UserGroups(np.zeros(5, dtype=int), np.zeros((1, 2)))
    assert np.allclose(expert_representation(five, V)[0], [5.25 / 5, 6.5 / 5], atol=1e-12)


def test_participation_fixtures():
    R = np.array([[1.0, 0.0], [0.0, 1.0]])
    w = participation(np.array([2.0, 0.0]), R, 0.1)
    assert w[0] == pytest.approx(1 / (1 + math.exp(-10)), abs=1e-12)
    same = participation(np.array([0.3, -2.0]), np.ones((4, 2)), 0.1)
    assert np.allclose(same, 0.25)
    with pytest.raises(ValueError):
        participation(np.zeros(2), R)


@settings(max_examples=60)
@given(st.integers(1, 6), st.integers(0, 2**31), st.floats(0.01, 5.0), st.floats(0.01, 100.0))
def test_participation_properties(n, seed, tau, c):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(n, 4)) + 0.05
    e = rng.normal(size=4) + 0.05
    w = participation(e, R, tau)
    assert abs(w.sum() - 1) <= 1e-9 and np.all((w >= 0) & (w <= 1))
    assert np.allclose(participation(c * e, R, tau), w, atol=1e-12)
    perm = rng.permutation(n)
    assert np.allclose(participation(e, R[perm], tau), w[perm], atol=1e-12)
    assert participation(e, R, tau / 2).max() >= w.max() - 1e-12


@pytest.mark.parametrize("w,branch,index", [((1 / 3, 1 / 3, 1 / 3), GLOBAL, -1), ((0.8, 0.1, 0.1), SINGLE, 0),
                                            ((0.55, 0.35, 0.10), FUSED, -1), ((1.0,), FUSED, -1),
                                            ((0.1, 0.45, 0.45), FUSED, -1)])
def test_gate_fixtures(w, branch, index):
    d = gate(w)
    assert (d.branch, d.index) == (branch, index)


def test_gate_entropy_value():
    assert entropy([0.8, 0.1, 0.1]) == pytest.approx(0.639, abs=1e-3)
    assert entropy([1.0, 0.0]) == 0.0


def reference_gate(w, base):
    """Independent re-implementation computed in an arbitrary log base."""
    n = len(w)
    h = -sum(x * math.log(x, base) for x in w if x > 0)
    if h > 0.95 * (math.log(n, base) if n > 1 else 0.0):
        return GLOBAL, -1
    m = max(w)
    if m > 0.5 + 0.6 / n:
        return SINGLE, list(w).index(m)
    return FUSED, -1


def test_gate_sweep_against_reference_in_two_bases():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(1, 7))
        w = rng.dirichlet(np.full(n, rng.choice([0.1, 1.0, 10.0])))
        d = gate(w)
        assert (d.branch, d.index) == reference_gate(w, math.e) == reference_gate(w, 2.0)


def test_gate_first_index_tie_break():
    assert gate([0.9, 0.9, 0.0]).index == 0  # unnormalized tie still picks the first


def adapters(model, n, seed=0):
    return [random_adapter(model, seed=seed + k) for k in range(n)]


def test_fusion_one_hot_bit_identical(tok):
    model = tiny_model(len(tok))
    ads = adapters(model, 3)
    rng = np.random.default_rng(0)
    emb = model.params["tok_emb"][rng.integers(len(tok), size=(100, 12))]
    for k in range(3):
        w = np.eye(3)[k]
        fused, _ = model.forward_batch(emb, fuse_adapters(ads, w))
        alone, _ = model.forward_batch(emb, ads[k])
        assert np.array_equal(fused, alone)


def test_fusion_half_half_and_identical(tok):
    model = tiny_model(len(tok))
    a, b = adapters(model, 2)
    x = np.random.default_rng(1).normal(size=(7, 16))
    fused = lora_delta(fuse_adapters([a, b], [0.5, 0.5]), 1, "q", x)
    hand = 0.5 * (lora_delta(a, 1, "q", x) + lora_delta(b, 1, "q", x))
    assert np.max(np.abs(fused - hand)) <= 1e-6
    same = fuse_adapters([a, a.copy()], [0.3, 0.7])
    assert np.allclose(lora_delta(same, 0, "v", x), lora_delta(a, 0, "v", x), atol=1e-12)


def test_fusion_convexity_on_random_probes(tok):
    model = tiny_model(len(tok))
    ads = adapters(model, 3, seed=5)
    rng = np.random.default_rng(2)
    for _ in range(50):
        w = rng.dirichlet(np.ones(3))
        x = rng.normal(size=(1, 16))
        for layer in (0, 1):
            for t in ("q", "v"):
                fused = np.linalg.norm(lora_delta(fuse_adapters(ads, w), layer, t, x))
                assert fused <= max(np.linalg.norm(lora_delta(a, layer, t, x)) for a in ads) + 1e-12


def test_fusion_factor_mode_and_errors(tok):
    model = tiny_model(len(tok))
    a, b = adapters(model, 2)
    f = fuse_adapters([a, b], [0.5, 0.5], mode="factor")
    assert isinstance(f, LoraAdapter)
    assert np.allclose(f.weights["h0.q.A"], 0.5 * (a.weights["h0.q.A"] + b.weights["h0.q.A"]))
    with pytest.raises(ValueError):
        fuse_adapters([a, b], [1.0])
    with pytest.raises(ValueError):
        fuse_adapters([a, LoraAdapter.init(model.config, r=2)], [0.5, 0.5])
    with pytest.raises(ValueError):
        fuse_adapters([a, b], [0.5, 0.5], mode="mean")


def expert_set(tok, reps):
    model = tiny_model(len(tok))
    return ExpertSet(random_adapter(model, seed=99), adapters(model, len(reps)), np.asarray(reps, float))


def test_user_at_centroid_gets_single_expert(tok):
    reps = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    es = expert_set(tok, reps)
    users = np.array([[0.0, 2.0, 0.0]])
    d, ad = select_for_user(0, es, users, GateConfig(tau=0.01))
    assert (d.branch, d.index) == (SINGLE, 1) and ad is es.base_adapters[1]
    assert select_for_user(0, es, users, GateConfig(tau=0.01))[0] == d


def test_cold_start_gets_global(tok, caplog):
    es = expert_set(tok, [[1.0, 0.0], [0.0, 1.0]])
    d, ad = select_for_user(5, es, np.ones((2, 2)))
    assert d.branch == GLOBAL and ad is es.global_adapter
    assert "no collaborative embedding" in caplog.text


def test_single_expert_serves_that_expert(tok):
    es = expert_set(tok, [[1.0, 1.0]])
    d, ad = select_for_user(0, es, np.array([[0.2, 0.9]]))
    assert d.branch == FUSED and ad == [(1.0, es.base_adapters[0])]


def test_decision_log(tmp_path):
    write_decision_log(tmp_path / "d.tsv", [(3, gate([0.8, 0.1, 0.1]))])
    lines = (tmp_path / "d.tsv").read_text().splitlines()
    assert lines[0] == "user\tentropy\tmax_w\tbranch\tweights"
    assert lines[1].split("\t")[3] == SINGLE
