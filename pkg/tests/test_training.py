from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixrec.lm import LoraAdapter
from mixrec.prompts import RECOMMEND, THINKING, PromptInstance
from mixrec.training import (LossWeights, MixConfig, combined_loss, draw_kinds, fit, last_layers, loss_rec,
                             loss_think, make_instance, train_adapter, write_train_log)

from conftest import make_insts, random_adapter, tiny_model


def prompt(kind, answer, label=1):
    return PromptInstance(kind, "the user liked the dragon question", answer, label, 0, 0)


def test_pos_for_three_token_answer(tok):
    inst = make_instance(prompt(THINKING, "Yes. dragon"), tok)
    assert inst.pos == -4  # yes . dragon <eos>
    inst = make_instance(prompt(RECOMMEND, "Yes dragon wizard"), tok)
    assert inst.pos == -3
    assert inst.ids[inst.pos] == tok.yes_id


def test_pos_for_single_token_answer(tok):
    inst = make_instance(prompt(RECOMMEND, "No", 0), tok)
    assert inst.pos == -1 and inst.ids[inst.pos] == tok.no_id
    assert len(inst.question_ids) == len(tok.encode("the user liked the dragon question"))


def test_instance_errors(tok):
    with pytest.raises(ValueError):
        make_instance(prompt(RECOMMEND, ""), tok)
    with pytest.raises(ValueError):
        make_instance(prompt(RECOMMEND, "No", 1), tok)
    with pytest.raises(ValueError):
        make_instance(prompt(RECOMMEND, "Yes"), tok, context_len=3)


def one_hot_logits(inst, V, margin=60.0):
    L = len(inst.ids)
    z = np.zeros((L, V))
    z[np.arange(L - 1), inst.ids[1:]] = margin
    return z


def test_loss_think_limits(tok):
    inst = make_instance(prompt(THINKING, "Yes. dragon wizard"), tok)
    V = len(tok)
    assert loss_think(one_hot_logits(inst, V), inst) < 1e-20
    assert loss_think(np.zeros((len(inst.ids), V)), inst) == pytest.approx(math.log(V), abs=1e-12)


def test_loss_think_masks_prompt(tok):
    inst = make_instance(prompt(THINKING, "Yes. dragon"), tok)
    z = np.random.default_rng(0).normal(size=(len(inst.ids), len(tok)))
    before = loss_think(z, inst)
    z[0] += 100 * np.arange(len(tok))
    z[len(inst.ids) + inst.pos - 2] -= 7.0
    assert loss_think(z, inst) == before
    assert loss_think(z, inst, "full") != before


@pytest.mark.parametrize("label", [0, 1])
def test_loss_rec_at_half_is_ln2(tok, label):
    inst = make_instance(prompt(RECOMMEND, "Yes" if label else "No", label), tok)
    z = np.full((len(inst.ids), len(tok)), 2.0)
    assert loss_rec(z, inst, tok) == pytest.approx(math.log(2), abs=1e-12)


def test_loss_rec_limit(tok):
    inst = make_instance(prompt(RECOMMEND, "Yes"), tok)
    z = np.zeros((len(inst.ids), len(tok)))
    z[-2, tok.yes_id] = 50.0
    assert loss_rec(z, inst, tok) < 1e-20


def test_combined_fixtures():
    w = LossWeights()
    assert combined_loss(1.0, 2.0, THINKING, w) == pytest.approx(1.9)
    assert combined_loss(1.0, 2.0, RECOMMEND, w) == pytest.approx(1.1)
    assert combined_loss(1.0, 2.0, THINKING, LossWeights(0, 0, 0, 0)) == 0.0
    with pytest.raises(ValueError):
        LossWeights(-0.1)


@given(st.floats(0, 10), st.floats(0, 10), st.sampled_from([THINKING, RECOMMEND]),
       st.tuples(*[st.floats(0, 5)] * 4))
def test_combined_is_linear(l_rec, l_think, kind, ws):
    w = LossWeights(*ws)
    coef = np.array([w.alpha, w.beta]) if kind == THINKING else np.array([w.eta, w.gamma])
    assert combined_loss(l_rec, l_think, kind, w) == pytest.approx(float(coef @ [l_rec, l_think]), abs=1e-9)


def test_think_fraction_over_10k_draws():
    kinds = draw_kinds(10_000, 0.2, np.random.default_rng(0))
    assert abs(kinds.count(THINKING) / 10_000 - 0.2) <= 0.02


def test_think_rate_zero_draws_only_recommend():
    assert set(draw_kinds(1000, 0.0, np.random.default_rng(1))) == {RECOMMEND}


def test_mix_config_rates_must_sum_to_one():
    with pytest.raises(ValueError):
        MixConfig(think_rate=0.3, rec_rate=0.8)


def test_frozen_layers_bit_identical(tok):
    model = tiny_model(len(tok))
    insts = make_insts(tok, 6)
    rec = [i for i in insts if i.kind == RECOMMEND]
    think = [i for i in insts if i.kind == THINKING]
    init = random_adapter(model)
    before = {k: v.copy() for k, v in init.weights.items()}
    base_before = {k: v.copy() for k, v in model.params.items()}
    mix = MixConfig(steps=5, batch_size=4, learning_rate=1e-2)
    res = train_adapter(model, tok, rec, think, mix, LossWeights(), trainable_layers=[1], init_adapter=init)
    for k, v in res.adapter.weights.items():
        if k.startswith("h0."):
            assert np.array_equal(v, before[k])
        else:
            assert not np.array_equal(v, before[k])
    assert all(np.array_equal(init.weights[k], before[k]) for k in before)
    assert all(np.array_equal(model.params[k], base_before[k]) for k in base_before)


def test_training_rejects_empty_inputs(tok):
    model = tiny_model(len(tok))
    insts = make_insts(tok, 4)
    rec = [i for i in insts if i.kind == RECOMMEND]
    ad = LoraAdapter.init(model.config, 2)
    with pytest.raises(ValueError):
        fit(model, tok, rec, [], MixConfig(steps=1), LossWeights(), adapter=ad)
    with pytest.raises(ValueError):
        fit(model, tok, rec, [], MixConfig(steps=1), LossWeights(), adapter=ad, adapter_layers=[])
    with pytest.raises(ValueError):
        last_layers(2, 3)


def test_training_deterministic_and_logged(tok, tmp_path):
    model = tiny_model(len(tok))
    insts = make_insts(tok, 6)
    rec = [i for i in insts if i.kind == RECOMMEND]
    think = [i for i in insts if i.kind == THINKING]
    mix = MixConfig(steps=4, batch_size=3, learning_rate=1e-2)
    a = train_adapter(model, tok, rec, think, mix, LossWeights())
    b = train_adapter(model, tok, rec, think, mix, LossWeights())
    assert a.log == b.log
    assert all(np.array_equal(a.adapter.weights[k], b.adapter.weights[k]) for k in a.adapter.weights)
    write_train_log(tmp_path / "log.tsv", a.log)
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[0] == "step\tl_rec\tl_think\tcombined" and len(lines) == 5


def test_loss_decreases_when_memorizing(tok):
    model = tiny_model(len(tok))
    insts = make_insts(tok, 8)
    rec = [i for i in insts if i.kind == RECOMMEND]
    think = [i for i in insts if i.kind == THINKING]
    mix = MixConfig(steps=60, batch_size=8, learning_rate=1e-2, think_rate=0.5, rec_rate=0.5)
    res = train_adapter(model, tok, rec, think, mix, LossWeights(), train_base=True, dropout=0.0)
    first = np.mean([r[3] for r in res.log[:5]])
    last = np.mean([r[3] for r in res.log[-5:]])
    assert last < 0.5 * first
