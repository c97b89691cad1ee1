from __future__ import annotations

import numpy as np
import pytest

from mixrec.data import Dataset, HistoryWindow, Interaction, Item
from mixrec.lm import LmConfig, LoraAdapter, TinyLM
from mixrec.tokenizer import Tokenizer

WORDS = ("the a user book liked dragon wizard robot galaxy quest with description feature label "
         "question answer titled enjoy would whether because it shares keywords").split()


def make_dataset(rows, items=None) -> Dataset:
    """rows: (user, item, rating, timestamp) with dense ids; label = rating > 3."""
    inter = [Interaction(u, i, float(r), int(r > 3), t) for u, i, r, t in rows]
    n_users = max(u for u, *_ in rows) + 1
    n_items = max(i for _, i, *_ in rows) + 1
    items = items or {i: Item(i, f"item {i}", "", (f"kw{i}",)) for i in range(n_items)}
    return Dataset(inter, items, n_users, n_items, [str(u) for u in range(n_users)],
                   [str(i) for i in range(n_items)])


def window(entries, target, label=1, user=0, ts=100) -> HistoryWindow:
    return HistoryWindow(user, tuple(entries), target, label, ts)


@pytest.fixture
def tok() -> Tokenizer:
    return Tokenizer(WORDS + [".", ","])


def tiny_model(vocab: int, d: int = 16, layers: int = 2, heads: int = 2, seed: int = 0,
               dtype: str = "float64", context: int = 64) -> TinyLM:
    return TinyLM(LmConfig(vocab, d, layers, heads, context, seed, dtype))


def random_adapter(model: TinyLM, r: int = 4, alpha: float = 8.0, dropout: float = 0.0,
                   seed: int = 1, scale: float = 0.3) -> LoraAdapter:
    """Adapter with nonzero B so deltas are visible."""
    ad = LoraAdapter.init(model.config, r, alpha, dropout, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k in ad.weights:
        if k.endswith(".B"):
            ad.weights[k] = rng.normal(0, scale, ad.weights[k].shape)
    return ad


def finite_diff_check(f, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], n_probe: int = 6,
                      eps: float = 1e-6, seed: int = 0) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients, per tensor.

    ``f`` evaluates the loss reading ``params`` in place. Error is
    ||g_a - g_n|| / max(||g_a|| + ||g_n||, 1e-12) over probed coordinates.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        # probe the largest-gradient coordinate plus random ones
        idx = {int(np.argmax(np.abs(g)))} | set(rng.choice(flat.size, size=min(n_probe, flat.size),
                                                           replace=False).tolist())
        ga, gn = [], []
        for i in sorted(idx):
            old = flat[i]
            flat[i] = old + eps
            up = f()
            flat[i] = old - eps
            down = f()
            flat[i] = old
            gn.append((up - down) / (2 * eps))
            ga.append(g[i])
        ga, gn = np.array(ga), np.array(gn)
        out[name] = float(np.linalg.norm(ga - gn) / max(np.linalg.norm(ga) + np.linalg.norm(gn), 1e-12))
    return out


def make_insts(tok: Tokenizer, n: int = 4, seed: int = 0, slots: bool = False, reason: str = "because dragon"):
    """Alternating recommend/thinking instances over the fixture vocabulary."""
    from mixrec.prompts import RECOMMEND, THINKING, PromptInstance, feat_slot, user_slot
    from mixrec.training import make_instance

    rng = np.random.default_rng(seed)
    out = []
    for j in range(n):
        words = " ".join(rng.choice(WORDS, size=int(rng.integers(3, 7))))
        q = f"the user liked {words}"
        if slots:
            q += f" {user_slot(j % 3)} with feature {feat_slot(j % 4)}"
        q += " question answer"
        label = int(rng.integers(2))
        kind = THINKING if j % 2 else RECOMMEND
        ans = ("Yes" if label else "No") + (f". {reason}" if kind == THINKING else "")
        out.append(make_instance(PromptInstance(kind, q, ans, label, j % 3, j % 4), tok))
    return out


TINY = {"data.synthetic_users": "40", "data.synthetic_items": "40", "synth.sample_n": "40",
        "collab.epochs": "5", "lm.d_model": "16", "lm.n_heads": "2", "lm.lora_r": "2",
        "mix.steps": "6", "mix.batch_size": "4", "experts.steps": "3", "projector.steps": "3",
        "eval.reason_samples": "2", "eval.max_new": "4", "eval.max_users": "10"}


def tiny_config(output, **changes):
    """Synthetic preset shrunk so the whole pipeline runs in a few seconds."""
    from mixrec.config import synthetic_preset

    cfg = synthetic_preset(str(output))
    for k, v in {**TINY, **{k.replace("__", "."): str(v) for k, v in changes.items()}}.items():
        cfg.set(k, v)
    return cfg


def tiny_flags():
    return [f"--{k}={v}" for k, v in TINY.items()]


@pytest.fixture(scope="session")
def built_run(tmp_path_factory):
    """A fully trained tiny run shared read-only across tests."""
    from mixrec import pipeline

    cfg = tiny_config(tmp_path_factory.mktemp("built") / "run")
    pipeline.ensure_stages(cfg, "auto")
    return cfg


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
