"""Mixed thinking/recommendation training of the LM, its adapters, and the projector."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .collab import DivergenceError
from .lm import LoraAdapter, SequenceTooLong, TinyLM, pad_embeddings, sigmoid
from .prompts import RECOMMEND, THINKING, PromptInstance
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.9
    eta: float = 0.9
    gamma: float = 0.1

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.eta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")

    def coefficients(self, kind: str) -> tuple[float, float]:
        """(rec weight, think weight) for an instance kind."""
        return (self.alpha, self.beta) if kind == THINKING else (self.eta, self.gamma)


@dataclass(frozen=True)
class MixConfig:
    think_rate: float = 0.2
    rec_rate: float = 0.8
    batch_size: int = 8
    steps: int = 200
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    seed: int = 0
    think_loss: str = "answer"
    score_rule: str = "yes_no"
    grad_clip: float = 1.0

    def __post_init__(self) -> None:
        if abs(self.think_rate + self.rec_rate - 1.0) > 1e-9:
            raise ValueError("think_rate + rec_rate must equal 1")
        if self.think_loss not in ("answer", "full"):
            raise ValueError("think_loss must be 'answer' or 'full'")


@dataclass(frozen=True)
class TrainingInstance:
    """Question+answer token ids; ``pos`` is the negative offset of the first answer token."""

    ids: np.ndarray
    slots: tuple[tuple[int, str], ...]
    pos: int
    kind: str
    label: int
    user_id: int = -1
    item_id: int = -1

    @property
    def answer_ids(self) -> np.ndarray:
        return self.ids[self.pos:]

    @property
    def question_ids(self) -> np.ndarray:
        return self.ids[: self.pos]

    @property
    def question_slots(self) -> tuple[tuple[int, str], ...]:
        return tuple(s for s in self.slots if s[0] < len(self.ids) + self.pos)


def make_instance(
    prompt: PromptInstance,
    tokenizer: Tokenizer,
    feature_map: Mapping[str, object] | None = None,
    context_len: int | None = None,
) -> TrainingInstance:
    """Tokenize and concatenate question and answer.

    Thinking answers get a trailing ``<eos>`` so generation learns to stop.
    """
    q_ids, q_slots = tokenizer.encode_with_slots(prompt.question_text)
    a_ids = tokenizer.encode(prompt.answer_text)
    if not a_ids:
        raise ValueError("empty answer")
    if prompt.kind == THINKING:
        a_ids = a_ids + [tokenizer.eos_id]
    if prompt.kind == RECOMMEND and a_ids[0] != (tokenizer.yes_id if prompt.label else tokenizer.no_id):
        raise ValueError("recommend answer must start with the Yes/No token matching the label")
    ids = np.array(q_ids + a_ids, dtype=np.int64)
    if context_len is not None and len(ids) > context_len:
        raise SequenceTooLong(f"instance of {len(ids)} tokens exceeds context {context_len}")
    if feature_map is not None:
        missing = [k for _, k in q_slots if k not in feature_map]
        if missing:
            raise KeyError(f"no feature vectors for {missing}")
    return TrainingInstance(ids, tuple(q_slots), -len(a_ids), prompt.kind, prompt.label,
                            prompt.user_id, prompt.item_id)


# -- losses ----------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _answer_rows(inst: TrainingInstance) -> np.ndarray:
    """Logit rows predicting each answer token (row j predicts token j + 1)."""
    L = len(inst.ids)
    return np.arange(L + inst.pos - 1, L - 1)


def _think_rows(inst: TrainingInstance, mode: str) -> np.ndarray:
    return _answer_rows(inst) if mode == "answer" else np.arange(0, len(inst.ids) - 1)


def rec_score(logit_row: np.ndarray, tokenizer: Tokenizer, rule: str = "yes_no") -> float:
    z = logit_row[tokenizer.yes_id] - (logit_row[tokenizer.no_id] if rule == "yes_no" else 0.0)
    return float(sigmoid(z))


def loss_think(logits: np.ndarray, inst: TrainingInstance, mode: str = "answer") -> float:
    """Mean next-token cross-entropy over the answer span (or the whole sequence)."""
    rows = _think_rows(inst, mode)
    lp = _log_softmax(logits[rows])
    return float(-lp[np.arange(len(rows)), inst.ids[rows + 1]].mean())


def loss_rec(logits: np.ndarray, inst: TrainingInstance, tokenizer: Tokenizer, rule: str = "yes_no") -> float:
    """BCE between the Yes-score at the first answer position and the label."""
    row = logits[len(inst.ids) + inst.pos - 1]
    z = row[tokenizer.yes_id] - (row[tokenizer.no_id] if rule == "yes_no" else 0.0)
    return float(np.logaddexp(0.0, -z) if inst.label else np.logaddexp(0.0, z))


def combined_loss(l_rec: float, l_think: float, kind: str, weights: LossWeights) -> float:
    a, b = weights.coefficients(kind)
    return a * l_rec + b * l_think


def instance_loss(logits: np.ndarray, inst: TrainingInstance, tokenizer: Tokenizer,
                  weights: LossWeights, mode: str = "answer", rule: str = "yes_no") -> float:
    return combined_loss(loss_rec(logits, inst, tokenizer, rule), loss_think(logits, inst, mode),
                         inst.kind, weights)


# -- batching --------------------------------------------------------------

@dataclass
class Batch:
    instances: list[TrainingInstance]
    emb: np.ndarray
    ids: np.ndarray
    slot_mask: np.ndarray
    rows: tuple[np.ndarray, np.ndarray]
    spans: list[tuple[int, int, int]]  # (start, n_think_rows, rec_offset) into rows
    feature_keys: list[str] = field(default_factory=list)
    feature_cache: tuple = ()


def build_batch(model: TinyLM, insts: Sequence[TrainingInstance], features=None,
                mode: str = "answer") -> Batch:
    keys = [k for inst in insts for _, k in inst.slots]
    fmap, fkeys, fcache = features.vectors(keys) if (features is not None and keys) else ({}, [], ())
    embs, ids_list = [], []
    for inst in insts:
        e = model.params["tok_emb"][inst.ids].copy()
        for p, k in inst.slots:
            if k not in fmap:
                raise KeyError(f"no feature vector for placeholder {k}")
            e[p] = fmap[k]
        embs.append(e)
    emb, lengths = pad_embeddings(embs)
    B, L = emb.shape[:2]
    ids = np.zeros((B, L), dtype=np.int64)
    slot_mask = np.ones((B, L), dtype=bool)
    bi, pi, spans = [], [], []
    for b, inst in enumerate(insts):
        ids[b, : len(inst.ids)] = inst.ids
        slot_mask[b, : len(inst.ids)] = False
        for p, _ in inst.slots:
            slot_mask[b, p] = True
        think = _think_rows(inst, mode)
        rec_row = len(inst.ids) + inst.pos - 1
        spans.append((len(bi), len(think), int(np.searchsorted(think, rec_row))))
        bi.extend([b] * len(think))
        pi.extend(think.tolist())
    return Batch(list(insts), emb, ids, slot_mask, (np.array(bi), np.array(pi)), spans, fkeys, fcache)


def batch_loss_grad(logits: np.ndarray, batch: Batch, tokenizer: Tokenizer, weights: LossWeights,
                    rule: str = "yes_no") -> tuple[float, float, float, np.ndarray]:
    """Batch-mean (L_rec, L_think, combined) and d(combined)/d(logits)."""
    n = len(batch.instances)
    lp = _log_softmax(logits)
    prob = np.exp(lp)
    dlog = np.zeros_like(logits)
    tot_rec = tot_think = tot = 0.0
    for inst, (start, m, off) in zip(batch.instances, batch.spans):
        sl = slice(start, start + m)
        rows = batch.rows[1][sl]
        targets = inst.ids[rows + 1]
        l_think = -lp[np.arange(start, start + m), targets].mean()
        r = start + off
        z = logits[r, tokenizer.yes_id] - (logits[r, tokenizer.no_id] if rule == "yes_no" else 0.0)
        l_rec = np.logaddexp(0.0, -z) if inst.label else np.logaddexp(0.0, z)
        a, b = weights.coefficients(inst.kind)
        tot_rec += l_rec
        tot_think += l_think
        tot += a * l_rec + b * l_think
        if b:
            g = prob[sl].copy()
            g[np.arange(m), targets] -= 1.0
            dlog[sl] += (b / (m * n)) * g
        if a:
            dz = (float(sigmoid(z)) - inst.label) * a / n
            dlog[r, tokenizer.yes_id] += dz
            if rule == "yes_no":
                dlog[r, tokenizer.no_id] -= dz
    return tot_rec / n, tot_think / n, tot / n, dlog


# -- sampling --------------------------------------------------------------

def draw_kinds(n: int, think_rate: float, rng: np.random.Generator) -> list[str]:
    """i.i.d. per-instance kind draws."""
    return [THINKING if u < think_rate else RECOMMEND for u in rng.random(n)]


class AdamW:
    """Decoupled-weight-decay Adam over a dict of arrays, updated in place."""

    def __init__(self, lr: float, weight_decay: float, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, b1, b2, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1, c2 = 1 - self.b1**self.t, 1 - self.b2**self.t
        for k in sorted(grads):
            g, p = grads[k], params[k]
            m, v = self.state.get(k, (np.zeros_like(p), np.zeros_like(p)))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.state[k] = (m, v)
            p *= 1 - self.lr * self.wd
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip(groups: Iterable[dict[str, np.ndarray]], max_norm: float) -> None:
    groups = list(groups)
    if max_norm <= 0:
        return
    norm = math.sqrt(sum(float((g * g).sum()) for grp in groups for g in grp.values()))
    if norm > max_norm:
        for grp in groups:
            for k in grp:
                grp[k] = grp[k] * (max_norm / norm)


@dataclass
class StepGradients:
    l_rec: float
    l_think: float
    loss: float
    base: dict[str, np.ndarray]
    adapter: dict[str, np.ndarray]
    projector: dict[str, np.ndarray]


def step_gradients(model: TinyLM, batch: Batch, tokenizer: Tokenizer, weights: LossWeights,
                   adapter: LoraAdapter | None = None, *, rule: str = "yes_no", train_base: bool = False,
                   adapter_layers: Iterable[int] = (), features=None,
                   rng: np.random.Generator | None = None) -> StepGradients:
    """Batch-mean combined loss and its gradients for the requested parameter groups.

    ``features`` (a FeatureSource) requests projector gradients, chained
    through the spliced placeholder rows. ``rng`` enables LoRA dropout.
    """
    layers = set(adapter_layers)
    logits, cache = model.forward_batch(batch.emb.astype(model.dtype), adapter, train=rng is not None,
                                        rng=rng, rows=batch.rows)
    l_rec, l_think, loss, dlog = batch_loss_grad(logits, batch, tokenizer, weights, rule)
    want_adapter = adapter is not None and bool(layers)
    grads = model.backward(cache, dlog, base=train_base, adapters=want_adapter, adapter_layers=layers)
    gb: dict[str, np.ndarray] = {}
    if train_base:
        gb = grads.base
        d = model.config.d_model
        gb["tok_emb"] = model.embedding_grad(batch.ids.ravel(), grads.embeddings.reshape(-1, d),
                                             batch.slot_mask.ravel())
    ga = grads.adapters[0] if (want_adapter and grads.adapters) else {}
    gp: dict[str, np.ndarray] = {}
    if features is not None and batch.feature_keys:
        pos = {k: i for i, k in enumerate(batch.feature_keys)}
        dout = np.zeros((len(pos), features.projector.d_out))
        for b, inst in enumerate(batch.instances):
            for p, k in inst.slots:
                dout[pos[k]] += grads.embeddings[b, p]
        gp = features.projector.backward(batch.feature_cache, dout)
    return StepGradients(float(l_rec), float(l_think), float(loss), gb, ga, gp)


@dataclass
class TrainResult:
    model: TinyLM
    adapter: LoraAdapter | None
    projector: object | None
    log: list[tuple[int, float, float, float]]


def fit(
    model: TinyLM,
    tokenizer: Tokenizer,
    corpus_rec: Sequence[TrainingInstance],
    corpus_think: Sequence[TrainingInstance],
    mix: MixConfig,
    weights: LossWeights,
    *,
    adapter: LoraAdapter | None = None,
    adapter_layers: Iterable[int] | None = None,
    train_base: bool = False,
    features=None,
    train_projector: bool = False,
) -> TrainResult:
    """Mixed-sampling training loop shared by every stage.

    Inputs are never mutated: the model, adapter and projector that receive
    updates are copies returned in the result. Anything not selected for
    training keeps bit-identical values.
    """
    layers = set(range(model.config.n_layers)) if adapter_layers is None else set(adapter_layers)
    train_adapter = adapter is not None and bool(layers)
    if adapter is not None and not layers and not train_base and not train_projector:
        raise ValueError("empty trainable layer set")
    if not (train_adapter or train_base or train_projector):
        raise ValueError("nothing to train")
    if mix.think_rate > 0 and not corpus_think:
        raise ValueError("thinking corpus is empty but think_rate > 0")
    if mix.rec_rate > 0 and not corpus_rec:
        raise ValueError("recommendation corpus is empty but rec_rate > 0")

    model = TinyLM(model.config, {k: v.copy() for k, v in model.params.items()}) if train_base else model
    adapter = adapter.copy() if (adapter is not None and train_adapter) else adapter
    if train_projector:
        from .projector import FeatureSource, Projector

        features = FeatureSource(Projector({k: v.copy() for k, v in features.projector.params.items()}),
                                 features.collab)
    opt_base, opt_ad, opt_proj = (AdamW(mix.learning_rate, mix.weight_decay) for _ in range(3))
    rng = np.random.default_rng(mix.seed)
    ad_keys = {k for k in (adapter.weights if adapter else {}) if int(k[1:].split(".")[0]) in layers}
    log = []
    for step in range(mix.steps):
        kinds = draw_kinds(mix.batch_size, mix.think_rate, rng)
        insts = [
            corpus_think[rng.integers(len(corpus_think))] if k == THINKING
            else corpus_rec[rng.integers(len(corpus_rec))]
            for k in kinds
        ]
        batch = build_batch(model, insts, features, mix.think_loss)
        sg = step_gradients(model, batch, tokenizer, weights, adapter, rule=mix.score_rule,
                            train_base=train_base, adapter_layers=layers if train_adapter else set(),
                            features=features if train_projector else None,
                            rng=np.random.default_rng([mix.seed, step]))
        if not math.isfinite(sg.loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        l_rec, l_think, loss = sg.l_rec, sg.l_think, sg.loss
        log.append((step, l_rec, l_think, loss))
        ga = {k: v for k, v in sg.adapter.items() if k in ad_keys}
        gp = sg.projector
        groups = [g for g in (sg.base if train_base else None, ga if train_adapter else None, gp or None)
                  if g is not None]
        _clip(groups, mix.grad_clip)
        if train_base:
            opt_base.step(model.params, sg.base)
        if train_adapter:
            opt_ad.step(adapter.weights, ga)
        if gp:
            opt_proj.step(features.projector.params, gp)
        if step % 50 == 0:
            logger.info("step %d rec %.4f think %.4f loss %.4f", step, l_rec, l_think, loss)
    return TrainResult(model, adapter, features.projector if train_projector else None, log)


def train_adapter(
    model: TinyLM,
    tokenizer: Tokenizer,
    corpus_rec: Sequence[TrainingInstance],
    corpus_think: Sequence[TrainingInstance],
    mix: MixConfig,
    weights: LossWeights,
    trainable_layers: Iterable[int] | None = None,
    init_adapter: LoraAdapter | None = None,
    r: int = 8,
    alpha: float = 16.0,
    dropout: float = 0.05,
    train_base: bool = False,
    features=None,
) -> TrainResult:
    """Train a LoRA adapter (optionally together with the base weights)."""
    adapter = init_adapter if init_adapter is not None else LoraAdapter.init(
        model.config, r, alpha, dropout, seed=mix.seed)
    return fit(model, tokenizer, corpus_rec, corpus_think, mix, weights, adapter=adapter,
               adapter_layers=trainable_layers, train_base=train_base, features=features)


def fit_projector(
    model: TinyLM,
    tokenizer: Tokenizer,
    corpus_rec: Sequence[TrainingInstance],
    corpus_think: Sequence[TrainingInstance],
    mix: MixConfig,
    weights: LossWeights,
    adapter: LoraAdapter,
    features,
) -> TrainResult:
    """Train only the projector; LM base and adapter stay frozen."""
    return fit(model, tokenizer, corpus_rec, corpus_think, mix, weights, adapter=adapter,
               adapter_layers=(), features=features, train_projector=True)


def write_train_log(path, log: Sequence[tuple[int, float, float, float]]) -> None:
    """Columns: step, l_rec, l_think, combined."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tl_rec\tl_think\tcombined\n")
        fh.writelines(f"{s}\t{a:.8g}\t{b:.8g}\t{c:.8g}\n" for s, a, b, c in log)


def last_layers(n_layers: int, k: int) -> list[int]:
    if not 1 <= k <= n_layers:
        raise ValueError(f"trainable layer count {k} outside 1..{n_layers}")
    return list(range(n_layers - k, n_layers))
