"""A small pre-LN decoder-only transformer in numpy with hand-written backprop.

Weights follow the ``y = x @ W`` convention (``W`` is ``in x out``). LoRA
adapters attach to the query and value projections of every layer; several
adapters can be applied at once with scalar weights, which is how expert
fusion is served.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tokenizer import Tokenizer

TARGETS = ("q", "v")
_GELU_C = math.sqrt(2.0 / math.pi)


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 512
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def layer_names(n_layers: int) -> list[str]:
    per = ("ln1.g", "ln1.b", "attn.q", "attn.k", "attn.v", "attn.o",
           "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")
    return [f"h{l}.{p}" for l in range(n_layers) for p in per]


def init_params(cfg: LmConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, V, dt = cfg.d_model, cfg.vocab_size, np.dtype(cfg.dtype)
    resid = 0.02 / math.sqrt(2 * cfg.n_layers)
    p: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0, 0.02, (V, d)),
        "pos_emb": rng.normal(0, 0.01, (cfg.context_len, d)),
    }
    for l in range(cfg.n_layers):
        h = f"h{l}."
        p[h + "ln1.g"], p[h + "ln1.b"] = np.ones(d), np.zeros(d)
        for t in ("q", "k", "v"):
            p[h + f"attn.{t}"] = rng.normal(0, 0.02, (d, d))
        p[h + "attn.o"] = rng.normal(0, resid, (d, d))
        p[h + "ln2.g"], p[h + "ln2.b"] = np.ones(d), np.zeros(d)
        p[h + "mlp.w1"], p[h + "mlp.b1"] = rng.normal(0, 0.02, (d, 4 * d)), np.zeros(4 * d)
        p[h + "mlp.w2"], p[h + "mlp.b2"] = rng.normal(0, resid, (4 * d, d)), np.zeros(d)
    p["lnf.g"], p["lnf.b"] = np.ones(d), np.zeros(d)
    p["out"] = rng.normal(0, 0.02, (d, V))
    return {k: v.astype(dt) for k, v in p.items()}


@dataclass
class LoraAdapter:
    """Low-rank deltas ``(alpha / r) * B @ A`` on the q and v projections.

    ``weights`` holds ``h{l}.{q|v}.A`` (r x d) and ``h{l}.{q|v}.B`` (d x r).
    """

    r: int
    alpha: float
    dropout: float
    weights: dict[str, np.ndarray]

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @classmethod
    def init(cls, cfg: LmConfig, r: int = 8, alpha: float = 16.0, dropout: float = 0.05,
             seed: int = 0) -> "LoraAdapter":
        if r < 1:
            raise ValueError("LoRA rank must be >= 1")
        rng = np.random.default_rng(seed)
        d, dt = cfg.d_model, np.dtype(cfg.dtype)
        bound = 1.0 / math.sqrt(d)
        w = {}
        for l in range(cfg.n_layers):
            for t in TARGETS:
                w[f"h{l}.{t}.A"] = rng.uniform(-bound, bound, (r, d)).astype(dt)
                w[f"h{l}.{t}.B"] = np.zeros((d, r), dtype=dt)
        return cls(r, float(alpha), float(dropout), w)

    @property
    def n_layers(self) -> int:
        return len(self.weights) // (2 * len(TARGETS))

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.r, self.alpha, self.dropout, {k: v.copy() for k, v in self.weights.items()})

    def same_structure(self, other: "LoraAdapter") -> bool:
        return self.r == other.r and self.weights.keys() == other.weights.keys() and all(
            self.weights[k].shape == other.weights[k].shape for k in self.weights
        )

    def merged_into(self, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Base params with this adapter folded in: ``W + s * (B @ A).T``."""
        out = dict(params)
        for l in range(self.n_layers):
            for t in TARGETS:
                A, B = self.weights[f"h{l}.{t}.A"], self.weights[f"h{l}.{t}.B"]
                key = f"h{l}.attn.{t}"
                out[key] = params[key] + self.scaling * (B @ A).T
        return out


# A served adapter is a weighted list of LoRA adapters.
AdapterMix = Sequence[tuple[float, LoraAdapter]]


def as_mix(adapter: LoraAdapter | AdapterMix | None) -> list[tuple[float, LoraAdapter]]:
    if adapter is None:
        return []
    if isinstance(adapter, LoraAdapter):
        return [(1.0, adapter)]
    return [(float(w), a) for w, a in adapter if w != 0.0]


@dataclass
class SplicedSequence:
    token_ids: np.ndarray
    embeddings: np.ndarray
    answer_start: int
    slot_positions: tuple[int, ...] = ()


@dataclass
class Grads:
    base: dict[str, np.ndarray] = field(default_factory=dict)
    adapters: list[dict[str, np.ndarray]] = field(default_factory=list)
    embeddings: np.ndarray | None = None


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def _layer_norm_back(dy, g, cache):
    xh, inv = cache
    dxh = dy * g
    d = xh.shape[-1]
    dx = inv / d * (d * dxh - dxh.sum(-1, keepdims=True) - xh * (dxh * xh).sum(-1, keepdims=True))
    return dx, (dy * xh), dy


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def _sum_rows(a):
    return a.reshape(-1, a.shape[-1]).sum(0)


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


class TinyLM:
    """Parameters plus forward/backward passes over right-padded batches."""

    def __init__(self, config: LmConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.dtype = np.dtype(config.dtype)

    # -- embedding -------------------------------------------------------
    def embed_and_splice(
        self,
        ids: Sequence[int],
        slots: Sequence[tuple[int, str]] = (),
        feature_map: Mapping[str, np.ndarray] | None = None,
        answer_len: int = 0,
        tokenizer: Tokenizer | None = None,
    ) -> SplicedSequence:
        """Token embeddings with placeholder rows replaced by injected vectors."""
        ids_arr = np.asarray(ids, dtype=np.int64)
        emb = self.params["tok_emb"][ids_arr].copy()
        feature_map = feature_map or {}
        positions = []
        for pos, key in slots:
            if key not in feature_map:
                raise KeyError(f"no feature vector for placeholder {key}")
            vec = np.asarray(feature_map[key], dtype=self.dtype)
            if vec.shape != (self.config.d_model,):
                raise ValueError(f"feature {key} has shape {vec.shape}")
            emb[pos] = vec
            positions.append(pos)
        if tokenizer is not None:
            expected = {i for i, t in enumerate(ids_arr) if t in (tokenizer.feat_id, tokenizer.user_id)}
            if expected != set(positions):
                raise KeyError("placeholder positions without a feature vector")
        return SplicedSequence(ids_arr, emb, len(ids_arr) - answer_len, tuple(positions))

    # -- forward ---------------------------------------------------------
    def forward_batch(
        self,
        emb: np.ndarray,
        adapters: LoraAdapter | AdapterMix | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
        rows: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> tuple[np.ndarray, dict]:
        """Run the decoder on ``emb`` (B x L x d).

        ``rows`` = (batch_index, position) selects which positions get logits;
        the result is then (n_rows x V), otherwise (B x L x V). LoRA dropout is
        only active when ``train`` is set and ``rng`` is given.
        """
        cfg, P = self.config, self.params
        B, L, d = emb.shape
        if L > cfg.context_len:
            raise SequenceTooLong(f"sequence of {L} tokens exceeds context {cfg.context_len}")
        H = cfg.n_heads
        dh = d // H
        scale = 1.0 / math.sqrt(dh)
        mix = as_mix(adapters)
        causal = np.where(np.triu(np.ones((L, L), dtype=bool), 1), -np.inf, 0.0).astype(self.dtype)
        x = emb.astype(self.dtype, copy=False) + P["pos_emb"][:L]
        layers = []
        for l in range(cfg.n_layers):
            pre = f"h{l}."
            c: dict = {}
            h, c["ln1"] = _layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            c["h"] = h
            q = h @ P[pre + "attn.q"]
            k = h @ P[pre + "attn.k"]
            v = h @ P[pre + "attn.v"]
            c["lora"] = []
            for j, (w, ad) in enumerate(mix):
                entry = {}
                for t, out in (("q", q), ("v", v)):
                    hin = h
                    mask = None
                    if train and rng is not None and ad.dropout > 0:
                        mask = ((rng.random(h.shape) >= ad.dropout) / (1.0 - ad.dropout)).astype(h.dtype)
                        hin = h * mask
                    z = hin @ ad.weights[f"{pre}{t}.A"].T
                    out += (w * ad.scaling) * (z @ ad.weights[f"{pre}{t}.B"].T)
                    entry[t] = (hin, mask, z)
                c["lora"].append(entry)
            qh = q.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            kh = k.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            vh = v.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            s = (qh @ kh.transpose(0, 1, 3, 2)) * scale + causal
            s -= s.max(-1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(-1, keepdims=True)
            a = (p @ vh).transpose(0, 2, 1, 3).reshape(B, L, d)
            x = x + a @ P[pre + "attn.o"]
            c.update(qh=qh, kh=kh, vh=vh, p=p, a=a)
            h2, c["ln2"] = _layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            u = h2 @ P[pre + "mlp.w1"] + P[pre + "mlp.b1"]
            g, tanh_u = _gelu(u)
            x = x + g @ P[pre + "mlp.w2"] + P[pre + "mlp.b2"]
            c.update(h2=h2, u=u, tanh_u=tanh_u, g=g)
            layers.append(c)
        xs = x[rows] if rows is not None else x
        hf, lnf = _layer_norm(xs, P["lnf.g"], P["lnf.b"])
        logits = hf @ P["out"]
        cache = dict(layers=layers, hf=hf, lnf=lnf, rows=rows, shape=(B, L, d), mix=mix, scale=scale)
        return logits, cache

    # -- backward --------------------------------------------------------
    def backward(
        self,
        cache: dict,
        dlogits: np.ndarray,
        base: bool = True,
        adapters: bool = True,
        adapter_layers: set[int] | None = None,
    ) -> Grads:
        """Exact reverse-mode gradients of ``sum(dlogits * logits)``.

        ``base=False`` skips all base-parameter gradients (frozen base);
        ``adapter_layers`` limits adapter gradients to those layer indices.
        """
        cfg, P = self.config, self.params
        B, L, d = cache["shape"]
        H = cfg.n_heads
        dh = d // H
        scale = cache["scale"]
        mix = cache["mix"]
        gb: dict[str, np.ndarray] = {}
        ga: list[dict[str, np.ndarray]] = [dict() for _ in mix]
        hf = cache["hf"]
        if base:
            gb["out"] = _wgrad(hf, dlogits)
        dhf = dlogits @ P["out"].T
        dxs, dg_, db_ = _layer_norm_back(dhf, P["lnf.g"], cache["lnf"])
        if base:
            gb["lnf.g"], gb["lnf.b"] = _sum_rows(dg_), _sum_rows(db_)
        if cache["rows"] is not None:
            dx = np.zeros((B, L, d), dtype=dxs.dtype)
            np.add.at(dx, cache["rows"], dxs)
        else:
            dx = dxs
        for l in reversed(range(cfg.n_layers)):
            pre = f"h{l}."
            c = cache["layers"][l]
            # MLP
            dm = dx
            dgl = dm @ P[pre + "mlp.w2"].T
            du = _gelu_back(dgl, c["u"], c["tanh_u"])
            dh2 = du @ P[pre + "mlp.w1"].T
            if base:
                gb[pre + "mlp.w2"] = _wgrad(c["g"], dm)
                gb[pre + "mlp.b2"] = _sum_rows(dm)
                gb[pre + "mlp.w1"] = _wgrad(c["h2"], du)
                gb[pre + "mlp.b1"] = _sum_rows(du)
            dxl, dg_, db_ = _layer_norm_back(dh2, P[pre + "ln2.g"], c["ln2"])
            if base:
                gb[pre + "ln2.g"], gb[pre + "ln2.b"] = _sum_rows(dg_), _sum_rows(db_)
            dx = dx + dxl
            # attention
            do = dx
            da = do @ P[pre + "attn.o"].T
            if base:
                gb[pre + "attn.o"] = _wgrad(c["a"], do)
            dah = da.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            p = c["p"]
            dp = dah @ c["vh"].transpose(0, 1, 3, 2)
            dvh = p.transpose(0, 1, 3, 2) @ dah
            ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * scale
            dqh = ds @ c["kh"]
            dkh = ds.transpose(0, 1, 3, 2) @ c["qh"]
            dq = dqh.transpose(0, 2, 1, 3).reshape(B, L, d)
            dk = dkh.transpose(0, 2, 1, 3).reshape(B, L, d)
            dv = dvh.transpose(0, 2, 1, 3).reshape(B, L, d)
            h = c["h"]
            dhn = dq @ P[pre + "attn.q"].T + dk @ P[pre + "attn.k"].T + dv @ P[pre + "attn.v"].T
            if base:
                gb[pre + "attn.q"] = _wgrad(h, dq)
                gb[pre + "attn.k"] = _wgrad(h, dk)
                gb[pre + "attn.v"] = _wgrad(h, dv)
            for j, (w, ad) in enumerate(mix):
                want = adapters and (adapter_layers is None or l in adapter_layers)
                for t, dout in (("q", dq), ("v", dv)):
                    hin, mask, z = c["lora"][j][t]
                    A, Bm = ad.weights[f"{pre}{t}.A"], ad.weights[f"{pre}{t}.B"]
                    ws = w * ad.scaling
                    dz = ws * (dout @ Bm)
                    if want:
                        ga[j][f"{pre}{t}.B"] = ws * _wgrad(dout, z)
                        ga[j][f"{pre}{t}.A"] = _wgrad(dz, hin)
                    dhin = dz @ A
                    dhn = dhn + (dhin * mask if mask is not None else dhin)
            dxl, dg_, db_ = _layer_norm_back(dhn, P[pre + "ln1.g"], c["ln1"])
            if base:
                gb[pre + "ln1.g"], gb[pre + "ln1.b"] = _sum_rows(dg_), _sum_rows(db_)
            dx = dx + dxl
        if base:
            gpos = np.zeros_like(P["pos_emb"])
            gpos[:L] = dx.sum(0)
            gb["pos_emb"] = gpos
        return Grads(gb, ga, dx)

    def embedding_grad(self, token_ids: np.ndarray, demb: np.ndarray, slot_mask: np.ndarray) -> np.ndarray:
        """Scatter ``demb`` into a ``tok_emb``-shaped gradient, skipping spliced rows."""
        g = np.zeros_like(self.params["tok_emb"])
        keep = ~slot_mask
        np.add.at(g, token_ids[keep], demb[keep])
        return g

    # -- single-sequence conveniences -------------------------------------
    def forward(self, seq: SplicedSequence, adapter=None, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        logits, _ = self.forward_batch(seq.embeddings[None], adapter, train_mode, rng)
        return logits[0]

    def next_logits(self, seqs: Sequence[SplicedSequence], adapter=None) -> np.ndarray:
        """Logits predicting the token after each sequence's last position."""
        emb, lengths = pad_embeddings([s.embeddings for s in seqs])
        rows = (np.arange(len(seqs)), lengths - 1)
        logits, _ = self.forward_batch(emb, adapter, rows=rows)
        return logits

    def score_yes(self, seqs: Sequence[SplicedSequence], tokenizer: Tokenizer, adapter=None,
                  rule: str = "yes_no", batch_size: int = 32) -> np.ndarray:
        """Relevance score read at the first answer position of question-only sequences."""
        out = []
        for i in range(0, len(seqs), batch_size):
            lg = self.next_logits(seqs[i:i + batch_size], adapter)
            out.append(relevance(lg[:, tokenizer.yes_id], lg[:, tokenizer.no_id], rule))
        return np.concatenate(out) if out else np.zeros(0)

    def generate(self, prompt: SplicedSequence, tokenizer: Tokenizer, adapter=None,
                 max_new: int = 64) -> str:
        """Greedy decoding until ``<eos>`` or ``max_new`` tokens."""
        emb = prompt.embeddings
        new: list[int] = []
        limit = min(max_new, self.config.context_len - len(emb))
        for _ in range(limit):
            logits, _ = self.forward_batch(emb[None], adapter,
                                           rows=(np.zeros(1, dtype=int), np.array([len(emb) - 1])))
            tok = int(np.argmax(logits[0]))
            if tok == tokenizer.eos_id:
                break
            new.append(tok)
            emb = np.concatenate([emb, self.params["tok_emb"][tok][None]], axis=0)
        return tokenizer.decode(new)


def relevance(z_yes: np.ndarray, z_no: np.ndarray, rule: str = "yes_no") -> np.ndarray:
    """``sigmoid(z_yes - z_no)`` (default) or ``sigmoid(z_yes)``."""
    if rule == "yes_no":
        return sigmoid(np.asarray(z_yes) - np.asarray(z_no))
    if rule == "yes_logit":
        return sigmoid(np.asarray(z_yes))
    raise ValueError(f"unknown score rule {rule!r}")


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def pad_embeddings(embs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(e) for e in embs])
    L = int(lengths.max())
    out = np.zeros((len(embs), L, embs[0].shape[1]), dtype=embs[0].dtype)
    for i, e in enumerate(embs):
        out[i, : len(e)] = e
    return out, lengths
