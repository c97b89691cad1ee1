"""Staged training and evaluation driven by a :class:`PipelineConfig`.

Every stage reads its prerequisites from the output directory, checks that
they were produced under the same configuration, and writes exactly one
artifact carrying the stage name, its config hash, all seeds and the hashes
of the prerequisites it consumed.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .collab import CollabModel, CollabTrainConfig, train_mf
from .config import ConfigError, PipelineConfig
from .data import (DataError, Dataset, HistoryWindow, filter_sparse, history_windows, ingest_raw,
                   load_dataset, load_items, merge, save_dataset, temporal_split)
from .experts import (FUSED, GLOBAL, SINGLE, ExpertSet, FusionDecision, GateConfig, UserGroups,
                      cluster_users, expert_representation, fuse_adapters, participation,
                      select_for_user, write_decision_log)
from .keywords import augment_items
from .lm import LmConfig, LoraAdapter, SequenceTooLong, TinyLM
from .metrics import MetricReport, meteor, report
from .projector import FeatureSource, Projector
from .prompts import render_question, render_rec_prompt, render_think_prompt, yes_no
from .reasoning import (SynthesisExhausted, build_reason_corpus, default_oracle, read_reason_metadata,
                        read_reason_table, synth_reason, write_reason_table)
from .synthetic import SyntheticSpec
from .synthetic import write as write_synthetic
from .tokenizer import Tokenizer
from .training import (LossWeights, MixConfig, fit_projector, last_layers, make_instance, train_adapter,
                       write_train_log)

logger = logging.getLogger(__name__)

MODES = (GLOBAL, SINGLE, FUSED, "auto")


class PrerequisiteError(RuntimeError):
    """A stage input is missing or was built under a different configuration."""


# Config sections each stage depends on; their digest is the stage's config hash.
STAGE_SECTIONS = {
    "prepare": ("data",),
    "synth": ("data", "synth"),
    "train-collab": ("data", "collab"),
    "train-global": ("data", "synth", "lm", "mix", "loss"),
    "cluster": ("data", "collab", "experts"),
    "train-experts": ("data", "synth", "lm", "mix", "loss", "collab", "experts"),
    "train-projector": ("data", "synth", "lm", "mix", "loss", "collab", "projector"),
}

ARTIFACTS = {
    "prepare": "data",
    "synth": "reasons.tsv",
    "train-collab": "collab.trkc",
    "train-global": "global.trkc",
    "cluster": "groups.trkc",
    "train-experts": "experts.trkc",
    "train-projector": "projector.trkc",
}

PREREQS = {
    "prepare": (),
    "synth": ("prepare",),
    "train-collab": ("prepare",),
    "train-global": ("prepare", "synth"),
    "cluster": ("prepare", "train-collab"),
    "train-experts": ("prepare", "train-collab", "train-global", "cluster"),
    "train-projector": ("prepare", "train-collab", "train-global"),
}


def artifact_path(cfg: PipelineConfig, stage: str) -> Path:
    return Path(cfg.output) / ARTIFACTS[stage]


def artifact_hash(path: Path) -> str:
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(path.iterdir()):
            h.update(f.name.encode() + b"\0" + f.read_bytes())
        return h.hexdigest()
    return checkpoint.file_hash(path)


def artifact_metadata(path: Path) -> dict:
    if path.is_dir():
        _, manifest = load_dataset(path)
        return {"config_hash": manifest.get("config_hash", "")}
    if path.suffix == ".tsv":
        return read_reason_metadata(path)
    return checkpoint.load(path)[1]


def _needs(cfg: PipelineConfig, stage: str) -> tuple[str, ...]:
    reqs = PREREQS[stage]
    if stage == "train-global" and cfg.mix.think_rate == 0:
        reqs = tuple(r for r in reqs if r != "synth")
    return reqs


def check_prerequisites(cfg: PipelineConfig, stage: str) -> dict[str, str]:
    """Verify each prerequisite exists and matches the current config; return their hashes."""
    hashes = {}
    for req in _needs(cfg, stage):
        path = artifact_path(cfg, req)
        if not path.exists():
            raise PrerequisiteError(
                f"{stage}: missing prerequisite checkpoint {path} (run the '{req}' stage first)")
        stored = artifact_metadata(path).get("config_hash")
        expected = cfg.section_hash(*STAGE_SECTIONS[req])
        if stored != expected:
            raise PrerequisiteError(
                f"{stage}: {path} was built with config hash {stored}, current config gives "
                f"{expected}; rerun '{req}'")
        hashes[req] = artifact_hash(path)
    return hashes


def stage_metadata(cfg: PipelineConfig, stage: str, prereqs: dict[str, str], **extra) -> dict:
    return {
        "stage": stage,
        "config_hash": cfg.section_hash(*STAGE_SECTIONS[stage]),
        "seeds": cfg.seeds(),
        "prerequisites": prereqs,
        **extra,
    }


def is_current(cfg: PipelineConfig, stage: str) -> bool:
    path = artifact_path(cfg, stage)
    if not path.exists():
        return False
    try:
        return artifact_metadata(path).get("config_hash") == cfg.section_hash(*STAGE_SECTIONS[stage])
    except (DataError, checkpoint.CheckpointError, ValueError):
        return False


def _begin(cfg: PipelineConfig, stage: str) -> dict[str, str]:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    return check_prerequisites(cfg, stage)


# -- shared loaders --------------------------------------------------------------

def load_splits(cfg: PipelineConfig) -> dict[str, Dataset]:
    return load_dataset(artifact_path(cfg, "prepare"))[0]


def split_windows(cfg: PipelineConfig, splits: dict[str, Dataset], split: str) -> list[HistoryWindow]:
    """History windows for a split; earlier splits supply the history."""
    h = cfg.data.max_history
    if split == "train":
        return history_windows(splits["train"], None, h)
    if split == "valid":
        return history_windows(splits["valid"], splits["train"], h)
    if split == "test":
        return history_windows(splits["test"], merge([splits["train"], splits["valid"]]), h)
    raise ConfigError(f"unknown split {split!r}")


def mix_config(cfg: PipelineConfig, **changes) -> MixConfig:
    m = cfg.mix
    base = MixConfig(m.think_rate, m.rec_rate, m.batch_size, m.steps, m.learning_rate,
                     m.weight_decay, m.seed, m.think_loss, m.score_rule, m.grad_clip)
    try:
        return dataclasses.replace(base, **changes)
    except ValueError as exc:
        raise ConfigError(f"mix: {exc}") from exc


def loss_weights(cfg: PipelineConfig) -> LossWeights:
    l = cfg.loss
    try:
        return LossWeights(l.alpha, l.beta, l.eta, l.gamma)
    except ValueError as exc:
        raise ConfigError(f"loss: {exc}") from exc


def load_collab(cfg: PipelineConfig) -> CollabModel:
    t, _ = checkpoint.load(artifact_path(cfg, "train-collab"))
    return CollabModel(t["user"].astype(float), t["item"].astype(float))


@dataclass
class GlobalModel:
    model: TinyLM
    adapter: LoraAdapter
    tokenizer: Tokenizer


def load_global(cfg: PipelineConfig) -> GlobalModel:
    t, meta = checkpoint.load(artifact_path(cfg, "train-global"))
    lmc = LmConfig(**meta["lm"])
    dt = np.dtype(lmc.dtype)
    params = {k[5:]: v.astype(dt) for k, v in t.items() if k.startswith("base/")}
    weights = {k[5:]: v.astype(dt) for k, v in t.items() if k.startswith("lora/")}
    lora = meta["lora"]
    adapter = LoraAdapter(lora["r"], lora["alpha"], lora["dropout"], weights)
    return GlobalModel(TinyLM(lmc, params), adapter, Tokenizer(meta["vocab"]))


def load_groups(cfg: PipelineConfig) -> UserGroups:
    t, _ = checkpoint.load(artifact_path(cfg, "cluster"))
    return UserGroups(t["assignment"].astype(np.int64), t["centroids"].astype(float))


def load_experts(cfg: PipelineConfig, glob: GlobalModel) -> ExpertSet:
    t, meta = checkpoint.load(artifact_path(cfg, "train-experts"))
    dt = glob.model.dtype
    adapters = []
    for g in range(meta["n_groups"]):
        pre = f"expert{g}/"
        w = {k[len(pre):]: v.astype(dt) for k, v in t.items() if k.startswith(pre)}
        adapters.append(LoraAdapter(glob.adapter.r, glob.adapter.alpha, glob.adapter.dropout, w))
    return ExpertSet(glob.adapter, adapters, t["representations"].astype(float))


def load_projector(cfg: PipelineConfig) -> Projector:
    t, _ = checkpoint.load(artifact_path(cfg, "train-projector"))
    return Projector({k: v.astype(float) for k, v in t.items()})


def _instances(prompts, tok: Tokenizer, context_len: int):
    try:
        return [make_instance(p, tok, context_len=context_len) for p in prompts]
    except SequenceTooLong as exc:
        raise ConfigError(f"lm.context_len={context_len} is too small: {exc}") from exc


def _lm_sizes(cfg: PipelineConfig) -> dict:
    l = cfg.lm
    return dict(d_model=l.d_model, n_layers=l.n_layers, n_heads=l.n_heads,
                context_len=l.context_len, seed=l.seed, dtype=l.dtype)


def _corpora(cfg: PipelineConfig, splits: dict[str, Dataset], feature_slots: bool):
    """Recommend and thinking prompts over the training windows."""
    noun = cfg.data.noun
    windows = split_windows(cfg, splits, "train")
    rec = [render_rec_prompt(w, feature_slots, noun) for w in windows]
    think = []
    if cfg.mix.think_rate > 0:
        reasons = {(r.user_id, r.item_id, r.timestamp): r.reason
                   for r in read_reason_table(artifact_path(cfg, "synth"))}
        think = [render_think_prompt(w, reasons[k], feature_slots, noun) for w in windows
                 if (k := (w.user_id, w.target.item_id, w.timestamp)) in reasons]
    return windows, rec, think


# -- stages ------------------------------------------------------------------

def stage_prepare(cfg: PipelineConfig) -> dict[str, str]:
    """Ingest, filter, keyword-augment and temporally split the raw ratings."""
    prereqs = _begin(cfg, "prepare")
    d = cfg.data
    ratings, items_path = d.ratings, d.items
    if d.source == "synthetic":
        spec = SyntheticSpec(n_users=d.synthetic_users, n_items=d.synthetic_items,
                             n_groups=d.synthetic_groups, seed=d.synthetic_seed)
        paths = write_synthetic(Path(cfg.output) / "raw", spec)
        ratings, items_path = str(paths["ratings"]), str(paths["items"])
    elif d.source != "file":
        raise ConfigError(f"data.source must be 'file' or 'synthetic', got {d.source!r}")
    for key, p in (("data.ratings", ratings), ("data.items", items_path)):
        if key == "data.ratings" and not p:
            raise ConfigError("data.ratings is not set")
        if p and not Path(p).exists():
            raise ConfigError(f"{key}: {p} does not exist")
    items = load_items(items_path, d.item_delimiter) if items_path else None
    ds = ingest_raw(ratings, d.delimiter, d.threshold, items)
    if d.keep_after:
        ds = ds.with_interactions(it for it in ds.interactions if it.timestamp > d.keep_after)
    ds = filter_sparse(ds, d.min_interactions)
    ds = augment_items(ds, d.keywords)
    train_end, valid_end = d.train_end, d.valid_end
    if not train_end:
        ts = [it.timestamp for it in ds.interactions]
        lo, hi = min(ts), max(ts)
        train_end = int(lo + d.train_frac * (hi - lo))
        valid_end = int(lo + d.valid_frac * (hi - lo))
    splits = dict(zip(("train", "valid", "test"), temporal_split(ds, train_end, valid_end)))
    meta = stage_metadata(cfg, "prepare", prereqs)
    extra = {
        "config_hash": meta["config_hash"],
        "seeds": ",".join(f"{k}={v}" for k, v in sorted(meta["seeds"].items())),
        "train_end": str(train_end),
        "valid_end": str(valid_end),
        "malformed": str(ds.malformed),
        "interactions": str(len(ds)),
    }
    save_dataset(artifact_path(cfg, "prepare"), splits, extra)
    stats = {"users": str(ds.user_count), "items": str(ds.item_count), **extra}
    stats.update({f"split.{n}": str(len(s)) for n, s in splits.items()})
    logger.info("prepared %s users, %s items, %s interactions", stats["users"], stats["items"], len(ds))
    return stats


def stage_synth(cfg: PipelineConfig) -> dict[str, int]:
    """Synthesize reasoning traces for a seeded sample of training windows."""
    prereqs = _begin(cfg, "synth")
    splits = load_splits(cfg)
    windows = split_windows(cfg, splits, "train")
    s = cfg.synth
    n = min(s.sample_n, len(windows))
    corpus = build_reason_corpus(windows, n, s.seed, max_attempts=s.max_attempts, noun=cfg.data.noun)
    meta = stage_metadata(cfg, "synth", prereqs, sampled=n, skipped=corpus.skipped)
    write_reason_table(artifact_path(cfg, "synth"), corpus.records, meta)
    return {"sampled": n, "kept": len(corpus.records), "skipped": corpus.skipped}


def stage_train_collab(cfg: PipelineConfig) -> str:
    prereqs = _begin(cfg, "train-collab")
    c = cfg.collab
    try:
        tc = CollabTrainConfig(c.d1, c.learning_rate, c.weight_decay, c.epochs, c.batch_size, c.seed,
                               c.optimizer)
    except ValueError as exc:
        raise ConfigError(f"collab: {exc}") from exc
    model = train_mf(load_splits(cfg)["train"], tc)
    return checkpoint.save(artifact_path(cfg, "train-collab"),
                           {"user": model.user_vectors, "item": model.item_vectors},
                           stage_metadata(cfg, "train-collab", prereqs, d1=c.d1))


def stage_train_global(cfg: PipelineConfig) -> str:
    """Train the base LM and the global adapter on placeholder-free prompts."""
    prereqs = _begin(cfg, "train-global")
    splits = load_splits(cfg)
    _, rec, think = _corpora(cfg, splits, feature_slots=False)
    if cfg.mix.think_rate > 0 and not think:
        raise ConfigError("mix.think_rate > 0 but no synthesized reason matches a training window")
    vocab_texts = [p.question_text + " " + p.answer_text for p in rec + think]
    vocab_texts += [f"{it.title} {' '.join(it.keywords)}" for it in splits["train"].items.values()]
    if rec:
        vocab_texts.append(render_question(split_windows(cfg, splits, "train")[0], True, cfg.data.noun))
    tok = Tokenizer.build(vocab_texts, cfg.lm.vocab_max)
    R = _instances(rec, tok, cfg.lm.context_len)
    T = _instances(think, tok, cfg.lm.context_len)
    lmc = LmConfig(len(tok), **_lm_sizes(cfg))
    model = TinyLM(lmc)
    l = cfg.lm
    res = train_adapter(model, tok, R, T, mix_config(cfg), loss_weights(cfg), r=l.lora_r,
                        alpha=l.lora_alpha, dropout=l.lora_dropout, train_base=cfg.mix.train_base)
    write_train_log(Path(cfg.output) / "train-global.log.tsv", res.log)
    tensors = {f"base/{k}": v for k, v in res.model.params.items()}
    tensors.update({f"lora/{k}": v for k, v in res.adapter.weights.items()})
    meta = stage_metadata(
        cfg, "train-global", prereqs, lm=dataclasses.asdict(lmc), vocab=tok.vocab[len(Tokenizer()):],
        lora={"r": l.lora_r, "alpha": l.lora_alpha, "dropout": l.lora_dropout},
        instances={"recommend": len(R), "thinking": len(T)}, final_loss=float(res.log[-1][3]),
    )
    return checkpoint.save(artifact_path(cfg, "train-global"), tensors, meta)


def stage_cluster(cfg: PipelineConfig) -> str:
    prereqs = _begin(cfg, "cluster")
    collab = load_collab(cfg)
    groups = cluster_users(collab.user_matrix(), cfg.experts.n_groups, cfg.experts.seed)
    sizes = [int(len(groups.members(g))) for g in range(groups.n_groups)]
    return checkpoint.save(artifact_path(cfg, "cluster"),
                           {"assignment": groups.assignment.astype(np.int32), "centroids": groups.centroids},
                           stage_metadata(cfg, "cluster", prereqs, sizes=sizes))


def trainable_k(cfg: PipelineConfig) -> int:
    return cfg.experts.trainable_layers or max(1, cfg.lm.n_layers // 2)


def stage_train_experts(cfg: PipelineConfig) -> str:
    """One base expert per user group: init from the global adapter, last-k layers trainable."""
    prereqs = _begin(cfg, "train-experts")
    glob = load_global(cfg)
    groups = load_groups(cfg)
    collab = load_collab(cfg)
    splits = load_splits(cfg)
    _, rec, think = _corpora(cfg, splits, feature_slots=False)
    tok, ctx = glob.tokenizer, cfg.lm.context_len
    R, T = _instances(rec, tok, ctx), _instances(think, tok, ctx)
    layers = last_layers(cfg.lm.n_layers, trainable_k(cfg))
    e = cfg.experts
    tensors: dict[str, np.ndarray] = {}
    counts = []
    for g in range(groups.n_groups):
        members = set(groups.members(g).tolist())
        Rg = [i for i in R if i.user_id in members]
        Tg = [i for i in T if i.user_id in members]
        if not Rg:
            raise DataError(f"group {g} has no training windows")
        changes = dict(steps=e.steps, seed=e.seed + g, learning_rate=e.learning_rate or cfg.mix.learning_rate)
        if cfg.mix.think_rate > 0 and not Tg:
            logger.warning("group %d has no thinking instances; training it on recommend only", g)
            changes.update(think_rate=0.0, rec_rate=1.0)
        res = train_adapter(glob.model, tok, Rg, Tg, mix_config(cfg, **changes), loss_weights(cfg),
                            trainable_layers=layers, init_adapter=glob.adapter)
        write_train_log(Path(cfg.output) / f"train-experts-{g}.log.tsv", res.log)
        tensors.update({f"expert{g}/{k}": v for k, v in res.adapter.weights.items()})
        counts.append([len(Rg), len(Tg)])
    tensors["representations"] = expert_representation(groups, collab.user_matrix())
    meta = stage_metadata(cfg, "train-experts", prereqs, n_groups=groups.n_groups,
                          trainable_layers=layers, instances=counts)
    return checkpoint.save(artifact_path(cfg, "train-experts"), tensors, meta)


def stage_train_projector(cfg: PipelineConfig) -> str:
    """Fit the projector on placeholder prompts with the LM and global adapter frozen."""
    prereqs = _begin(cfg, "train-projector")
    glob = load_global(cfg)
    collab = load_collab(cfg)
    _, rec, think = _corpora(cfg, load_splits(cfg), feature_slots=True)
    tok, ctx = glob.tokenizer, cfg.lm.context_len
    R, T = _instances(rec, tok, ctx), _instances(think, tok, ctx)
    p = cfg.projector
    proj = Projector.init(collab.d1, cfg.lm.d_model, p.hidden or None, p.seed)
    mix = mix_config(cfg, steps=p.steps, learning_rate=p.learning_rate, seed=p.seed)
    res = fit_projector(glob.model, tok, R, T, mix, loss_weights(cfg), glob.adapter,
                        FeatureSource(proj, collab))
    write_train_log(Path(cfg.output) / "train-projector.log.tsv", res.log)
    return checkpoint.save(artifact_path(cfg, "train-projector"), res.projector.params,
                           stage_metadata(cfg, "train-projector", prereqs))


STAGES = {
    "prepare": stage_prepare,
    "synth": stage_synth,
    "train-collab": stage_train_collab,
    "train-global": stage_train_global,
    "cluster": stage_cluster,
    "train-experts": stage_train_experts,
    "train-projector": stage_train_projector,
}


def run_stage(cfg: PipelineConfig, stage: str):
    logger.info("stage %s -> %s", stage, artifact_path(cfg, stage))
    return STAGES[stage](cfg)


def ensure_stages(cfg: PipelineConfig, mode: str = "auto") -> None:
    """Run, in order, every stage whose artifact is missing or stale for ``mode``."""
    wanted = ["prepare", "synth", "train-collab", "train-global"]
    if cfg.mix.think_rate == 0:
        wanted.remove("synth")
    if mode != GLOBAL:
        wanted += ["cluster", "train-experts"]
    if cfg.projector.enabled and cfg.eval.use_features:
        wanted.append("train-projector")
    stale = False
    for stage in wanted:
        if stale or not is_current(cfg, stage):
            run_stage(cfg, stage)
            stale = True


# -- evaluation ------------------------------------------------------------

class Server:
    """Loads trained artifacts and serves relevance scores and generations per user."""

    def __init__(self, cfg: PipelineConfig, mode: str = "auto"):
        if mode not in MODES:
            raise ConfigError(f"unknown expert mode {mode!r}; choose from {MODES}")
        self.cfg, self.mode = cfg, mode
        self.glob = load_global(cfg)
        self.collab = load_collab(cfg)
        self.experts = load_experts(cfg, self.glob) if mode != GLOBAL else None
        self.groups = load_groups(cfg) if mode == SINGLE else None
        self.features = None
        if cfg.eval.use_features and cfg.projector.enabled:
            self.features = FeatureSource(load_projector(cfg), self.collab)
        e = cfg.experts
        self.gate = GateConfig(e.tau, e.entropy_factor, e.conc_base, e.conc_slope, e.fusion)

    def adapter_for(self, user_id: int):
        """(decision, served adapter) for one user under the configured mode."""
        if self.mode == GLOBAL:
            return FusionDecision(GLOBAL, ()), self.glob.adapter
        ex = self.experts
        if self.mode == "auto":
            return select_for_user(user_id, ex, self.collab.user_matrix(), self.gate)
        w = participation(self.collab.user_matrix()[user_id], ex.representations, self.gate.tau)
        wt = tuple(float(x) for x in w)
        if self.mode == SINGLE:
            g = int(self.groups.assignment[user_id])
            return FusionDecision(SINGLE, wt, g), ex.base_adapters[g]
        return FusionDecision(FUSED, wt), fuse_adapters(ex.base_adapters, w, self.gate.fusion)

    def question(self, window: HistoryWindow):
        text = render_question(window, self.features is not None, self.cfg.data.noun)
        tok, model = self.glob.tokenizer, self.glob.model
        ids, slots = tok.encode_with_slots(text)
        fmap = self.features.vectors(k for _, k in slots)[0] if slots else {}
        return model.embed_and_splice(ids, slots, fmap, 0, tok)

    def score(self, windows: list[HistoryWindow], adapter) -> np.ndarray:
        seqs = [self.question(w) for w in windows]
        return self.glob.model.score_yes(seqs, self.glob.tokenizer, adapter, self.cfg.mix.score_rule,
                                         self.cfg.eval.batch_size)

    def explain(self, window: HistoryWindow, adapter) -> str:
        return self.glob.model.generate(self.question(window), self.glob.tokenizer, adapter,
                                        self.cfg.eval.max_new)


def eval_users(cfg: PipelineConfig, windows: list[HistoryWindow]) -> list[int]:
    users = sorted({w.user_id for w in windows})
    m = cfg.eval.max_users
    if m and m < len(users):
        rng = np.random.default_rng(cfg.eval.seed)
        users = sorted(int(u) for u in rng.choice(users, size=m, replace=False))
    return users


def cmd_evaluate(cfg: PipelineConfig, mode: str | None = None, tag: str | None = None) -> MetricReport:
    """Score the test split under one expert mode and write the report files."""
    mode = mode or cfg.eval.mode
    needed = ["prepare", "train-collab", "train-global"]
    if mode != GLOBAL:
        needed += ["cluster", "train-experts"]
    if cfg.eval.use_features and cfg.projector.enabled:
        needed.append("train-projector")
    out = Path(cfg.output)
    for stage in needed:
        path = artifact_path(cfg, stage)
        if not path.exists():
            raise PrerequisiteError(f"evaluate: missing prerequisite checkpoint {path} "
                                    f"(run the '{stage}' stage first)")
        if not is_current(cfg, stage):
            raise PrerequisiteError(f"evaluate: {path} does not match the current config; rerun '{stage}'")
    server = Server(cfg, mode)
    splits = load_splits(cfg)
    windows = split_windows(cfg, splits, cfg.eval.split)
    users = eval_users(cfg, windows)
    by_user: dict[int, list[HistoryWindow]] = {}
    for w in windows:
        by_user.setdefault(w.user_id, []).append(w)
    U, I, S, Y, decisions, served = [], [], [], [], [], {}
    for u in users:
        d, adapter = server.adapter_for(u)
        served[u] = adapter
        decisions.append((u, d))
        ws = by_user[u]
        S.extend(server.score(ws, adapter).tolist())
        U.extend([u] * len(ws))
        I.extend(w.target.item_id for w in ws)
        Y.extend(w.target_label for w in ws)
    gen_rows, met = [], []
    chosen = [w for w in windows if w.user_id in served]
    n = min(cfg.eval.reason_samples, len(chosen))
    if n:
        rng = np.random.default_rng(cfg.eval.seed)
        for idx in np.sort(rng.choice(len(chosen), size=n, replace=False)):
            w = chosen[int(idx)]
            try:
                rec = synth_reason(w, default_oracle, cfg.synth.max_attempts, cfg.data.noun)
            except SynthesisExhausted:
                continue
            ref = f"{yes_no(w.target_label)}. {rec.reason}"
            gen = server.explain(w, served[w.user_id])
            met.append(meteor(gen, ref))
            gen_rows.append((w.user_id, w.target.item_id, met[-1], gen, ref))
    rep = report(U, I, S, Y, cfg.eval.k, met)
    tag = tag or mode
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_{tag}.tsv").write_text(rep.tsv(), encoding="utf-8")
    write_decision_log(out / f"decisions_{tag}.tsv", decisions)
    with open(out / f"scores_{tag}.tsv", "w", encoding="utf-8") as fh:
        fh.write("user\titem\tlabel\tscore\n")
        fh.writelines(f"{u}\t{i}\t{y}\t{s:.9g}\n" for u, i, y, s in zip(U, I, Y, S))
    with open(out / f"generations_{tag}.tsv", "w", encoding="utf-8") as fh:
        fh.write("user\titem\tmeteor\tgenerated\treference\n")
        fh.writelines(f"{u}\t{i}\t{m:.6f}\t{g}\t{r}\n" for u, i, m, g, r in gen_rows)
    return rep


# -- ablation --------------------------------------------------------------

ABLATION_ROWS = ("full", "no-think", "no-experts", "neither")


def no_think_config(cfg: PipelineConfig) -> PipelineConfig:
    nt = copy.deepcopy(cfg)
    nt.output = str(Path(cfg.output) / "ablate-no-think")
    nt.mix.think_rate, nt.mix.rec_rate = 0.0, 1.0
    nt.loss.gamma = 0.0
    return nt


def cmd_ablate(cfg: PipelineConfig) -> list[tuple[str, MetricReport]]:
    """Full model, without thinking, without experts, and without both, on one seed."""
    nt = no_think_config(cfg)
    rows = []
    for name, c, mode in (("full", cfg, "auto"), ("no-think", nt, "auto"),
                          ("no-experts", cfg, GLOBAL), ("neither", nt, GLOBAL)):
        ensure_stages(c, mode)
        rows.append((name, cmd_evaluate(c, mode, tag=f"ablate_{name}")))
    Path(cfg.output, "ablation.tsv").write_text(ablation_table(rows, cfg.eval.k), encoding="utf-8")
    return rows


def ablation_table(rows: list[tuple[str, MetricReport]], k: int = 5) -> str:
    lines = [f"variant\tauc\tuauc\tndcg@{k}\tmap@{k}"]
    for name, r in rows:
        lines.append(f"{name}\t{r.auc:.6f}\t{r.uauc:.6f}\t{r.ndcg_at_k:.6f}\t{r.map_at_k:.6f}")
    return "\n".join(lines) + "\n"


# -- inference -------------------------------------------------------------

def cmd_infer(cfg: PipelineConfig, user_id: int, item_id: int, mode: str | None = None,
              explain: bool = False) -> dict[str, object]:
    """Score one (user, item) pair using the user's most recent history."""
    mode = mode or cfg.eval.mode
    splits = load_splits(cfg)
    everything = merge([splits["train"], splits["valid"], splits["test"]])
    if item_id not in everything.items:
        raise ConfigError(f"unknown item id {item_id}")
    past = sorted((it for it in everything.interactions if it.user_id == user_id),
                  key=lambda it: (it.timestamp, it.item_id))[-cfg.data.max_history:]
    if not past:
        raise ConfigError(f"user {user_id} has no interactions to build a history from")
    items = everything.items
    window = HistoryWindow(user_id, tuple((items[it.item_id], it.label) for it in past), items[item_id],
                           0, past[-1].timestamp + 1)
    server = Server(cfg, mode)
    d, adapter = server.adapter_for(user_id)
    out: dict[str, object] = {"user": user_id, "item": item_id, "branch": d.branch,
                              "weights": list(d.weights), "score": float(server.score([window], adapter)[0])}
    if explain:
        out["explanation"] = server.explain(window, adapter)
    return out
