"""Reasoning-trace synthesis: query an oracle, reflect until it agrees with the label."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import HistoryWindow, Item
from .prompts import PromptInstance, first_turn_prompt, reflect_prompt, render_think_prompt

logger = logging.getLogger(__name__)

N_REFLECT = 3


class ReasonOracle(Protocol):
    def __call__(self, history: HistoryWindow, target: Item, prompt: str) -> tuple[int, str]: ...


class SynthesisExhausted(RuntimeError):
    """The oracle never produced the labelled answer within the attempt budget."""


@dataclass(frozen=True)
class ReasonRecord:
    user_id: int
    item_id: int
    label: int
    reason: str
    attempts: int
    prompts_used: tuple[int, ...]
    timestamp: int = 0


def synth_reason(history: HistoryWindow, oracle: ReasonOracle, max_attempts: int = 4,
                 noun: str = "book") -> ReasonRecord:
    """First-turn query, then rotate through the reflect prompts until correct.

    ``prompts_used`` lists the 1-based reflect variants that were sent.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    label = history.target_label
    used: list[int] = []
    prompt = first_turn_prompt(history, noun)
    for attempt in range(1, max_attempts + 1):
        pred, text = oracle(history, history.target, prompt)
        if pred not in (0, 1) or not text.strip():
            raise ValueError("oracle must return a 0/1 prediction and a nonempty explanation")
        if pred == label:
            return ReasonRecord(history.user_id, history.target.item_id, label, text.strip(),
                                attempt, tuple(used), history.timestamp)
        variant = (attempt - 1) % N_REFLECT
        used.append(variant + 1)
        prompt = reflect_prompt(variant, history, noun)
    raise SynthesisExhausted(
        f"user {history.user_id} item {history.target.item_id}: no correct answer in {max_attempts} attempts"
    )


def keyword_vote(history: HistoryWindow, target: Item) -> tuple[int, list[str], list[str]]:
    liked = {k for it, lab in history.entries if lab for k in it.keywords}
    disliked = {k for it, lab in history.entries if not lab for k in it.keywords}
    pos = [k for k in target.keywords if k in liked]
    neg = [k for k in target.keywords if k in disliked]
    return int(len(pos) > len(neg)), pos, neg


def default_oracle(history: HistoryWindow, target: Item, prompt: str = "") -> tuple[int, str]:
    """Keyword-overlap vote between the target and liked vs disliked history items.

    Predicts yes only on a strict majority of liked overlaps; any tie is a no.
    The prompt is ignored, so a wrong vote stays wrong across reflect turns.
    """
    pred, pos, neg = keyword_vote(history, target)
    n_like = sum(1 for _, lab in history.entries if lab)
    n_dis = len(history.entries) - n_like
    base = f"the user liked {n_like} and disliked {n_dis} of the {len(history.entries)} earlier items."
    if not pos and not neg:
        return 0, (f"{base} {target.title} shares no keyword with that history, so with no evidence "
                   "the default answer is that the user would not enjoy it.")
    fmt = lambda ks: ", ".join(ks) if ks else "none"
    detail = f"it shares {len(pos)} keywords with liked items ({fmt(pos)}) and {len(neg)} with disliked items ({fmt(neg)})."
    if pred:
        return 1, f"{base} {target.title}: {detail} the liked side dominates, so the user would enjoy it."
    if len(pos) == len(neg):
        return 0, f"{base} {target.title}: {detail} the evidence is ambiguous, so the default answer is no."
    return 0, f"{base} {target.title}: {detail} the disliked side dominates, so the user would not enjoy it."


@dataclass
class ReasonCorpus:
    instances: list[PromptInstance]
    records: list[ReasonRecord]
    skipped: int


def build_reason_corpus(
    windows: Sequence[HistoryWindow],
    sample_n: int,
    seed: int = 0,
    oracle: ReasonOracle = default_oracle,
    max_attempts: int = 4,
    feature_slots: bool = False,
    noun: str = "book",
) -> ReasonCorpus:
    """Seeded uniform sample of windows turned into thinking instances ("Yes."/"No." + reason)."""
    if sample_n > len(windows):
        raise ValueError(f"sample_n={sample_n} exceeds {len(windows)} available windows")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(windows), size=sample_n, replace=False))
    instances, records, skipped = [], [], 0
    for idx in picks:
        w = windows[int(idx)]
        try:
            rec = synth_reason(w, oracle, max_attempts, noun)
        except SynthesisExhausted as exc:
            logger.debug("skipped: %s", exc)
            skipped += 1
            continue
        records.append(rec)
        instances.append(render_think_prompt(w, rec.reason, feature_slots, noun))
    if skipped:
        logger.info("reason synthesis skipped %d of %d samples", skipped, sample_n)
    return ReasonCorpus(instances, records, skipped)


def write_reason_table(path: str | Path, records: Sequence[ReasonRecord],
                       metadata: dict | None = None) -> None:
    """Columns: user, item, label, attempts, reason, timestamp.

    ``metadata`` goes on a leading ``#`` line as sorted-key JSON.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if metadata is not None:
            fh.write("# " + json.dumps(metadata, sort_keys=True) + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "item", "label", "attempts", "reason", "timestamp"])
        for r in records:
            w.writerow([r.user_id, r.item_id, r.label, r.attempts, r.reason, r.timestamp])


def read_reason_metadata(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return json.loads(first[2:]) if first.startswith("# ") else {}


def read_reason_table(path: str | Path) -> list[ReasonRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = csv.reader((ln for ln in fh if not ln.startswith("#")), delimiter="\t")
        next(rows)
        return [ReasonRecord(int(u), int(i), int(l), reason, int(a), (), int(t))
                for u, i, l, a, reason, t in rows]
