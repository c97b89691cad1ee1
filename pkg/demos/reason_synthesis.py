"""Synthesize reasoning traces for a handful of training windows.

Uses the bundled synthetic generator, the keyword-overlap oracle, and the
query/reflect loop. Windows the oracle never gets right are skipped.

    python3 demos/reason_synthesis.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from mixrec import pipeline
from mixrec.config import synthetic_preset
from mixrec.reasoning import build_reason_corpus

with tempfile.TemporaryDirectory() as tmp:
    cfg = synthetic_preset(str(Path(tmp) / "run"))
    cfg.data.synthetic_users = 60
    cfg.data.synthetic_items = 60
    pipeline.run_stage(cfg, "prepare")
    windows = pipeline.split_windows(cfg, pipeline.load_splits(cfg), "train")

corpus = build_reason_corpus(windows, 50, seed=1)
print(f"{len(corpus.records)} traces, {corpus.skipped} skipped\n")
for rec, inst in list(zip(corpus.records, corpus.instances))[:3]:
    print(f"user {rec.user_id} item {rec.item_id} attempts={rec.attempts}")
    print("  Q:", inst.question_text[:160], "...")
    print("  A:", inst.answer_text, "\n")
