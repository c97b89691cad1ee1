"""Run every stage on a very small synthetic dataset and compare serving modes.

The same artifacts are evaluated with the global adapter only, with one
expert per user, and with the gate deciding ("auto"). Takes a few seconds;
use ``mixrec run --preset synthetic`` for the full-size study.

    python3 demos/tiny_pipeline.py [output_dir]
"""

from __future__ import annotations

import sys

from mixrec import pipeline
from mixrec.config import synthetic_preset

out = sys.argv[1] if len(sys.argv) > 1 else "demo-run"
cfg = synthetic_preset(out)
for key, value in {"data.synthetic_users": "80", "data.synthetic_items": "60", "synth.sample_n": "80",
                   "lm.d_model": "32", "mix.steps": "60", "experts.steps": "20", "projector.steps": "20",
                   "eval.reason_samples": "2", "eval.max_new": "24"}.items():
    cfg.set(key, value)

pipeline.ensure_stages(cfg, "auto")
for mode in ("global", "single", "auto"):
    rep = pipeline.cmd_evaluate(cfg, mode)
    print(f"{mode:7s} auc={rep.auc:.4f} uauc={rep.uauc:.4f} ndcg@5={rep.ndcg_at_k:.4f} map@5={rep.map_at_k:.4f}")

print("\none explained prediction:")
print(pipeline.cmd_infer(cfg, user_id=0, item_id=1, explain=True))
print(f"\nartifacts and per-user decisions are in {out}/")
