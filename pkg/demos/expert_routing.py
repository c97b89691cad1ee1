"""Walk through how a user is routed to experts.

Three planted user groups are clustered from collaborative vectors, each
group gets a representation, and three users of different "purity" are
sent through participation weights, the gate and fusion.

    python3 demos/expert_routing.py
"""

from __future__ import annotations

import numpy as np

from mixrec.experts import cluster_users, entropy, expert_representation, gate, participation

rng = np.random.default_rng(0)
centers = np.eye(3) * 4.0
users = np.vstack([c + rng.normal(0, 0.5, (50, 3)) for c in centers])

groups = cluster_users(users, 3, seed=0)
reps = expert_representation(groups, users)
print("group sizes:", [len(groups.members(g)) for g in range(3)])

probes = {
    "near one centroid": reps[1] + rng.normal(0, 0.05, 3),
    "between two groups": (reps[0] + reps[2]) / 2,
    "equidistant from all": reps.mean(0),
}
for tau in (0.1, 0.5):
    print(f"\ntemperature {tau}")
    for name, e in probes.items():
        w = participation(e, reps, tau)
        d = gate(w)
        target = {"single": f"expert {d.index}", "fused": "weighted experts", "global": "global adapter"}
        print(f"  {name:22s} w={np.round(w, 3)}  H={entropy(w):.3f}  -> {target[d.branch]}")

# a lower temperature sharpens the weights, so more users land on one expert
# and fewer are fused
