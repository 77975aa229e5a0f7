"""One regression task has labels 30x larger than its siblings.

Its gradient norm starts about ten times larger, so a plain sum would let it
steer the shared bottom. MultiBalance rescales every task gradient to its
running norm and learns simplex weights; the loud task ends up with the
smallest weight.
"""

import numpy as np

from multibalance.config import load_config
from multibalance.harness import run_balanced

cfg = load_config("configs/dominance.yaml")
recs = list(run_balanced(cfg))

print("initial raw norms:", np.round(recs[0].raw_norms, 3))
tail = np.array([r.weights for r in recs[-len(recs) // 10:]]).mean(axis=0)
print("mean weights over the last 10% of steps:", np.round(tail, 3))
print("smallest weight goes to task", int(np.argmin(tail)))
