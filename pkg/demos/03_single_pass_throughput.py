"""Why balance in representation space?

Balancing on shared-parameter gradients needs one backward pass per task.
Balancing on the representation uses one pass: per-task gradients are tapped
where the heads meet the bottom, then a single weighted gradient flows down.
"""

from multibalance.config import load_config
from multibalance.harness import measure_throughput

cfg = load_config("configs/throughput.yaml")
runs = {
    "vanilla (sum of losses)": cfg.replace(**{"balancer.name": "vanilla"}),
    "multibalance, representation": cfg,
    "mgda, parameter space": cfg.replace(**{"gradient_source": "parameter", "balancer.name": "mgda"}),
}
for label, c in runs.items():
    r = measure_throughput(c, warmup_steps=20, timed_steps=200)
    print(f"{label:32s} {r.steps_per_sec:8.1f} steps/s  {r.backward_count} backward pass(es)/step")
