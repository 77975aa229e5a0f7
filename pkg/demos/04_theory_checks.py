"""Run the numerical theory checks and show how a broken residual is caught.

The first run should pass. The second negates the residual term on purpose;
the residual identity checks and the per-step certification must then fail.
"""

import tempfile
from pathlib import Path

from multibalance.config import load_config
from multibalance.suite import run_theory_suite

cfg = load_config("configs/theory.yaml")
out = Path(tempfile.mkdtemp())
for inject in (False, True):
    s = run_theory_suite(cfg, out=out / f"report_{inject}.jsonl", inject_bug=inject)
    bad = {k: v for k, v in s["counts"].items() if v["passed"] < v["total"]}
    print(f"inject_bug={inject}: passed={s['passed']}  failing checks: {bad or 'none'}")
