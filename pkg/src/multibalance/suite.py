"""Theory-check runner: writes one JSON line per check and a closing summary.

Every record carries the ``params`` needed to recompute it, so a single
failing instance can be replayed with :func:`replay_check`.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, from_dict
from .harness import Trainer, build_model, task_spec
from .linalg import seeded_rng
from .model import Batch
from .simplex import min_norm_weights
from .tasks import QuadraticMOOSpec, SyntheticTaskSpec, generate_batches, quadratic_grads
from .theory import check_lemma1, check_theorem1, decrease_rate, estimate_residual, stationarity_gap

__all__ = ["REPORT_SCHEMA", "replay_check", "run_theory_suite"]

REPORT_SCHEMA = "multibalance.theory-report/1"
IDENTITY_GAP_TOL = 1e-10
EQUALITY_RTOL = 1e-8
GAP_TOL = 1e-8


def _draw(spec: SyntheticTaskSpec, n: int) -> Batch:
    return next(generate_batches(spec, n, 1))


def _cfg_from(params: dict) -> ExperimentConfig:
    return from_dict(params["config"])


# ------------------------------------------------------------------- checks


def _lemma(params: dict, inject_bug: bool = False) -> dict:
    A, B = np.array(params["A"]), np.array(params["B"])
    rep = check_lemma1(A, B)
    passed = rep.passed
    if params.get("expect_equal"):
        t = np.array(rep.terms)
        passed = passed and bool(np.all(np.abs(t - t[0]) <= EQUALITY_RTOL * max(1.0, abs(t[0]))))
    return {"passed": bool(passed), "data": rep.to_dict()}


def _residual(params: dict, inject_bug: bool = False) -> dict:
    cfg = _cfg_from(params)
    model = build_model(cfg)
    n = params["batch_size"]
    batch = _draw(task_spec(cfg, seed=params["seed"]), n)
    if params.get("pool_is_batch"):
        pool = batch
    else:
        pool = _draw(task_spec(cfg, seed=params["seed"] + 1_000_000), n * params["pool_factor"])
    lam = np.full(model.n_tasks, 1.0 / model.n_tasks)
    rep = estimate_residual(model, pool, batch, lam, negate_residual=inject_bug)
    ok = check_theorem1(rep) and rep.residual_gap <= IDENTITY_GAP_TOL * max(1.0, rep.param_grad_norm)
    # with pool == batch the residual norm is recorded but not bounded: the
    # per-sample spread of Jacobians around their batch mean does not vanish
    return {"passed": bool(ok), "data": rep.to_dict()}


def _certify(params: dict, inject_bug: bool = False) -> dict:
    """Train with the configured balancer and certify the produced weights at every step."""
    cfg = _cfg_from(params)
    trainer = Trainer(cfg)
    pool = _draw(task_spec(cfg, seed=cfg.seed + 3_000_017), cfg.batch_size * params["pool_factor"])
    worst_slack, worst_gap, failure = np.inf, 0.0, None
    for k, batch in enumerate(generate_batches(task_spec(cfg), cfg.batch_size, params["steps"])):
        snap = trainer.model.copy()
        rec = trainer.step(batch)
        rep = estimate_residual(snap, pool, batch, rec.weights, negate_residual=inject_bug)
        slack = rep.bound - rep.param_grad_norm
        worst_slack = min(worst_slack, slack)
        worst_gap = max(worst_gap, rep.residual_gap)
        bad = not check_theorem1(rep) or rep.residual_gap > IDENTITY_GAP_TOL * max(1.0, rep.param_grad_norm)
        if bad and failure is None:
            failure = {"step": k, "weights": rec.weights, "report": rep.to_dict()}
    data = {"steps": params["steps"], "min_slack": float(worst_slack), "max_residual_gap": float(worst_gap)}
    if failure is not None:
        data["first_failure"] = failure
    return {"passed": failure is None, "data": data}


def _segment(params: dict, inject_bug: bool = False) -> dict:
    spec = QuadraticMOOSpec.identity(params["centers"])
    theta = np.array(params["theta"])
    gap = stationarity_gap(quadratic_grads(spec, theta))
    return {"passed": bool(gap <= GAP_TOL), "data": {"gap": gap}}


def _collinear(params: dict, inject_bug: bool = False) -> dict:
    G = np.array(params["G"])
    gap = stationarity_gap(G)
    expect = float(np.min(np.linalg.norm(G, axis=0)))
    return {"passed": bool(abs(gap - expect) <= 1e-8 * max(1.0, expect)), "data": {"gap": gap, "expected": expect}}


def _permutation(params: dict, inject_bug: bool = False) -> dict:
    G = np.array(params["G"])
    perm = params["perm"]
    a, b = stationarity_gap(G), stationarity_gap(G[:, perm])
    return {"passed": bool(abs(a - b) <= 1e-10 * max(1.0, a)), "data": {"gap": a, "gap_permuted": b}}


def _decrease(params: dict, inject_bug: bool = False) -> dict:
    G = np.array(params["G"])
    res = min_norm_weights(G, tol=1e-12, max_iter=10_000)
    rate = decrease_rate(G, res.direction)
    return {"passed": bool(rate >= -1e-10), "data": {"rate": rate, "norm": res.norm}}


_CHECKS = {
    "lemma1": _lemma,
    "residual": _residual,
    "theorem1_run": _certify,
    "pareto_segment": _segment,
    "collinear_gap": _collinear,
    "gap_permutation": _permutation,
    "min_norm_decrease": _decrease,
}


def replay_check(record: dict, inject_bug: bool = False) -> dict:
    """Recompute one serialized check; the result equals the original record."""
    name = record["check"]
    if name not in _CHECKS:
        raise ValueError(f"check {name!r} cannot be replayed")
    out = {"check": name, "params": record["params"]}
    out.update(_CHECKS[name](record["params"], inject_bug))
    return out


# --------------------------------------------------------------- instances


def _instances(cfg: ExperimentConfig):
    th = cfg.theory
    rng = seeded_rng(cfg.seed + 0x7E0)
    qa, na = th.lemma_shape_a
    pb, qb = th.lemma_shape_b
    if qb != qa:
        raise ValueError("lemma shapes must chain: B columns == A rows")
    for _ in range(th.lemma_instances):
        yield "lemma1", {"A": rng.standard_normal((qa, na)).tolist(), "B": rng.standard_normal((pb, qb)).tolist()}
    for c in (0.5, 1.0, 3.0):
        yield "lemma1", {"A": rng.standard_normal((qa, na)).tolist(), "B": (c * np.eye(qa)).tolist(), "expect_equal": True}

    base = cfg.to_dict()
    base["task"]["kind"] = "synthetic"
    for n in th.residual_batch_sizes:
        for s in range(th.residual_seeds):
            yield "residual", {"config": base, "batch_size": n, "seed": 10_000 + s, "pool_factor": th.pool_factor}
    yield "residual", {"config": base, "batch_size": th.residual_batch_sizes[0], "seed": 10_000, "pool_factor": 1, "pool_is_batch": True}

    centers = [[1.0, 0.0], [0.0, 1.0]]
    for t in np.linspace(0.0, 1.0, th.stationarity_points):
        theta = (1 - t) * np.array(centers[0]) + t * np.array(centers[1])
        yield "pareto_segment", {"centers": centers, "theta": theta.tolist()}
    for _ in range(th.stationarity_points):
        direction = rng.standard_normal(5)
        scales = rng.uniform(0.1, 3.0, size=3)
        yield "collinear_gap", {"G": np.outer(direction, scales).tolist()}
        G = rng.standard_normal((6, 4))
        yield "gap_permutation", {"G": G.tolist(), "perm": rng.permutation(4).tolist()}
        yield "min_norm_decrease", {"G": rng.standard_normal((5, 3)).tolist()}

    yield "theorem1_run", {"config": base, "steps": th.certify_steps, "pool_factor": th.pool_factor}


def _median_trend(records: list[dict], sizes: list[int]) -> dict:
    med = []
    for n in sizes:
        vals = [r["data"]["residual_norm"] for r in records if r["check"] == "residual" and r["params"]["batch_size"] == n and not r["params"].get("pool_is_batch")]
        med.append(float(np.median(vals)))
    ok = all(med[i + 1] <= med[i] for i in range(len(med) - 1))
    return {"check": "residual_trend", "params": {"batch_sizes": sizes}, "passed": ok, "data": {"medians": med}}


def run_theory_suite(cfg: ExperimentConfig, out=None, inject_bug: bool = False) -> dict:
    """Run every check, write the report and return the summary record.

    ``inject_bug`` negates the per-sample residual sum so the identity check
    must fail; it exists to show the checker can detect a broken residual.
    """
    path = Path(out or cfg.theory.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    with path.open("w") as fh:
        fh.write(json.dumps({"schema": REPORT_SCHEMA, "inject_bug": inject_bug}) + "\n")

        def put(rec):
            records.append(rec)
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

        for name, params in _instances(cfg):
            rec = {"check": name, "params": params}
            rec.update(_CHECKS[name](params, inject_bug))
            put(rec)
        put(_median_trend(records, list(cfg.theory.residual_batch_sizes)))
        failed = [i for i, r in enumerate(records) if not r["passed"]]
        counts: dict[str, list[int]] = {}
        for r in records:
            c = counts.setdefault(r["check"], [0, 0])
            c[0] += int(bool(r["passed"]))
            c[1] += 1
        summary = {
            "check": "summary",
            "passed": not failed,
            "failed_records": failed,
            "counts": {k: {"passed": v[0], "total": v[1]} for k, v in counts.items()},
            "pool_note": f"expectations approximated by a reference pool {cfg.theory.pool_factor}x the batch",
        }
        fh.write(json.dumps(summary) + "\n")
    return summary
