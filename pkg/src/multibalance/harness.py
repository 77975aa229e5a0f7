"""Training loops, run records and throughput measurement.

Three training modes share one :class:`Trainer`:

* vanilla - one backward pass on the summed loss;
* representation - one backward pass, balancing at the representation;
* parameter - one backward pass per task, balancing full shared-parameter
  gradients (MGDA / MoCo baselines).

Record files are JSON lines: a header object naming the schema and fields,
then one object per step. See the README for field units.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .balancers import BALANCERS, BalanceOutcome, BalancerState, uncertainty_reweigh
from .config import ExperimentConfig
from .linalg import seeded_rng
from .model import (
    Batch,
    SharedBottomModel,
    backward_apply_aggregate,
    backward_per_task,
    backward_representation_tap,
    forward,
)
from .tasks import (
    MetricReport,
    QuadraticMOOSpec,
    SyntheticTaskSpec,
    evaluate,
    generate_batches,
    ne_diff,
    quadratic_grads,
    quadratic_losses,
)
from .theory import stationarity_gap

__all__ = [
    "DivergenceError",
    "RECORD_SCHEMA",
    "RunRecord",
    "ThroughputResult",
    "Trainer",
    "emit_records",
    "measure_throughput",
    "parse_records",
    "run_balanced",
    "run_sweep",
    "run_vanilla",
    "train",
]

RECORD_SCHEMA = "multibalance.run-record/1"
DIVERGENCE_LIMIT = 1e10


class DivergenceError(RuntimeError):
    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class RunRecord:
    step: int
    losses: list[float | None]  # None only in a diverged record
    weights: list[float | None]
    raw_norms: list[float | None]
    balanced_norms: list[float | None]
    gap: float | None  # stationarity gap (quadratic testbed only)
    backward_passes: int
    weights_on_simplex: bool = True
    status: str = "ok"  # ok | diverged
    wall_seconds: float | None = None

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_seconds")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


RECORD_FIELDS = [f for f in RunRecord.__dataclass_fields__]


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: ExperimentConfig):
    o = cfg.optimizer
    if o.name == "adam":
        return Adam(o.lr, tuple(o.adam_betas), o.adam_eps)
    return SGD(o.lr)


# ------------------------------------------------------------------ training


def task_spec(cfg: ExperimentConfig, seed: int | None = None) -> SyntheticTaskSpec:
    t = cfg.task
    return SyntheticTaskSpec(
        n_tasks=t.n_tasks,
        input_dim=t.input_dim,
        conflict=t.conflict,
        noise_std=t.noise_std,
        task_kinds=list(t.task_kinds),
        label_scales=list(t.label_scales),
        seed=cfg.seed if seed is None else seed,
    )


def build_model(cfg: ExperimentConfig) -> SharedBottomModel:
    spec = task_spec(cfg)
    return SharedBottomModel.create(
        cfg.task.input_dim,
        list(cfg.model.bottom_hidden),
        cfg.model.repr_dim,
        list(cfg.model.head_hidden),
        spec.task_kinds,
        seeded_rng(cfg.seed + 1_000_003),
    )


def quadratic_spec(cfg: ExperimentConfig) -> QuadraticMOOSpec:
    t = cfg.task
    if t.curvatures is None:
        return QuadraticMOOSpec.identity(t.centers)
    return QuadraticMOOSpec(np.asarray(t.centers), np.asarray(t.curvatures))


def make_state(cfg: ExperimentConfig, n_tasks: int) -> BalancerState:
    b = cfg.balancer
    return BalancerState(
        n_tasks=n_tasks,
        lambda0=None if b.lambda0 is None else np.asarray(b.lambda0, dtype=np.float64),
        rho=b.rho,
        beta=b.beta,
        gamma=b.gamma,
        cosine_mode=b.cosine_mode,
        vaccine_rate=b.vaccine_rate,
    )


def lift_to_samples(outcome: BalanceOutcome, per_sample: np.ndarray):
    """Per-sample representation gradient whose batch sum is ``outcome.aggregate``.

    Uses the exact linear combination of per-sample task gradients when the
    balancer provides one; otherwise the batch-level vector is returned as is
    and spread evenly over the samples downstream.
    """
    if outcome.coef is not None:
        return np.einsum("m,mbk->bk", outcome.coef, per_sample)
    if outcome.masks is not None:
        return np.einsum("mbk,km->bk", per_sample, outcome.masks.astype(np.float64))
    return outcome.aggregate


def _balanced_norms(outcome: BalanceOutcome, raw: np.ndarray) -> np.ndarray:
    if outcome.coef is not None:
        return np.abs(outcome.coef) * raw
    per = np.linalg.norm(outcome.per_task, axis=0)
    if outcome.masks is not None:
        return per
    return np.abs(outcome.weights) * per


def _floats(a) -> list[float]:
    return [float(v) for v in np.asarray(a).ravel()]


class Trainer:
    """Owns model (or quadratic iterate), balancer state and optimizer for one run."""

    def __init__(self, cfg: ExperimentConfig, balancer: str | None = None):
        self.cfg = cfg
        self.name = balancer or cfg.balancer.name
        self.source = "representation" if self.name == "vanilla" and balancer else cfg.gradient_source
        self.quadratic = cfg.task.kind == "quadratic"
        if self.quadratic:
            self.qspec = quadratic_spec(cfg)
            self.theta = np.asarray(cfg.task.theta0, dtype=np.float64).copy()
            self.n_tasks = self.qspec.n_tasks
        else:
            self.model = build_model(cfg)
            self.n_tasks = self.model.n_tasks
        self.state = make_state(cfg, self.n_tasks)
        self.rng = seeded_rng(cfg.seed + 2_000_003)
        self.opt = make_optimizer(cfg)
        self.k = 0

    # parameters in a fixed order for the optimizer
    def _params(self) -> list[np.ndarray]:
        if self.quadratic:
            return [self.theta]
        out = []
        for layer in self.model.bottom:
            out += [layer.weight, layer.bias]
        for head in self.model.heads:
            for layer in head:
                out += [layer.weight, layer.bias]
        return out

    def _balance(self, G: np.ndarray) -> BalanceOutcome:
        return BALANCERS[self.name](G, self.state, self.rng)

    def _diverged(self, losses: np.ndarray) -> bool:
        return not np.all(np.isfinite(losses)) or float(np.max(np.abs(losses))) > DIVERGENCE_LIMIT

    def step(self, batch: Batch | None = None) -> RunRecord:
        t0 = time.perf_counter()
        rec = self._step_quadratic() if self.quadratic else self._step_model(batch)
        rec.wall_seconds = time.perf_counter() - t0
        self.k += 1
        return rec

    def _fail(self, losses) -> None:
        M = self.n_tasks
        # non-finite values become null so the file stays strict JSON
        finite = [v if math.isfinite(v) else None for v in _floats(losses)]
        rec = RunRecord(self.k, finite, [None] * M, [None] * M, [None] * M, None, 0, True, "diverged")
        raise DivergenceError(f"loss explosion at step {self.k}: {_floats(losses)}", rec)

    def _step_quadratic(self) -> RunRecord:
        theta = self.theta
        losses = quadratic_losses(self.qspec, theta)
        if self._diverged(losses):
            self._fail(losses)
        G = quadratic_grads(self.qspec, theta)
        raw = np.linalg.norm(G, axis=0)
        gap = stationarity_gap(G)
        if self.name == "uncertainty":
            _, w, _ = uncertainty_reweigh(losses, self.state, self.cfg.optimizer.lr)
            outcome = BalanceOutcome(G @ w, w, G * w, coef=w, on_simplex=False)
        else:
            outcome = self._balance(G)
        self.opt.step([self.theta], [outcome.aggregate])
        passes = 1 if self.source == "representation" else self.n_tasks
        return RunRecord(
            self.k,
            _floats(losses),
            _floats(outcome.weights),
            _floats(raw),
            _floats(_balanced_norms(outcome, raw)),
            float(gap),
            passes,
            bool(outcome.on_simplex),
        )

    def _step_model(self, batch: Batch) -> RunRecord:
        model = self.model
        try:
            trace = forward(model, batch)
        except FloatingPointError:
            self._fail(np.full(self.n_tasks, np.nan))
        losses = trace.losses
        if self._diverged(losses):
            self._fail(losses)
        if self.source == "representation":
            tap = backward_representation_tap(model, trace, batch)
            raw = np.linalg.norm(tap.V, axis=0)
            if self.name == "uncertainty":
                _, w, _ = uncertainty_reweigh(losses, self.state, self.cfg.optimizer.lr)
                outcome = BalanceOutcome(tap.V @ w, w, tap.V * w, coef=w, on_simplex=False)
                # a loss balancer: the weighted loss also drives the heads
                tap.head_grads = [[(w[m] * dW, w[m] * db) for dW, db in hg] for m, hg in enumerate(tap.head_grads)]
            else:
                outcome = self._balance(tap.V)
            h = lift_to_samples(outcome, tap.per_sample)
            agg = backward_apply_aggregate(model, trace, batch, h, tap)
            bottom, heads = agg.bottom, agg.heads
            passes = 1
        else:
            per = backward_per_task(model, trace, batch)
            G = np.stack([p.flat_bottom for p in per], axis=1)
            raw = np.linalg.norm(G, axis=0)
            outcome = self._balance(G)
            bottom = _unflatten(model, outcome.aggregate)
            heads = [p.head for p in per]
            passes = self.n_tasks
        grads = [g for pair in bottom for g in pair]
        for head in heads:
            grads += [g for pair in head for g in pair]
        self.opt.step(self._params(), grads)
        model.touch()
        return RunRecord(
            self.k,
            _floats(losses),
            _floats(outcome.weights),
            _floats(raw),
            _floats(_balanced_norms(outcome, raw)),
            None,
            passes,
            bool(outcome.on_simplex),
        )


def _unflatten(model: SharedBottomModel, flat: np.ndarray):
    out, pos = [], 0
    for layer in model.bottom:
        w = flat[pos : pos + layer.weight.size].reshape(layer.weight.shape)
        pos += layer.weight.size
        b = flat[pos : pos + layer.bias.size]
        pos += layer.bias.size
        out.append((w, b))
    return out


def _batches(cfg: ExperimentConfig, count: int | None) -> Iterator[Batch] | Iterator[None]:
    if cfg.task.kind == "quadratic":
        return iter([None] * count) if count is not None else iter(lambda: None, 0)
    return generate_batches(task_spec(cfg), cfg.batch_size, count)


def _run(trainer: Trainer, cfg: ExperimentConfig) -> Iterator[RunRecord]:
    for batch in _batches(cfg, cfg.steps):
        try:
            yield trainer.step(batch)
        except DivergenceError as exc:
            yield exc.record
            raise


def run_vanilla(cfg: ExperimentConfig, trainer: Trainer | None = None) -> Iterator[RunRecord]:
    """Summed-loss training with one backward pass per step."""
    trainer = trainer or Trainer(cfg, balancer="vanilla")
    return _run(trainer, cfg)


def run_balanced(cfg: ExperimentConfig, trainer: Trainer | None = None) -> Iterator[RunRecord]:
    """Training with the configured balancer and gradient source."""
    trainer = trainer or Trainer(cfg)
    return _run(trainer, cfg)


# ------------------------------------------------------------------- records


def emit_records(stream: Iterable[RunRecord], path, timing: bool = False) -> Path:
    """Write a header line then one JSON object per record.

    The header is ``{"schema": ..., "fields": [...], "timing": bool}``.
    Without ``timing`` the wall-clock field is omitted so that identical runs
    give byte-identical files. Records are flushed as they arrive, so a run
    that raises still leaves everything up to and including the failing step.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = RECORD_FIELDS if timing else [f for f in RECORD_FIELDS if f != "wall_seconds"]
    with path.open("w") as fh:
        fh.write(json.dumps({"schema": RECORD_SCHEMA, "fields": fields, "timing": timing}) + "\n")
        for rec in stream:
            fh.write(json.dumps(rec.to_dict(timing), allow_nan=False) + "\n")
            fh.flush()
    return path


def parse_records(path) -> list[RunRecord]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != RECORD_SCHEMA:
        raise ValueError(f"unsupported record schema {header.get('schema')!r}")
    return [RunRecord.from_dict(json.loads(line)) for line in lines[1:] if line.strip()]


# ---------------------------------------------------------------- throughput


@dataclass
class ThroughputResult:
    steps_per_sec: float
    samples_per_sec: float
    backward_count: int
    seconds: float


def measure_throughput(
    cfg: ExperimentConfig,
    warmup_steps: int = 20,
    timed_steps: int = 200,
    balancer: str | None = None,
) -> ThroughputResult:
    """Wall-clock training rate on pre-generated batches.

    Batches depend only on the task spec and seed, so configurations that
    share those are timed on identical data.
    """
    if timed_steps < 100:
        raise ValueError("timed_steps must be at least 100")
    trainer = Trainer(cfg, balancer=balancer)
    batches = list(_batches(cfg, warmup_steps + timed_steps))
    for b in batches[:warmup_steps]:
        trainer.step(b)
    passes = set()
    t0 = time.perf_counter()
    for b in batches[warmup_steps:]:
        passes.add(trainer.step(b).backward_passes)
    elapsed = time.perf_counter() - t0
    if len(passes) != 1:
        raise AssertionError(f"backward-pass count changed during the run: {passes}")
    bs = cfg.batch_size if cfg.task.kind == "synthetic" else 1
    return ThroughputResult(timed_steps / elapsed, timed_steps * bs / elapsed, passes.pop(), elapsed)


# ---------------------------------------------------------- full runs/sweeps


def eval_batch(cfg: ExperimentConfig) -> Batch:
    spec = task_spec(cfg, seed=cfg.seed + 7_000_001)
    return next(generate_batches(spec, cfg.eval_size, 1))


def train(cfg: ExperimentConfig, vanilla: bool = False, records_path=None, manifest_path=None) -> dict:
    """Run one configuration end to end: records file plus manifest.

    Returns the manifest. Raises :class:`DivergenceError` after writing the
    records (including the diverged step) and a manifest marked ``diverged``.
    """
    trainer = Trainer(cfg, balancer="vanilla" if vanilla else None)
    records_path = Path(records_path or cfg.output.records)
    manifest_path = Path(manifest_path or cfg.output.manifest)
    stream = run_vanilla(cfg, trainer) if vanilla else run_balanced(cfg, trainer)
    status, error = "ok", None
    t0 = time.perf_counter()
    try:
        emit_records(stream, records_path, timing=cfg.output.timing)
    except DivergenceError as exc:
        status, error = "diverged", exc
    elapsed = time.perf_counter() - t0
    manifest = {
        "schema": "multibalance.manifest/1",
        "status": status,
        "balancer": "vanilla" if vanilla else cfg.balancer.name,
        "gradient_source": trainer.source,
        "records": str(records_path),
        "steps": trainer.k,
        "wall_seconds": elapsed,
        "config": cfg.to_dict(),
    }
    if status == "ok" and not trainer.quadratic:
        manifest["eval"] = evaluate(trainer.model, eval_batch(cfg)).to_dict()
    if trainer.quadratic:
        manifest["final_theta"] = _floats(trainer.theta)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    if error is not None:
        raise error
    return manifest


def _ne_report(manifest: dict) -> MetricReport:
    ne = np.array([np.nan if v is None else v for v in manifest["eval"]["ne"]], dtype=np.float64)
    return MetricReport(ne, np.asarray(manifest["eval"]["loss"]))


def run_sweep(cfg: ExperimentConfig, betas=None, out_dir=None, workers: int = 1) -> dict:
    """Vanilla baseline plus one balanced run per weight learning rate.

    Each run writes its own records file; the sweep manifest reports NE
    difference ``NE(vanilla) - NE(run)`` per task (positive is a gain).
    """
    betas = list(betas if betas is not None else cfg.sweep_betas)
    out_dir = Path(out_dir or Path(cfg.output.records).parent / "sweep")
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(beta):
        tag = "vanilla" if beta is None else f"{cfg.balancer.name}_beta{beta:g}"
        run_cfg = cfg if beta is None else cfg.replace(**{"balancer.beta": float(beta)})
        man = out_dir / f"{tag}.json"
        try:
            train(run_cfg, vanilla=beta is None, records_path=out_dir / f"{tag}.jsonl", manifest_path=man)
        except DivergenceError:
            pass  # the manifest already says so
        return tag, json.loads(man.read_text())

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = dict(pool.map(job, [None, *betas]))
    base = results["vanilla"]
    summary = {"schema": "multibalance.sweep/1", "baseline": "vanilla", "diverged": [], "runs": {}}
    for tag, man in results.items():
        entry = {"status": man["status"], "manifest": str(out_dir / f"{tag}.json")}
        if man["status"] != "ok":
            summary["diverged"].append(tag)
        if "eval" in man and "eval" in base:
            diff = ne_diff(_ne_report(base), _ne_report(man))
            entry["ne"] = man["eval"]["ne"]
            entry["ne_diff"] = [None if np.isnan(v) else float(v) for v in diff]
        summary["runs"][tag] = entry
    (out_dir / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
