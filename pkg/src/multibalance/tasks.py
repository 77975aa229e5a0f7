"""Synthetic multi-task data, a convex quadratic testbed and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .linalg import as_vector, seeded_rng
from .model import PROB_CLIP, Batch, SharedBottomModel, forward

__all__ = [
    "MetricReport",
    "QuadraticMOOSpec",
    "SyntheticTaskSpec",
    "evaluate",
    "generate_batches",
    "make_teachers",
    "ne_diff",
    "normalized_entropy",
    "quadratic_grads",
    "quadratic_losses",
    "read_batches",
    "write_batches",
]


@dataclass
class SyntheticTaskSpec:
    """Tasks driven by linear teachers with a prescribed pairwise cosine.

    Inputs are standard normal. Task ``m`` sees ``z = label_scale[m] * t_m . x``
    plus Gaussian noise; regression labels are ``z`` itself, binary labels
    are Bernoulli(sigmoid(z)).
    """

    n_tasks: int
    input_dim: int
    conflict: float = 0.0
    noise_std: float = 0.0
    task_kinds: list[str] = field(default_factory=list)
    label_scales: list[float] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if not self.task_kinds:
            self.task_kinds = ["binary"] * self.n_tasks
        if not self.label_scales:
            self.label_scales = [1.0] * self.n_tasks
        if len(self.task_kinds) != self.n_tasks or len(self.label_scales) != self.n_tasks:
            raise ValueError("task_kinds and label_scales need one entry per task")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def make_teachers(spec: SyntheticTaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit teacher vectors (rows) whose pairwise cosines all equal ``conflict``.

    The target Gram matrix ``(1 - c) I + c 11^T`` is factored as ``F F^T``
    and ``F`` mixes random orthonormal directions: a shared component plus
    per-task orthogonal residuals.
    """
    M, d, c = spec.n_tasks, spec.input_dim, spec.conflict
    if not -1.0 <= c <= 1.0:
        raise ValueError("conflict must lie in [-1, 1]")
    if M > 1 and c < -1.0 / (M - 1) - 1e-12:
        raise ValueError(f"pairwise cosine {c} is infeasible for {M} tasks (minimum {-1.0 / (M - 1):.4f})")
    gram = np.full((M, M), c)
    np.fill_diagonal(gram, 1.0)
    evals, evecs = np.linalg.eigh(gram)
    keep = evals > 1e-12
    rank = int(keep.sum())
    if rank > d:
        raise ValueError(f"{M} teachers with cosine {c} need input_dim >= {rank}")
    factor = evecs[:, keep] * np.sqrt(evals[keep])
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    teachers = factor @ basis.T[:rank]
    return teachers / np.linalg.norm(teachers, axis=1, keepdims=True)


def generate_batches(spec: SyntheticTaskSpec, batch_size: int, count: int | None) -> Iterator[Batch]:
    """Deterministic stream of batches (endless when ``count`` is None)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = seeded_rng(spec.seed)
    teachers = make_teachers(spec, rng)
    scales = np.asarray(spec.label_scales, dtype=np.float64)
    produced = 0
    while count is None or produced < count:
        x = rng.standard_normal((batch_size, spec.input_dim))
        z = (x @ teachers.T) * scales
        if spec.noise_std > 0:
            z = z + spec.noise_std * rng.standard_normal(z.shape)
        labels = np.empty_like(z)
        for m, kind in enumerate(spec.task_kinds):
            if kind == "binary":
                labels[:, m] = (rng.random(batch_size) < 1.0 / (1.0 + np.exp(-z[:, m]))).astype(np.float64)
            else:
                labels[:, m] = z[:, m]
        yield Batch(x, labels)
        produced += 1


def write_batches(batches, path) -> None:
    """Columnar text dump: a header line, then one row per sample.

    Columns are ``batch x0 .. x{d-1} y0 .. y{M-1}``, whitespace separated,
    values written with ``repr`` so they round-trip exactly.
    """
    lines = []
    header = None
    for b_idx, batch in enumerate(batches):
        if header is None:
            d, M = batch.inputs.shape[1], batch.labels.shape[1]
            header = "batch " + " ".join(f"x{i}" for i in range(d)) + " " + " ".join(f"y{m}" for m in range(M))
            lines.append(header)
        for x, y in zip(batch.inputs, batch.labels):
            lines.append(" ".join([str(b_idx), *(repr(float(v)) for v in x), *(repr(float(v)) for v in y)]))
    Path(path).write_text("\n".join(lines) + "\n" if lines else "")


def read_batches(path) -> list[Batch]:
    text = Path(path).read_text().splitlines()
    if not text:
        return []
    cols = text[0].split()
    d = sum(c.startswith("x") for c in cols)
    rows = np.array([line.split() for line in text[1:] if line.strip()], dtype=np.float64)
    out = []
    for b in np.unique(rows[:, 0]):
        sel = rows[rows[:, 0] == b]
        out.append(Batch(sel[:, 1 : 1 + d], sel[:, 1 + d :]))
    return out


@dataclass
class QuadraticMOOSpec:
    """``f_i(theta) = 0.5 (theta - c_i)^T A_i (theta - c_i)``."""

    centers: np.ndarray  # (M, n)
    curvatures: np.ndarray  # (M, n, n)

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        A = np.asarray(self.curvatures, dtype=np.float64)
        if A.ndim == 2:
            A = np.broadcast_to(A, (self.centers.shape[0], *A.shape)).copy()
        self.curvatures = A
        M, n = self.centers.shape
        if A.shape != (M, n, n):
            raise ValueError(f"curvatures must have shape {(M, n, n)}, got {A.shape}")
        for i in range(M):
            if np.max(np.abs(A[i] - A[i].T)) > 1e-10:
                raise ValueError(f"curvature {i} is not symmetric")
            if np.linalg.eigvalsh(A[i]).min() <= 0:
                raise ValueError(f"curvature {i} is not positive definite")

    @property
    def n_tasks(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def identity(cls, centers) -> "QuadraticMOOSpec":
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        M, n = centers.shape
        return cls(centers, np.broadcast_to(np.eye(n), (M, n, n)).copy())


def quadratic_grads(spec: QuadraticMOOSpec, theta) -> np.ndarray:
    """Exact gradients ``A_i (theta - c_i)``, one task per column."""
    theta = as_vector(theta, "theta")
    if theta.size != spec.dim:
        raise ValueError(f"theta has dim {theta.size}, testbed has {spec.dim}")
    diff = theta[None, :] - spec.centers
    return np.einsum("mij,mj->im", spec.curvatures, diff)


def quadratic_losses(spec: QuadraticMOOSpec, theta) -> np.ndarray:
    theta = as_vector(theta, "theta")
    diff = theta[None, :] - spec.centers
    return 0.5 * np.einsum("mi,mij,mj->m", diff, spec.curvatures, diff)


def normalized_entropy(preds, labels) -> float:
    """Mean log loss divided by the entropy of the empirical positive rate."""
    p = np.clip(as_vector(preds, "preds"), PROB_CLIP, 1.0 - PROB_CLIP)
    y = as_vector(labels, "labels")
    if p.size != y.size or p.size == 0:
        raise ValueError("preds and labels must be non-empty and of equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    base = float(y.mean())
    if base <= 0.0 or base >= 1.0:
        raise ValueError("all labels identical: base-rate entropy is zero")
    num = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    den = -(base * np.log(base) + (1.0 - base) * np.log1p(-base))
    return float(num / den)


@dataclass
class MetricReport:
    ne: np.ndarray  # per task; nan for regression tasks
    loss: np.ndarray

    def to_dict(self) -> dict:
        # NE is undefined for regression tasks; written as null
        return {"ne": [None if np.isnan(v) else float(v) for v in self.ne], "loss": [float(v) for v in self.loss]}


def evaluate(model: SharedBottomModel, batch: Batch) -> MetricReport:
    trace = forward(model, batch)
    out = trace.outputs
    ne = np.full(model.n_tasks, np.nan)
    for m, kind in enumerate(model.task_kinds):
        if kind == "binary":
            ne[m] = normalized_entropy(out[:, m], batch.labels[:, m])
    return MetricReport(ne, trace.losses.copy())


def ne_diff(baseline: MetricReport, treated: MetricReport) -> np.ndarray:
    """``NE(baseline) - NE(treated)``: positive entries are gains."""
    a, b = np.asarray(baseline.ne, dtype=np.float64), np.asarray(treated.ne, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("reports cover different task sets")
    return a - b
