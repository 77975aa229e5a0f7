"""Numerical checks of the representation-gradient surrogate.

Notation: ``J_i`` is the Jacobian of the representation of sample ``i``
w.r.t. the flattened shared parameters, ``Jbar`` a reference mean of those
Jacobians, and ``V`` the batch-level representation gradients. For task
weights ``lam`` the shared-parameter gradient decomposes as

    grad_W(F) lam = Jbar^T V lam + R,

and the bound checked here is ``||grad_W(F) lam|| <= ||Jbar||_2 ||V lam|| + ||R||``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .linalg import as_matrix, as_vector, spectral_norm, sym_eig_bounds
from .model import Batch, SharedBottomModel, backward_per_task, backward_representation_tap, forward, jacobian_repr
from .simplex import min_norm_weights

__all__ = [
    "Lemma1Report",
    "ResidualReport",
    "THEOREM_SLACK",
    "check_lemma1",
    "check_theorem1",
    "decrease_rate",
    "estimate_residual",
    "stationarity_gap",
]

LEMMA_SLACK = 1e-8
THEOREM_SLACK = 1e-8


@dataclass
class Lemma1Report:
    """The five terms of the sandwich, left to right, and whether it holds."""

    mu: float
    ell: float
    terms: tuple[float, float, float, float, float]
    weights_a: np.ndarray
    weights_ba: np.ndarray
    passed: bool

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "ell": self.ell,
            "terms": list(self.terms),
            "weights_a": self.weights_a.tolist(),
            "weights_ba": self.weights_ba.tolist(),
            "passed": self.passed,
        }


def check_lemma1(A, B, tol: float = 1e-10, slack: float = LEMMA_SLACK) -> Lemma1Report:
    """Evaluate ``mu^2|A a*| <= mu^2|A b*| <= |BA b*| <= |BA a*| <= ell^2|A a*|`` (squared norms).

    ``a*`` and ``b*`` minimise ``|A w|`` and ``|B A w|`` over the simplex;
    ``mu``/``ell`` are the extreme singular values of ``B``.
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if B.shape[1] != A.shape[0]:
        raise ValueError(f"B {B.shape} cannot multiply A {A.shape}")
    BA = B @ A
    wa = min_norm_weights(A, tol=tol, max_iter=10_000).weights
    wba = min_norm_weights(BA, tol=tol, max_iter=10_000).weights
    mu, ell = sym_eig_bounds(B.T @ B)

    def sq(x):
        return float(x @ x)

    terms = (
        mu**2 * sq(A @ wa),
        mu**2 * sq(A @ wba),
        sq(BA @ wba),
        sq(BA @ wa),
        ell**2 * sq(A @ wa),
    )
    passed = all(terms[k] <= terms[k + 1] + slack for k in range(4))
    return Lemma1Report(mu, ell, terms, wa, wba, passed)


@dataclass
class ResidualReport:
    batch_size: int
    pool_size: int
    residual_norm: float  # ||R||, from the per-sample sum
    residual_gap: float  # ||R_sum - (grad_W F lam - Jbar^T V lam)||; should be ~0
    param_grad_norm: float  # ||grad_W F lam|| on the batch
    surrogate_norm: float  # eps = ||V lam||
    ell: float  # ||Jbar||_2
    bound: float  # ell * eps + residual_norm

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_residual(
    model: SharedBottomModel,
    reference_pool: Batch,
    batch: Batch,
    lam,
    negate_residual: bool = False,
) -> ResidualReport:
    """Measure the decomposition residual on ``batch``.

    ``Jbar`` is the mean Jacobian over ``reference_pool``, a stand-in for the
    expectation over the data distribution. The residual is computed twice:
    as the per-sample sum ``(1/|B|) sum_i (J_i - Jbar)^T a_i`` with
    ``a_i = sum_m lam_m grad_Phi f_m(x_i)``, and as the difference between the
    exact parameter gradient and ``Jbar^T V lam``. The two must agree.
    ``negate_residual`` flips the per-sample sum (checker self-test only).
    """
    lam = as_vector(lam, "lambda")
    if lam.size != model.n_tasks:
        raise ValueError("one weight per task expected")
    if len(reference_pool) < len(batch):
        raise ValueError("reference pool must be at least as large as the batch")
    trace = forward(model, batch)
    tap = backward_representation_tap(model, trace, batch)
    per_task = backward_per_task(model, trace, batch)
    param_grad = sum(lam[m] * per_task[m].flat_bottom for m in range(model.n_tasks))
    v_lam = tap.V @ lam
    jbar, _ = jacobian_repr(model, reference_pool, per_sample=False)
    _, per = jacobian_repr(model, batch, per_sample=True)
    n = len(batch)
    # per-sample gradient of the per-sample loss is n times that of the mean loss
    a = n * np.einsum("m,mbk->bk", lam, tap.per_sample)
    centered = per - jbar[None]
    residual = np.einsum("bkp,bk->p", centered, a) / n
    if negate_residual:
        residual = -residual
    diff = param_grad - jbar.T @ v_lam
    ell = spectral_norm(jbar)
    eps = float(np.linalg.norm(v_lam))
    delta = float(np.linalg.norm(residual))
    return ResidualReport(
        batch_size=n,
        pool_size=len(reference_pool),
        residual_norm=delta,
        residual_gap=float(np.linalg.norm(residual - diff)),
        param_grad_norm=float(np.linalg.norm(param_grad)),
        surrogate_norm=eps,
        ell=ell,
        bound=ell * eps + delta,
    )


def check_theorem1(report: ResidualReport, slack: float = THEOREM_SLACK) -> bool:
    return bool(report.param_grad_norm <= report.ell * report.surrogate_norm + report.residual_norm + slack)


def stationarity_gap(G, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Norm of the min-norm convex combination of the columns of ``G``."""
    G = as_matrix(G, "G")
    if not np.any(G):
        return 0.0
    return min_norm_weights(G, tol=tol, max_iter=max_iter).norm


def decrease_rate(G, d) -> float:
    """Worst-case first-order decrease ``min_m <g_m, d>``."""
    G = as_matrix(G, "G")
    d = as_vector(d, "d")
    if G.shape[0] != d.size:
        raise ValueError("dimension mismatch")
    return float(np.min(G.T @ d))
