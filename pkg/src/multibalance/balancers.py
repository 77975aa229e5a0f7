"""Gradient and loss balancing strategies.

Every gradient balancer takes a gradient matrix ``G`` (one task per column)
plus a :class:`BalancerState` and returns a :class:`BalanceOutcome`. The
matrix can hold representation gradients (one backward pass) or full
shared-parameter gradients (``M`` passes); the balancers do not care.

When the aggregate is a fixed linear combination of the *current* columns,
``BalanceOutcome.coef`` holds the coefficients (``aggregate == G @ coef``).
The training loop uses them to lift a balanced batch-level vector back to
per-sample representation gradients. Gradient Drop instead reports
per-coordinate ``masks``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_matrix
from .simplex import min_norm_weights, project_simplex, regularized_weight_step

log = logging.getLogger(__name__)

__all__ = [
    "BALANCERS",
    "BalanceOutcome",
    "BalancerState",
    "LOSS_BALANCERS",
    "dbmtl_step",
    "graddrop_step",
    "gradvaccine_step",
    "imtlg_step",
    "mean_step",
    "mgda_step",
    "moco_step",
    "multibalance_step",
    "pcgrad_step",
    "sum_step",
    "uncertainty_reweigh",
]

_GUARD = 1e-12


@dataclass
class BalancerState:
    """Mutable state shared by all balancers (each uses its own fields)."""

    n_tasks: int
    lam: np.ndarray | None = None
    lambda0: np.ndarray | None = None
    rho: float = 0.1
    beta: float = 1.0
    gamma: float = 0.01
    cosine_mode: bool = True
    ema_norms: np.ndarray | None = None
    vaccine_rate: float = 0.01
    pairwise_cos_ema: np.ndarray | None = None
    tracked_grads: np.ndarray | None = None
    log_vars: np.ndarray | None = None
    solver_tol: float = 1e-8
    solver_max_iter: int = 500
    step: int = 0

    def __post_init__(self):
        M = self.n_tasks
        if M < 1:
            raise ValueError("need at least one task")
        if self.lam is None:
            self.lam = np.full(M, 1.0 / M)
        if self.lambda0 is None:
            self.lambda0 = np.full(M, 1.0 / M)
        self.lam = np.asarray(self.lam, dtype=np.float64)
        self.lambda0 = np.asarray(self.lambda0, dtype=np.float64)
        if self.log_vars is None:
            self.log_vars = np.zeros(M)
        if self.pairwise_cos_ema is None:
            self.pairwise_cos_ema = np.full((M, M), np.nan)  # nan: not yet observed
        if self.rho < 0 or self.beta < 0:
            raise ValueError("rho and beta must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class BalanceOutcome:
    aggregate: np.ndarray
    weights: np.ndarray
    per_task: np.ndarray  # post-processing per-task gradients, same shape as G
    coef: np.ndarray | None = None
    masks: np.ndarray | None = None
    on_simplex: bool = True
    extra: dict = field(default_factory=dict)


def _check(G, state: BalancerState | None = None) -> np.ndarray:
    G = as_matrix(G, "G")
    if state is not None and G.shape[1] != state.n_tasks:
        raise ValueError(f"G has {G.shape[1]} columns for {state.n_tasks} tasks")
    return G


def multibalance_step(V, state: BalancerState, rng=None) -> BalanceOutcome:
    """EMA-normalised columns, one projected weight step, weighted sum."""
    V = _check(V, state)
    norms = np.linalg.norm(V, axis=0)
    if state.ema_norms is None:
        state.ema_norms = norms.copy()
    state.ema_norms = (1.0 - state.gamma) * state.ema_norms + state.gamma * norms
    scale = np.ones_like(norms)
    nz = norms > 0
    scale[nz] = state.ema_norms[nz] / norms[nz]
    Vs = V * scale
    mode = "cosine" if state.cosine_mode else "inner-product"
    state.lam = regularized_weight_step(state.lam, Vs, state.lambda0, state.rho, state.beta, mode)
    state.step += 1
    return BalanceOutcome(Vs @ state.lam, state.lam.copy(), Vs, coef=scale * state.lam, extra={"scale": scale})


def mgda_step(G, state: BalancerState | None = None, rng=None) -> BalanceOutcome:
    G = _check(G, state)
    tol = state.solver_tol if state else 1e-8
    max_iter = state.solver_max_iter if state else 500
    res = min_norm_weights(G, tol=tol, max_iter=max_iter)
    if state is not None:
        state.lam = res.weights.copy()
        state.step += 1
    return BalanceOutcome(res.direction, res.weights, G.copy(), coef=res.weights.copy())


def moco_step(G, state: BalancerState, rng=None) -> BalanceOutcome:
    """Min-norm weights on exponentially tracked gradients (MoCo-style)."""
    G = _check(G, state)
    if state.tracked_grads is None or state.tracked_grads.shape != G.shape:
        state.tracked_grads = np.zeros_like(G)
    state.tracked_grads = (1.0 - state.gamma) * state.tracked_grads + state.gamma * G
    res = min_norm_weights(state.tracked_grads, tol=state.solver_tol, max_iter=state.solver_max_iter)
    state.lam = res.weights.copy()
    state.step += 1
    return BalanceOutcome(res.direction, res.weights, state.tracked_grads.copy())


def pcgrad_step(G, state: BalancerState | None = None, rng: np.random.Generator | None = None) -> BalanceOutcome:
    """Project each gradient off the normal plane of conflicting ones.

    Projections are always taken against the *raw* gradients, visited in a
    random order per task. The result is the mean of the projected columns.
    """
    G = _check(G, state)
    M = G.shape[1]
    if rng is None:
        rng = np.random.default_rng(0)
    sq = np.einsum("ij,ij->j", G, G)
    # mix[:, i] expresses projected g_i as a combination of raw columns
    mix = np.eye(M)
    out = G.copy()
    for i in range(M):
        others = [j for j in range(M) if j != i]
        for j in rng.permutation(others):
            if sq[j] == 0.0:
                continue
            dot = float(out[:, i] @ G[:, j])
            if dot < 0.0:
                c = dot / sq[j]
                out[:, i] -= c * G[:, j]
                mix[j, i] -= c
    coef = mix.mean(axis=1)
    if state is not None:
        state.step += 1
    return BalanceOutcome(out.mean(axis=1), np.full(M, 1.0 / M), out, coef=coef, on_simplex=True)


def gradvaccine_step(G, state: BalancerState, rng=None) -> BalanceOutcome:
    """Pull pairwise cosines up to their running targets, then average.

    For each ordered pair ``(i, j)`` with current cosine below the target
    ``t``, ``g_i`` gains ``a * g_j`` where ``a`` is chosen so that the cosine
    between the new ``g_i`` and raw ``g_j`` equals ``t`` exactly. Targets are
    an EMA of observed cosines, initialised at the first observation.
    """
    G = _check(G, state)
    M = G.shape[1]
    norms = np.linalg.norm(G, axis=0)
    ema = state.pairwise_cos_ema
    mix = np.eye(M)
    out = G.copy()
    for i in range(M):
        for j in range(M):
            if i == j or norms[j] == 0.0:
                continue
            ni = np.linalg.norm(out[:, i])
            if ni == 0.0:
                continue
            cos = float(np.clip(out[:, i] @ G[:, j] / (ni * norms[j]), -1.0, 1.0))
            target = ema[i, j]
            if np.isnan(target):
                target = cos
            elif cos < target:
                denom = norms[j] * np.sqrt(max(1.0 - target * target, 0.0))
                if denom > _GUARD:
                    a = ni * (target * np.sqrt(max(1.0 - cos * cos, 0.0)) - cos * np.sqrt(1.0 - target * target)) / denom
                    out[:, i] += a * G[:, j]
                    mix[j, i] += a
            ema[i, j] = float(np.clip((1.0 - state.vaccine_rate) * target + state.vaccine_rate * cos, -1.0, 1.0))
    state.step += 1
    return BalanceOutcome(out.mean(axis=1), np.full(M, 1.0 / M), out, coef=mix.mean(axis=1))


def graddrop_step(G, state: BalancerState | None = None, rng: np.random.Generator | None = None) -> BalanceOutcome:
    """Sign-purity dropout: per coordinate keep only one sign, chosen at random."""
    G = _check(G, state)
    if rng is None:
        rng = np.random.default_rng(0)
    pos = np.where(G > 0, G, 0.0).sum(axis=1)
    tot = np.abs(G).sum(axis=1)
    purity = np.full(G.shape[0], 0.5)
    np.divide(pos, tot, out=purity, where=tot > 0)
    u = rng.random(G.shape[0])
    keep_pos = (u < purity)[:, None]
    masks = np.where(keep_pos, G > 0, G < 0)
    out = np.where(masks, G, 0.0)
    if state is not None:
        state.step += 1
    M = G.shape[1]
    return BalanceOutcome(out.sum(axis=1), np.ones(M), out, masks=masks, on_simplex=False, extra={"purity": purity})


def dbmtl_step(G, state: BalancerState | None = None, rng=None) -> BalanceOutcome:
    """Rescale every nonzero column to the median column norm, then sum.

    For an even number of tasks the median is the mean of the two middle norms.
    """
    G = _check(G, state)
    norms = np.linalg.norm(G, axis=0)
    target = float(np.median(norms))
    scale = np.zeros_like(norms)
    nz = norms > 0
    scale[nz] = target / norms[nz]
    out = G * scale
    if state is not None:
        state.step += 1
    return BalanceOutcome(out.sum(axis=1), scale, out, coef=scale.copy(), on_simplex=False)


def imtlg_step(G, state: BalancerState | None = None, rng=None) -> BalanceOutcome:
    """Weights summing to one whose aggregate projects equally on every unit gradient."""
    G = _check(G, state)
    M = G.shape[1]
    alpha = np.full(M, 1.0 / M)
    norms = np.linalg.norm(G, axis=0)
    if M > 1:
        if np.any(norms == 0.0):
            log.warning("IMTL-G: zero-norm task gradient, using uniform weights")
        else:
            U = G / norms
            D = G[:, :1] - G[:, 1:]  # columns g_1 - g_i
            Ud = U[:, :1] - U[:, 1:]  # columns u_1 - u_i
            K = Ud.T @ D
            rhs = Ud.T @ G[:, 0]
            try:
                if np.linalg.cond(K) > 1e12:
                    raise np.linalg.LinAlgError("ill-conditioned")
                rest = np.linalg.solve(K, rhs)
                alpha = np.concatenate([[1.0 - rest.sum()], rest])
            except np.linalg.LinAlgError:
                log.warning("IMTL-G: singular system, using uniform weights")
    if state is not None:
        state.step += 1
    return BalanceOutcome(G @ alpha, alpha, G * alpha, coef=alpha.copy(), on_simplex=False)


def sum_step(G, state=None, rng=None) -> BalanceOutcome:
    """Unweighted sum: what a single backward pass on the summed loss applies."""
    G = _check(G, state)
    M = G.shape[1]
    return BalanceOutcome(G.sum(axis=1), np.ones(M), G.copy(), coef=np.ones(M), on_simplex=M == 1)


def mean_step(G, state=None, rng=None) -> BalanceOutcome:
    G = _check(G, state)
    M = G.shape[1]
    w = np.full(M, 1.0 / M)
    return BalanceOutcome(G @ w, w, G.copy(), coef=w.copy())


def uncertainty_reweigh(losses, state: BalancerState, lr: float):
    """Homoscedastic-uncertainty loss weighting.

    ``total = sum(exp(-s) * f + s / 2)``. Returns the total and the loss
    weights ``exp(-s)`` at the current ``s``, then takes one gradient step on
    ``s`` (stored back in ``state.log_vars``) and returns it too.
    """
    f = np.asarray(losses, dtype=np.float64)
    s = state.log_vars
    if f.shape != s.shape:
        raise ValueError("one loss per task expected")
    w = np.exp(-s)
    total = float(np.sum(w * f + 0.5 * s))
    state.log_vars = s - lr * (-w * f + 0.5)
    state.step += 1
    return total, w, state.log_vars.copy()


BALANCERS = {
    "multibalance": multibalance_step,
    "mgda": mgda_step,
    "moco": moco_step,
    "pcgrad": pcgrad_step,
    "gradvac": gradvaccine_step,
    "graddrop": graddrop_step,
    "dbmtl": dbmtl_step,
    "imtlg": imtlg_step,
    "vanilla": sum_step,
}

# balancers that act on losses before the backward pass
LOSS_BALANCERS = {"uncertainty": uncertainty_reweigh}

# balancers allowed to consume full shared-parameter gradients
PARAMETER_MODE = {"mgda", "moco", "vanilla"}
