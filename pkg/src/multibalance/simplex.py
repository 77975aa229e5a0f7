"""Task-weight machinery on the probability simplex.

* :func:`project_simplex` - Euclidean projection (sort and threshold).
* :func:`min_norm_weights` - minimum-norm point of the convex hull of the
  columns of ``V`` (closed form for two columns, fully corrective
  Frank-Wolfe otherwise).
* :func:`regularized_weight_step` - one projected descent step on the
  regularized min-norm objective, as used by MultiBalance.
* :func:`brute_force_min_norm` - grid-search oracle for tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .linalg import ConvergenceError, as_matrix, as_vector

__all__ = [
    "MinNormResult",
    "brute_force_min_norm",
    "grid_minimize_quadratic",
    "is_on_simplex",
    "min_norm_weights",
    "project_simplex",
    "regularized_weight_step",
]

SIMPLEX_ATOL = 1e-9


@dataclass(frozen=True)
class MinNormResult:
    weights: np.ndarray
    direction: np.ndarray
    norm: float
    iterations: int


def is_on_simplex(w, atol: float = SIMPLEX_ATOL) -> bool:
    w = np.asarray(w, dtype=np.float64)
    return bool(w.ndim == 1 and w.size > 0 and np.all(w >= 0) and abs(w.sum() - 1.0) <= atol)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex."""
    v = as_vector(v, "v")
    n = v.size
    if n == 0:
        raise ValueError("cannot project a 0-dimensional vector")
    if n == 1:
        return np.ones(1)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, n + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    w = np.maximum(v - tau, 0.0)
    # Rounding can leave the sum a few ulps off; spread the defect over the support.
    support = w > 0
    w[support] -= (w.sum() - 1.0) / support.sum()
    return np.maximum(w, 0.0)


def _min_norm_pair(V: np.ndarray) -> MinNormResult:
    g1, g2 = V[:, 0], V[:, 1]
    diff = g1 - g2
    denom = float(diff @ diff)
    if denom == 0.0:
        a = 0.5
    else:
        a = float(np.clip((g2 @ (g2 - g1)) / denom, 0.0, 1.0))
    w = np.array([a, 1.0 - a])
    d = V @ w
    return MinNormResult(w, d, float(np.linalg.norm(d)), 1)


def min_norm_weights(V, tol: float = 1e-8, max_iter: int = 500) -> MinNormResult:
    """Weights on the simplex minimising ``||V @ w||``.

    For three or more columns this runs the fully corrective Frank-Wolfe
    variant of Wolfe (vertex insertion by linear minimisation, then an exact
    affine minimisation over the active vertices). It stops when the
    Frank-Wolfe duality gap, divided by the largest squared column norm, is at
    most ``tol``; the normalisation makes the iterates invariant to rescaling
    ``V``. Ties in the linear minimisation go to the smallest column index.
    """
    V = as_matrix(V, "V")
    M = V.shape[1]
    if M == 0:
        raise ValueError("V has no columns")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if M == 1:
        d = V[:, 0].copy()
        return MinNormResult(np.ones(1), d, float(np.linalg.norm(d)), 0)
    if M == 2:
        return _min_norm_pair(V)

    G = V.T @ V
    scale = float(np.max(np.diag(G)))
    if scale == 0.0:
        w = np.zeros(M)
        w[0] = 1.0
        return MinNormResult(w, np.zeros(V.shape[0]), 0.0, 0)

    G = G / scale
    # The gap cannot be resolved below rounding in G; never ask for less.
    threshold = max(tol, 32 * M * np.finfo(float).eps)
    corral = [int(np.argmin(np.diag(G)))]
    w = np.zeros(M)
    w[corral[0]] = 1.0
    gap = np.inf
    for it in range(max_iter + 1):
        q = G @ w
        s = int(np.argmin(q))
        gap = 2.0 * (float(w @ q) - q[s])
        if gap <= threshold:
            d = V @ w
            return MinNormResult(w, d, float(np.linalg.norm(d)), it)
        if it == max_iter:
            break
        if s in corral:
            # Affine step already optimal on the corral; fall back to a plain
            # Frank-Wolfe step with exact line search to keep making progress.
            direction = -w.copy()
            direction[s] += 1.0
            curv = float(direction @ G @ direction)
            step = 1.0 if curv <= 0 else min(max(-float(direction @ q) / curv, 0.0), 1.0)
            w = w + step * direction
            corral = [int(i) for i in np.nonzero(w > 0)[0]]
            continue
        corral.append(s)
        w = _minor_cycle(G, w, corral)
    d = V @ w
    best = MinNormResult(w, d, float(np.linalg.norm(d)), max_iter)
    raise ConvergenceError(
        f"Frank-Wolfe gap {gap:.3e} above tolerance after {max_iter} iterations",
        last=best,
        iterations=max_iter,
    )


def _affine_min(Gs: np.ndarray) -> np.ndarray:
    k = Gs.shape[0]
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = Gs
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:k]


def _minor_cycle(G: np.ndarray, w: np.ndarray, corral: list[int]) -> np.ndarray:
    """Move ``w`` to the min-norm point of the corral's affine hull.

    When that point leaves the simplex, walk toward it until the first
    weight hits zero, drop that vertex and repeat (Wolfe's minor cycle).
    Mutates ``corral`` in place.
    """
    while True:
        idx = np.array(corral)
        x = _affine_min(G[np.ix_(idx, idx)])
        if np.all(x > 0):
            w = np.zeros_like(w)
            w[idx] = x / x.sum()
            return w
        cur = w[idx]
        neg = x <= 0
        theta = float(np.min(cur[neg] / (cur[neg] - x[neg])))
        cur = cur + theta * (x - cur)
        cur[neg & (cur <= 1e-15)] = 0.0
        cur = np.maximum(cur, 0.0)
        keep = cur > 0
        if not np.any(keep):
            keep[int(np.argmax(x))] = True
            cur[keep] = 1.0
        w = np.zeros_like(w)
        w[idx[keep]] = cur[keep] / cur[keep].sum()
        corral[:] = [int(i) for i in idx[keep]]


def regularized_weight_step(
    lam,
    V,
    lambda0,
    rho: float,
    beta: float,
    mode: str = "inner-product",
) -> np.ndarray:
    """One projected step ``Pi(lam - beta * s)`` on the task weights.

    ``s_m = <v_m, V lam + rho V lambda0>`` in ``"inner-product"`` mode and the
    cosine between the same two vectors in ``"cosine"`` mode (zero when
    either vector vanishes).
    """
    lam = as_vector(lam, "lambda")
    lambda0 = as_vector(lambda0, "lambda0")
    V = as_matrix(V, "V")
    if not (lam.size == lambda0.size == V.shape[1]):
        raise ValueError(f"dimension mismatch: lambda {lam.size}, lambda0 {lambda0.size}, V {V.shape}")
    if rho < 0 or beta < 0:
        raise ValueError("rho and beta must be non-negative")
    target = V @ (lam + rho * lambda0)
    if mode == "inner-product":
        s = V.T @ target
    elif mode == "cosine":
        col_norms = np.linalg.norm(V, axis=0)
        tnorm = np.linalg.norm(target)
        denom = col_norms * tnorm
        s = np.zeros_like(lam)
        ok = denom > 0
        s[ok] = (V.T @ target)[ok] / denom[ok]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return project_simplex(lam - beta * s)


@lru_cache(maxsize=8)
def _grid_heads(k: int, n: int) -> np.ndarray:
    if k == 0:
        return np.zeros((1, 0), dtype=np.int64)
    H = np.indices((n + 1,) * k).reshape(k, -1).T
    return H[H.sum(axis=1) <= n]


def grid_minimize_quadratic(Q, c, n: int) -> tuple[np.ndarray, float]:
    """Minimum of ``w Q w + c w`` over the grid ``{w in simplex : n w integer}``.

    Equivalent to exhaustive enumeration: all but the last two coordinates are
    enumerated, and along the remaining one-dimensional slice the convex
    quadratic is minimised over grid points by checking the two neighbours of
    the continuous minimiser (plus the slice ends).
    """
    Q = np.asarray(Q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    M = Q.shape[0]
    if M == 1:
        w = np.ones(1)
        return w, float(w @ Q @ w + c @ w)
    H = _grid_heads(M - 2, n)
    r = n - H.sum(axis=1)
    # w = base + t * e_{M-2} + (R - t) * e_{M-1}, with everything divided by n
    base = np.zeros((len(H), M))
    base[:, : M - 2] = H
    base[:, M - 1] = r
    e = np.zeros(M)
    e[M - 2], e[M - 1] = 1.0, -1.0
    # f(t) = (b + t e) Q (b + t e) / n^2 + c (b + t e) / n
    bQ = base @ Q
    bQb = np.einsum("si,si->s", bQ, base)
    bQe = bQ @ e
    eQe = float(e @ Q @ e)
    cb = base @ c
    ce = float(c @ e)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_star = np.where(eQe > 0, -(2.0 * bQe + n * ce) / (2.0 * eQe), 0.0)
    cands = np.stack(
        [np.zeros_like(r), r, np.clip(np.floor(t_star), 0, r), np.clip(np.ceil(t_star), 0, r)],
        axis=1,
    ).astype(np.float64)
    vals = (bQb[:, None] + 2.0 * bQe[:, None] * cands + eQe * cands**2) / n**2
    vals += (cb[:, None] + ce * cands) / n
    flat = int(np.argmin(vals))
    i, j = divmod(flat, vals.shape[1])
    w = (base[i] + cands[i, j] * e) / n
    return w, float(w @ Q @ w + c @ w)


def brute_force_min_norm(V, resolution: float = 1e-3) -> MinNormResult:
    """Grid oracle for :func:`min_norm_weights` (at most four columns)."""
    V = as_matrix(V, "V")
    M = V.shape[1]
    if M > 4:
        raise ValueError("brute force limited to M <= 4")
    if not (0 < resolution <= 0.1):
        raise ValueError("resolution must lie in (0, 0.1]")
    n = int(round(1.0 / resolution))
    w, _ = grid_minimize_quadratic(V.T @ V, np.zeros(M), n)
    d = V @ w
    return MinNormResult(w, d, float(np.linalg.norm(d)), 0)
