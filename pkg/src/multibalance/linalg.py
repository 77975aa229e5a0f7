"""Small dense linear-algebra helpers shared by the rest of the package.

Matrices and vectors are plain float64 numpy arrays. Gradient matrices keep
one task per *column*, so ``V[:, m]`` is task ``m``'s gradient.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ConvergenceError",
    "as_matrix",
    "as_vector",
    "matvec",
    "seeded_rng",
    "spectral_norm",
    "sym_eig_bounds",
]

# Fixed seed for power-iteration start vectors; keeps results reproducible.
_START_SEED = 0x5EED


class ConvergenceError(RuntimeError):
    """An iterative routine ran out of iterations.

    ``last`` holds the final iterate (or best point found) so callers can
    inspect or reuse it.
    """

    def __init__(self, message: str, last=None, iterations: int = 0):
        super().__init__(message)
        self.last = last
        self.iterations = iterations


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is platform independent."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: {m.shape} @ {v.shape}")
    return m @ v


def _top_eig_psd(a: np.ndarray, tol: float, max_iter: int) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops once the residual ``||a x - theta x||`` drops below
    ``tol * theta``; for symmetric matrices this bounds the eigenvalue error
    by the same amount (and in practice by its square over the gap).
    """
    n = a.shape[0]
    x = seeded_rng(_START_SEED).standard_normal(n)
    x /= np.linalg.norm(x)
    theta = 0.0
    for it in range(1, max_iter + 1):
        y = a @ x
        theta = float(x @ y)
        ynorm = np.linalg.norm(y)
        if ynorm == 0.0:
            return 0.0
        if np.linalg.norm(y - theta * x) <= tol * max(abs(theta), np.finfo(float).tiny):
            return theta
        x = y / ynorm
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations", last=theta, iterations=max_iter
    )


def spectral_norm(m, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Largest singular value of ``m`` via power iteration on ``m.T @ m``."""
    m = as_matrix(m)
    if m.size == 0:
        raise ValueError("spectral_norm of an empty matrix")
    if tol <= 0:
        raise ValueError("tol must be positive")
    # Iterate on the smaller Gram matrix; both share the nonzero spectrum.
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    if not np.any(gram):
        return 0.0
    try:
        top = _top_eig_psd(gram, tol, max_iter)
    except ConvergenceError as exc:
        raise ConvergenceError(str(exc), last=float(np.sqrt(max(exc.last, 0.0))), iterations=max_iter)
    return float(np.sqrt(max(top, 0.0)))


def sym_eig_bounds(m, tol: float = 1e-12, max_iter: int = 200_000) -> tuple[float, float]:
    """Square roots of the smallest and largest eigenvalues of a PSD matrix.

    Meant for ``m = B.T @ B``: the result is then ``(mu, ell)`` with
    ``mu**2 I <= B.T B <= ell**2 I``. The top eigenvalue comes from power
    iteration, the bottom one from power iteration on ``ell**2 I - m``.
    Tiny negative eigenvalues from rounding are clipped to zero.
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    m = 0.5 * (m + m.T)
    if not np.any(m):
        return 0.0, 0.0
    top = _top_eig_psd(m, tol, max_iter)
    shifted = top * np.eye(m.shape[0]) - m
    spread = _top_eig_psd(shifted, tol, max_iter) if np.any(shifted) else 0.0
    bottom = min(max(top - spread, 0.0), top)
    return float(np.sqrt(bottom)), float(np.sqrt(max(top, 0.0)))
