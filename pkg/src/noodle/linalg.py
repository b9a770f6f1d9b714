"""Dense linear algebra kernels for the feature decomposition.

Everything here operates on float64 ``numpy`` arrays in the features-first
orientation: a batch of latent vectors is a ``(dim, n_samples)`` matrix whose
columns are samples.  The only nontrivial kernel is
:func:`approx_topk_singular_vectors`, a randomized power iteration that
recovers an orthonormal basis for the dominant left singular subspace without
forming a full SVD.
"""

from __future__ import annotations

import numpy as np

# Columns whose QR pivot falls below this magnitude are treated as numerically
# dependent and replaced with fresh random directions.
DEFICIENT_PIVOT_TOL = 1e-12


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape validation.

    Parameters
    ----------
    a : (m, n) ndarray
    b : (n, p) ndarray

    Returns
    -------
    (m, p) ndarray

    Raises
    ------
    ValueError
        If either argument is not 2-D or the inner dimensions disagree.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D arrays, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def qr_thin(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR factorization with a nonnegative-diagonal sign convention.

    Parameters
    ----------
    a : (d, k) ndarray with ``k <= d``.

    Returns
    -------
    q : (d, k) ndarray with orthonormal columns.
    r : (k, k) upper-triangular ndarray with ``r[j, j] >= 0``, so the
        factorization is unique for full-rank input.

    Notes
    -----
    For rank-deficient input the columns of ``q`` spanning the null directions
    are an arbitrary orthonormal completion; callers that need reproducible
    bases in that regime must repair them (see
    :func:`approx_topk_singular_vectors`).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"qr_thin expects a 2-D array, got {a.ndim}-D")
    d, k = a.shape
    if k > d:
        raise ValueError(f"qr_thin needs at least as many rows as columns, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    signs = np.where(np.diagonal(r) < 0.0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def _fill_deficient_columns(q: np.ndarray, deficient: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Replace flagged columns of ``q`` with random directions orthonormal to the rest."""
    q = q.copy()
    d = q.shape[0]
    for j in np.flatnonzero(deficient):
        others = np.delete(q, j, axis=1)
        while True:
            v = rng.standard_normal(d)
            # Re-orthogonalize twice; a single pass can leave O(eps*kappa) residue.
            for _ in range(2):
                v -= others @ (others.T @ v)
            norm = np.linalg.norm(v)
            if norm > 1e-6:
                break
        q[:, j] = v / norm
    return q


def _random_orthonormal(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    q, r = qr_thin(rng.standard_normal((d, k)))
    deficient = np.abs(np.diagonal(r)) < DEFICIENT_PIVOT_TOL
    if deficient.any():  # pragma: no cover - probability zero for Gaussian draws
        q = _fill_deficient_columns(q, deficient, rng)
    return q


def approx_topk_singular_vectors(
    h: np.ndarray, k: int, n_iter: int, rng: np.random.Generator
) -> np.ndarray:
    """Approximate the top-k left singular subspace of ``h`` by power iteration.

    Starting from a random orthonormal ``(d, k)`` block ``Q``, repeats

        ``Z = h @ (h.T @ Q)``;  ``Q = qr_thin(Z).Q``

    ``n_iter`` times.  The iteration never forms ``h @ h.T``, so the cost per
    sweep is ``O(d * n * k)``.  Convergence to the dominant subspace is
    geometric in the singular value gap ``(sigma_{k+1} / sigma_k) ** 2``.

    Parameters
    ----------
    h : (d, n) ndarray
        Feature matrix, one sample per column.
    k : int
        Subspace dimension, ``1 <= k <= min(d, n)``.
    n_iter : int
        Number of power sweeps, at least 1.
    rng : numpy Generator
        Source for the starting block and for any rank-deficiency repairs;
        fixing it makes the output deterministic.

    Returns
    -------
    (d, k) ndarray with orthonormal columns.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got {h.ndim}-D")
    d, n = h.shape
    if not 1 <= k <= min(d, n):
        raise ValueError(f"rank k={k} outside [1, min{h.shape}]")
    if n_iter < 1:
        raise ValueError(f"n_iter must be >= 1, got {n_iter}")

    q = _random_orthonormal(d, k, rng)
    for _ in range(n_iter):
        z = h @ (h.T @ q)
        if not np.any(z):
            # h is numerically zero; any orthonormal basis is a valid answer.
            break
        q, r = qr_thin(z)
        deficient = np.abs(np.diagonal(r)) < DEFICIENT_PIVOT_TOL
        if deficient.any():
            q = _fill_deficient_columns(q, deficient, rng)
    return q


def l21_norm(m: np.ndarray) -> float:
    """Sum of the Euclidean norms of the columns of ``m``."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"l21_norm expects a 2-D array, got {m.ndim}-D")
    return float(np.linalg.norm(m, axis=0).sum())


def l21_subgradient(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Column-wise subgradient of :func:`l21_norm`.

    Column ``j`` of the result is ``m[:, j] / ||m[:, j]||`` when the norm
    exceeds ``eps`` and the zero vector otherwise (the canonical element of
    the subdifferential at a zero column).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"l21_subgradient expects a 2-D array, got {m.ndim}-D")
    norms = np.linalg.norm(m, axis=0)
    safe = np.where(norms > eps, norms, 1.0)
    return np.where(norms > eps, m / safe, 0.0)
