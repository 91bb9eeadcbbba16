"""Dense matrix core.

Matrices are plain 2-D ``float64`` numpy arrays. :func:`as_matrix` is the
single gate that enforces the shape and finiteness contract; every public
operation in the package passes its inputs through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_rng


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ContractError(f"{name}: expected a 2-D matrix, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ContractError(f"{name}: empty matrix of shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name}: contains NaN or Inf")
    return a


def gemm(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"gemm: inner dimensions differ ({a.shape} x {b.shape})")
    return a @ b


def column_mean(x) -> np.ndarray:
    x = as_matrix(x, "x")
    return x.mean(axis=0)


def center(x) -> np.ndarray:
    x = as_matrix(x, "x")
    centered = x - x.mean(axis=0)
    # A second pass removes the O(eps * |mean|) residue left by the first.
    return centered - centered.mean(axis=0)


@dataclass(frozen=True)
class TruncatedSvd:
    u: np.ndarray  # (l, k)
    s: np.ndarray  # (k,) descending
    v: np.ndarray  # (m, k)

    @property
    def k(self) -> int:
        return int(self.s.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def truncated_svd(
    x,
    k: int,
    seed: int = 0,
    oversample: int = 8,
    power_iters: int = 2,
    tol: float = 1e-12,
    max_iters: int = 200,
) -> TruncatedSvd:
    """Rank-``k`` SVD by randomized subspace iteration.

    A Gaussian sketch of width ``k + oversample`` is refined by at least
    ``power_iters`` orthonormalized power iterations. Iteration then continues
    until the leading ``k`` singular values of the projected matrix change by
    less than ``tol`` (relative), capped at ``max_iters``. The final factors
    come from an exact dense SVD of the small projected matrix, so
    ``u @ diag(s) @ v.T`` is always an orthogonal projection of ``x``.
    """
    x = as_matrix(x, "x")
    l, m = x.shape
    r = min(l, m)
    if not 1 <= k <= r:
        raise ContractError(f"truncated_svd: k={k} outside [1, {r}]")

    width = min(k + oversample, r)
    rng = make_rng(seed, 0x5BD)
    q, _ = np.linalg.qr(x @ rng.standard_normal((m, width)))

    # With a full-width sketch q already spans the column space of x.
    prev = None
    for it in range(max_iters if width < r else 0):
        b = q.T @ x
        s_small = np.linalg.svd(b, compute_uv=False)[:k]
        if it > power_iters and prev is not None:
            scale = max(float(s_small[0]), np.finfo(float).tiny)
            if np.max(np.abs(s_small - prev)) <= tol * scale:
                break
        prev = s_small
        z, _ = np.linalg.qr(x.T @ q)
        q, _ = np.linalg.qr(x @ z)

    b = q.T @ x
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ ub[:, :k]
    return TruncatedSvd(u=u, s=s[:k].copy(), v=vt[:k].T.copy())


def full_svd(x) -> TruncatedSvd:
    """Exact thin SVD; intended as a reference for small instances."""
    x = as_matrix(x, "x")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    return TruncatedSvd(u=u, s=s, v=vt.T)
