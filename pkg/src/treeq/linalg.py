"""Deterministic dense linear algebra: Hadamard transforms and truncated SVD.

Every routine here is bit-reproducible across runs and thread counts.
Matrix products go through ``np.einsum`` so the accumulation order is fixed
(no BLAS kernel dispatch), and the SVD uses one-sided cyclic Jacobi, which
needs no start vector and visits column pairs in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InvalidDimensionError, InvalidRankError

MAX_HADAMARD = 4096
JACOBI_SWEEP_CAP = 60
JACOBI_TOL = 1e-14

_hadamard_cache: dict[int, np.ndarray] = {}


def as_matrix(a) -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array or raise InvalidDimensionError."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidDimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise InvalidDimensionError("matrix contains non-finite entries")
    return m


def as_vector(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 1:
        raise InvalidDimensionError(f"expected a 1-D vector, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise InvalidDimensionError("vector contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation order."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise InvalidDimensionError(
            f"inner dimensions differ: {a.shape} x {b.shape}"
        )
    return np.einsum("ij,jk->ik", a, b)


def matvec(a, x) -> np.ndarray:
    """Matrix-vector product, bit-identical to the matching row of matmul."""
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise InvalidDimensionError(
            f"inner dimensions differ: {a.shape} x ({x.shape[0]},)"
        )
    return np.einsum("ij,j->i", a, x)


def matvec_t(a, x) -> np.ndarray:
    """Product A^T x without materialising the transpose."""
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[0] != x.shape[0]:
        raise InvalidDimensionError(
            f"inner dimensions differ: {a.shape}^T x ({x.shape[0]},)"
        )
    return np.einsum("ji,j->i", a, x)


def hadamard(n: int) -> np.ndarray:
    """Normalized Sylvester Hadamard matrix of order ``n``.

    ``n`` must be a power of two, at most 4096.  Entries are +-1/sqrt(n) and
    the matrix is symmetric and orthogonal.  Results are cached; callers get
    a fresh writable copy each time.
    """
    if not isinstance(n, (int, np.integer)) or n < 1 or (n & (n - 1)) != 0:
        raise InvalidDimensionError(f"Hadamard order must be a power of two, got {n}")
    if n > MAX_HADAMARD:
        raise InvalidDimensionError(f"Hadamard order {n} exceeds cap {MAX_HADAMARD}")
    cached = _hadamard_cache.get(n)
    if cached is None:
        h = np.ones((1, 1))
        while h.shape[0] < n:
            h = np.block([[h, h], [h, -h]])
        cached = h / np.sqrt(n)
        cached.setflags(write=False)
        _hadamard_cache[n] = cached
    return cached.copy()


@dataclass(frozen=True)
class SvdTriple:
    """Rank-r factorization: u (m x r), sigma (r,) non-increasing, v (n x r)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def product(self) -> np.ndarray:
        return matmul(self.u * self.sigma[None, :], self.v.T)


def _jacobi_columns(a):
    """One-sided cyclic Jacobi on the columns of a tall-or-square matrix.

    Rotates column pairs in a fixed (p, q) order until every pair is
    orthogonal to relative tolerance JACOBI_TOL, then reads off
    sigma_j = |col_j|, u_j = col_j / sigma_j.  Returns (b, v) with
    a @ v = b and b's columns mutually orthogonal.
    """
    b = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    worst = 0.0
    for _ in range(JACOBI_SWEEP_CAP):
        worst = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = np.dot(b[:, p], b[:, p])
                beta = np.dot(b[:, q], b[:, q])
                if alpha == 0.0 or beta == 0.0:
                    continue
                gamma = np.dot(b[:, p], b[:, q])
                rel = abs(gamma) / np.sqrt(alpha * beta)
                if rel > worst:
                    worst = rel
                if rel <= JACOBI_TOL:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                bp = c * b[:, p] - s * b[:, q]
                bq = s * b[:, p] + c * b[:, q]
                b[:, p], b[:, q] = bp, bq
                vp = c * v[:, p] - s * v[:, q]
                vq = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = vp, vq
        if worst <= JACOBI_TOL:
            return b, v
    raise ConvergenceError(
        f"Jacobi SVD did not converge in {JACOBI_SWEEP_CAP} sweeps", residual=worst
    )


def _canonical_unit(dim: int, prev) -> np.ndarray:
    """Deterministic unit vector orthogonal to ``prev``; prev must leave room."""
    for i in range(dim):
        w = np.zeros(dim)
        w[i] = 1.0
        for p in prev:
            w -= np.dot(p, w) * p
        nrm = np.sqrt(np.dot(w, w))
        if nrm > 1e-6:
            return w / nrm
    raise InvalidRankError("no direction left orthogonal to previous vectors")


def _fix_sign(u, v):
    """Flip signs so the first entry of u with |u_i| > 1e-12 is positive."""
    for ui in u:
        if abs(ui) > 1e-12:
            if ui < 0.0:
                return -u, -v
            return u, v
    return u, v


def _svd_full(a):
    """Full SVD sorted by descending sigma, sign-normalized per column."""
    m, n = a.shape
    transposed = n > m
    work = a.T.copy() if transposed else a
    b, v = _jacobi_columns(work)
    norms = np.sqrt(np.einsum("ij,ij->j", b, b))
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    v = v[:, order]
    u = np.zeros_like(b)
    filled = []
    for j, col in enumerate(order):
        if norms[col] > 0.0:
            u[:, j] = b[:, col] / norms[col]
        else:
            u[:, j] = _canonical_unit(b.shape[0], filled)
        filled.append(u[:, j])
    for j in range(u.shape[1]):
        uj, vj = _fix_sign(u[:, j], v[:, j])
        u[:, j], v[:, j] = uj, vj
    if transposed:
        u, v = v, u
    return u, sigma, v


def truncated_svd(m, r: int) -> SvdTriple:
    """Best rank-``r`` factorization via one-sided Jacobi.

    The full factorization is computed (the matrices here are small) and
    the top r triples are returned.  Deterministic: fixed rotation order,
    no random starts; exact singular-value ties keep column order.
    """
    a = as_matrix(m)
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidDimensionError("matrix must be at least 1 x 1")
    if not isinstance(r, (int, np.integer)) or r < 1 or r > min(a.shape):
        raise InvalidRankError(f"rank {r} invalid for shape {a.shape}")
    u, sigma, v = _svd_full(a)
    r = int(r)
    return SvdTriple(u=u[:, :r].copy(), sigma=sigma[:r].copy(), v=v[:, :r].copy())


def top_singular_pair(m):
    """Leading singular triple ``(sigma, u, v)`` of a matrix.

    The sign convention makes the first significant entry of ``u``
    positive, so results are reproducible across runs.  A zero matrix
    yields sigma 0 with canonical basis vectors.
    """
    a = as_matrix(m)
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidDimensionError("matrix must be at least 1 x 1")
    if not a.any():
        u = np.zeros(a.shape[0])
        u[0] = 1.0
        v = np.zeros(a.shape[1])
        v[0] = 1.0
        return 0.0, u, v
    t = truncated_svd(a, 1)
    return float(t.sigma[0]), t.u[:, 0].copy(), t.v[:, 0].copy()
