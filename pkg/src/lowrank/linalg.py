"""Dense linear-algebra kernels with fixed sign conventions.

Everything operates on 2-D float64 numpy arrays. The factorizations wrap
LAPACK but pin the sign freedom (QR diagonal, SVD column signs) so that
repeated runs with the same seed produce bit-identical factors.
"""

import numpy as np

__all__ = ["as_matrix", "matmul", "qr_reduced", "svd_small", "frobenius_norm"]


def as_matrix(a):
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a, b):
    """Matrix product a @ b with an explicit conformability check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def qr_reduced(a):
    """Reduced QR factorization with a non-negative R diagonal.

    Parameters
    ----------
    a : (n, k) array with n >= k.

    Returns
    -------
    q : (n, k) array with orthonormal columns.
    r : (k, k) upper triangular, diagonal >= 0.

    A zero diagonal entry (rank-deficient input) leaves the corresponding
    q column as whatever orthonormal direction LAPACK produced; q is
    orthonormal regardless, which is all the basis-augmentation step needs.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("qr_reduced expects a matrix")
    n, k = a.shape
    if n < k:
        raise ValueError(f"qr_reduced needs rows >= cols, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    # sign(0) := +1 keeps the convention total and deterministic
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def orthonormal_range(a):
    """Orthonormal basis for the range of `a`, allowing more columns than rows.

    For n >= k this is qr_reduced(a).q. For a wide matrix (k > n, which the
    augmented basis [K | U] hits once ranks exceed half the layer width) the
    range is at most all of R^n, so the full n x n Q factor is returned.
    """
    a = np.asarray(a, dtype=np.float64)
    n, k = a.shape
    if k <= n:
        return qr_reduced(a)[0]
    q, r = np.linalg.qr(a, mode="reduced")  # q is n x n here
    signs = np.where(np.diag(r)[: q.shape[1]] < 0.0, -1.0, 1.0)
    return q * signs


def svd_small(s):
    """Full SVD of a small core matrix, sign-normalized for determinism.

    Returns (p, sigma, q) with s == p @ diag(sigma) @ q.T, sigma sorted
    descending. Each left singular vector is flipped so its first nonzero
    entry is non-negative (the matching right vector is flipped with it).
    Intended for the small core factors; shapes stay O(2r x 2r).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("svd_small expects a matrix")
    p, sigma, qt = np.linalg.svd(s, full_matrices=False)
    for j in range(p.shape[1]):
        col = p[:, j]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0.0:
            p[:, j] = -col
            qt[j, :] = -qt[j, :]
    return p, sigma, qt.T


def frobenius_norm(a):
    """sqrt of the sum of squared entries (works on any array shape)."""
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))
