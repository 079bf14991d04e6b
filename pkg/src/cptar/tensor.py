"""
Dense multilinear-algebra primitives.

Tensors are plain ``numpy.ndarray`` objects. Every flattening in this package
uses the first-index-fastest (column-major, ``order='F'``) convention, so that
``vec(u1 o u2 o ... o un)`` equals the corresponding column of
``khatri_rao(Un, ..., U1)``.
"""
from functools import reduce

import numpy as np
import scipy.linalg


class DegenerateFactorError(ValueError):
    """A factor matrix has a column with zero 2-norm."""


def as_tensor(data, shape=None):
    """Return ``data`` as a float64 array, optionally reshaping a flat
    column-major vector to ``shape``."""
    arr = np.asarray(data, dtype=float)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if any(d < 1 for d in shape):
            raise ValueError(f"tensor dimensions must be >= 1, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ValueError(
                f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape, order="F")
    return arr


def vectorize(t):
    """Flatten a tensor in first-index-fastest order."""
    return np.asarray(t, dtype=float).ravel(order="F")


def _check_mode(s, order, upper):
    if not 1 <= s <= upper:
        raise ValueError(f"mode index {s} out of range for order-{order} tensor")


def mode_matricize(t, s):
    """Mode-``s`` matricization (1-based ``s``).

    Returns a ``d_s x prod(d_i, i != s)`` matrix whose columns are the mode-s
    fibers, remaining modes ordered first-remaining-index-fastest.
    """
    t = np.asarray(t, dtype=float)
    _check_mode(s, t.ndim, t.ndim)
    return np.moveaxis(t, s - 1, 0).reshape(t.shape[s - 1], -1, order="F")


def seq_matricize(t, s):
    """Sequential matricization ``[t]_s``: rows index modes ``1..s``, columns
    index modes ``s+1..d``, both first-index-fastest."""
    t = np.asarray(t, dtype=float)
    _check_mode(s, t.ndim, t.ndim - 1)
    rows = int(np.prod(t.shape[:s]))
    return t.reshape(rows, -1, order="F")


def inv_seq_matricize(m, shape, s):
    """Inverse of :func:`seq_matricize`."""
    m = np.asarray(m, dtype=float)
    shape = tuple(int(d) for d in shape)
    if m.ndim != 2:
        raise ValueError("expected a matrix")
    if len(shape) == 1:
        if m.size != shape[0]:
            raise ValueError(f"matrix of size {m.shape} cannot fill shape {shape}")
        return m.reshape(shape, order="F")
    _check_mode(s, len(shape), len(shape) - 1)
    rows, cols = int(np.prod(shape[:s])), int(np.prod(shape[s:]))
    if m.shape != (rows, cols):
        raise ValueError(
            f"matrix shape {m.shape} incompatible with tensor shape {shape} "
            f"split at {s}; expected {(rows, cols)}")
    return m.reshape(shape, order="F")


def kronecker(a, b):
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def khatri_rao(a, b):
    """Column-wise Kronecker product; column r is ``kron(a[:, r], b[:, r])``."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"Khatri-Rao needs equal column counts, got {a.shape[1]} and {b.shape[1]}")
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


def khatri_rao_chain(factors):
    """``F_n (.) ... (.) F_1`` for ``factors = [F_1, ..., F_n]``."""
    return reduce(khatri_rao, reversed(list(factors)))


def outer_rank1(vectors):
    """Rank-1 tensor ``v1 o v2 o ... o vn``."""
    vectors = [np.asarray(v, dtype=float).ravel() for v in vectors]
    if not vectors or any(v.size == 0 for v in vectors):
        raise ValueError("outer_rank1 needs at least one nonempty vector")
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def col_norm(u):
    """Divide each column by its 2-norm.

    Raises
    ------
    DegenerateFactorError
        If any column has zero (or non-finite) norm.
    """
    u = np.asarray(u, dtype=float)
    norms = np.linalg.norm(u, axis=0)
    bad = ~(np.isfinite(norms) & (norms > 0))
    if np.any(bad):
        raise DegenerateFactorError(
            f"zero or non-finite column(s) {np.flatnonzero(bad).tolist()}")
    return u / norms


def solve_least_squares(design, rhs, rcond=None, return_rank=False):
    """Minimum-norm solution of ``min ||rhs - design @ X||_F``.

    Uses the SVD-based LAPACK driver, so rank-deficient designs yield the
    minimum-Frobenius-norm minimizer. Singular values below
    ``rcond * s_max`` count as zero; the default ``rcond`` is
    ``eps * max(design.shape)``.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    rhs = np.asarray(rhs, dtype=float)
    if rcond is None:
        rcond = np.finfo(float).eps * max(design.shape)
    x, _, rank, _ = scipy.linalg.lstsq(design, rhs, cond=rcond, lapack_driver="gelsd")
    return (x, int(rank)) if return_rank else x


def solve_normal(gram, rhs, rcond=1e-13):
    """Minimum-norm solution of normal equations ``gram @ x = rhs``.

    Returns ``(x, rank)``; ``rank < gram.shape[0]`` flags a singular design.
    """
    x, _, rank, _ = scipy.linalg.lstsq(gram, rhs, cond=rcond, lapack_driver="gelsd")
    return x, int(rank)


def l1_norm(t):
    """Sum of absolute entries (the penalty used by the sparse estimator)."""
    return float(np.sum(np.abs(t)))


def support_size(t):
    """Number of nonzero entries."""
    return int(np.count_nonzero(t))


def frob(t):
    return float(np.linalg.norm(np.ravel(t)))
