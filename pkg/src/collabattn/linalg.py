"""Dense real-matrix kernels.

Matrices are 2-D ``float64`` numpy arrays in row-major (C) order; third-order
tensors are 3-D ``float64`` arrays indexed ``(i, j, k)`` with ``k`` fastest.
The SVD is a one-sided Jacobi iteration written here so the accuracy
contract does not depend on which LAPACK numpy happens to link against.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError

DEFAULT_RCOND = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: non-finite entries")
    return m


def as_tensor3(t, name: str = "tensor") -> np.ndarray:
    x = np.ascontiguousarray(t, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"{name}: expected 3-D array, got shape {x.shape}")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    a = as_matrix(a)
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _tournament_perm(m: int) -> np.ndarray:
    """Circle-method schedule for ``m`` (even) slots.

    Slot ``i < m/2`` plays slot ``i + m/2``.  Slot 0 stays put; every other
    occupant advances one place around the ring, so after ``m - 1`` rounds
    each pair has met exactly once.  Slot ``j`` of the next round is filled
    from slot ``perm[j]``.
    """
    h = m // 2
    ring = list(range(1, h)) + list(range(m - 1, h - 1, -1))
    perm = np.arange(m)
    for r, src in enumerate(ring):
        perm[ring[(r + 1) % len(ring)]] = src
    return perm


def _jacobi(w: np.ndarray, v: np.ndarray | None, max_sweeps: int) -> None:
    """Orthogonalise the rows of ``w`` in place, accumulating rotations in ``v``."""
    k, n = w.shape
    m = k + (k % 2)
    h = m // 2
    w_pad = np.zeros((m, n))
    w_pad[:k] = w
    vv = None
    if v is not None:
        vv = np.zeros((m, v.shape[1]))
        vv[:k] = v
    slot = np.arange(m)
    perm = _tournament_perm(m)
    tol = max(n, 1) * np.finfo(np.float64).eps
    # Rows below this squared norm are rounding residue of a null direction.
    floor = (tol * np.linalg.norm(w)) ** 2

    for _ in range(max_sweeps):
        rotated = False
        for _ in range(m - 1):
            top, bot = w_pad[:h], w_pad[h:]
            alpha = np.einsum("ij,ij->i", top, top)
            beta = np.einsum("ij,ij->i", bot, bot)
            gamma = np.einsum("ij,ij->i", top, bot)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (
                np.minimum(alpha, beta) > floor
            )
            if active.any():
                rotated = True
                g = np.where(active, gamma, 1.0)
                with np.errstate(over="ignore"):
                    zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = (c * t)[:, None]
                c = c[:, None]
                _rotate(top, bot, c, s)
                if vv is not None:
                    _rotate(vv[:h], vv[h:], c, s)
            w_pad = w_pad[perm]
            if vv is not None:
                vv = vv[perm]
            slot = slot[perm]
        if not rotated:
            break
    else:
        raise NumericalError(f"svd: no convergence after {max_sweeps} sweeps")

    inv = np.empty(m, dtype=np.intp)
    inv[slot] = np.arange(m)
    w[...] = w_pad[inv][:k]
    if v is not None:
        v[...] = vv[inv][:k]


def _rotate(top: np.ndarray, bot: np.ndarray, c: np.ndarray, s: np.ndarray) -> None:
    tmp = top.copy()
    top *= c
    top -= s * bot
    bot *= c
    bot += s * tmp


def _svd(a, max_sweeps: int | None, compute_uv: bool):
    a = as_matrix(a)
    rows, cols = a.shape
    transposed = rows < cols
    if transposed:
        a = a.T
        rows, cols = cols, rows
    k = cols
    if k == 0:
        return np.zeros((rows, 0)), np.zeros(0), np.zeros((0, cols)), transposed
    if max_sweeps is None:
        max_sweeps = 100 * k

    # Work on rows of a^T so the rotated vectors are contiguous in memory.
    w = np.array(a.T, order="C")
    v = np.eye(k) if compute_uv else None
    _jacobi(w, v, max_sweeps)

    sigma = np.sqrt(np.einsum("ij,ij->i", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    if not compute_uv:
        return None, sigma, None, transposed
    w, v = w[order], v[order]
    u = np.zeros((rows, k))
    nz = sigma > 0
    u[:, nz] = (w[nz] / sigma[nz, None]).T
    return u, sigma, v, transposed


def svd(a, max_sweeps: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Parameters
    ----------
    a : (m, n) array_like
    max_sweeps : int, optional
        Sweep cap; defaults to ``100 * min(m, n)``.

    Returns
    -------
    u : (m, k) ndarray
    s : (k,) ndarray
        Non-negative and non-increasing, ``k = min(m, n)``.
    vt : (k, n) ndarray

    Raises
    ------
    NumericalError
        If the columns are not mutually orthogonal after ``max_sweeps``.
    """
    u, s, vt, transposed = _svd(a, max_sweeps, compute_uv=True)
    if transposed:
        return vt.T, s, u.T
    return u, s, vt


def svd_values(a) -> np.ndarray:
    """Singular values of ``a`` in non-increasing order."""
    return _svd(a, None, compute_uv=False)[1]


def pinv(a, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Moore-Penrose pseudo-inverse, zeroing singular values below ``rcond * s_max``."""
    if not rcond > 0:
        raise ValueError(f"pinv: rcond must be positive, got {rcond}")
    u, s, vt = svd(a)
    if s.size == 0:
        return np.zeros((vt.shape[1], u.shape[0]))
    cutoff = rcond * s[0]
    inv = np.zeros_like(s)
    keep = s > cutoff
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


def khatri_rao(a, b) -> np.ndarray:
    """Column-wise Kronecker product; row ``i * b.rows + j`` is ``a[i] * b[j]``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"khatri_rao: column counts {a.shape[1]} != {b.shape[1]}")
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization in the Kolda-Bader convention.

    Column index of entry ``(i0, i1, i2)`` runs over the two remaining
    modes with the lower-numbered one varying fastest, so that
    ``unfold(t, 0) == A @ khatri_rao(C, B).T`` for ``t = [[A, B, C]]``.
    """
    if mode not in (0, 1, 2):
        raise ValueError(f"unfold: mode must be 0, 1 or 2, got {mode!r}")
    t = as_tensor3(t)
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1, order="F")


def fold(m, mode: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    if mode not in (0, 1, 2):
        raise ValueError(f"fold: mode must be 0, 1 or 2, got {mode!r}")
    m = np.asarray(m, dtype=np.float64)
    moved = [shape[mode]] + [shape[i] for i in range(3) if i != mode]
    if m.shape != (moved[0], moved[1] * moved[2]):
        raise ShapeError(f"fold: matrix {m.shape} does not match tensor {shape}")
    return np.ascontiguousarray(np.moveaxis(m.reshape(moved, order="F"), 0, mode))


def product_singular_values(a, b) -> np.ndarray:
    """Singular values of ``a @ b.T`` without forming the product.

    With thin SVDs ``a = Ua Sa Va^T`` and ``b = Ub Sb Vb^T`` the product is
    ``Ua (Sa Va^T Vb Sb) Ub^T``; the outer factors have orthonormal columns,
    so only the small core needs decomposing.  The result is zero-padded to
    ``min(a.rows, b.rows)`` entries.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"product_singular_values: {a.shape} x {b.shape}^T")
    n = min(a.shape[0], b.shape[0])
    _, sa, vat = svd(a)
    _, sb, vbt = svd(b)
    core = (sa[:, None] * vat) @ (vbt.T * sb)
    s = svd_values(core)
    out = np.zeros(n)
    m = min(n, s.size)
    out[:m] = s[:m]
    return out
