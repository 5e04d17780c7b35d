"""Dense linear-algebra substrate.

Tensors are plain numpy arrays. This module adds the shape/finiteness
contracts the rest of the package relies on, plus a cyclic Jacobi
eigensolver for small symmetric matrices (used by the ZCA comparator).
"""

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ConvergenceError(RuntimeError):
    pass


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    a = np.array(data, dtype=dtype)
    if a.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {a.dtype}; use float32 or float64")
    check_finite(a)
    return a


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with shape and finiteness checks."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def symmetric_eigh(s, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and eigenvectors as orthonormal columns, so that
    ``s ~= U @ diag(w) @ U.T``. Computed in float64 regardless of input dtype.
    """
    a = np.array(s, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    check_finite(a, "eigensolver input")
    scale = np.abs(a).max() if a.size else 0.0
    if scale > 0 and np.abs(a - a.T).max() > 1e-9 * max(scale, 1.0):
        raise ValueError("matrix is not symmetric within tolerance")
    a = 0.5 * (a + a.T)
    d = a.shape[0]
    v = np.eye(d)
    if d < 2 or scale == 0:
        return _sorted(np.diag(a).copy(), v)

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            return _sorted(np.diag(a).copy(), v)
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                # A <- J^T A J for the rotation in the (p, q) plane
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (d={d})")


def _sorted(w, v):
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]
