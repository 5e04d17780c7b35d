"""Exact ZCA whitening, used only as a reference for the learned rule."""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, symmetric_eigh


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ZcaTransform:
    mean: np.ndarray
    matrix: np.ndarray
    eigen_floor: float


def fit_zca(x: np.ndarray, eigen_floor: float = 1e-10) -> ZcaTransform:
    """Fit the symmetric whitener ``U diag(w)^-1/2 U^T`` to a ``d x n`` batch.

    ``eigen_floor`` is relative to the largest covariance eigenvalue; any
    eigenvalue below it is treated as rank deficiency.
    """
    if x.ndim != 2:
        raise ShapeError(f"expected a d x n batch, got shape {x.shape}")
    x = x.astype(np.float64)
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    cov = xc @ xc.T / x.shape[1]
    w, u = symmetric_eigh(cov)
    if w[0] <= 0 or w[-1] < eigen_floor * w[0]:
        raise RankDeficientError(
            f"covariance eigenvalue {w[-1]:.3e} is below the floor {eigen_floor:.1e} x {w[0]:.3e}"
        )
    matrix = (u / np.sqrt(w)) @ u.T
    return ZcaTransform(mean, 0.5 * (matrix + matrix.T), eigen_floor)


def apply_zca(t: ZcaTransform, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[0] != t.matrix.shape[0]:
        raise ShapeError(f"expected {t.matrix.shape[0]} rows, got shape {x.shape}")
    return t.matrix @ (x - t.mean[:, None])
