"""Learned input decorrelation.

Each decorrelated layer owns a square matrix ``R`` that maps its correlated
input ``z`` to ``x = R z``. ``R`` starts at the identity and is trained by a
local rule, independent of the task loss::

    R <- R - epsilon * <(1 - kappa) C + kappa V> R

where, per sample, ``C = x x^T - diag(x_i^2)`` and ``V = diag(x_i^2 - 1)``.
``kappa = 0`` only removes cross-correlations, ``kappa = 1`` only pushes
variances towards one, and values in between whiten.

Column convention: every batch matrix here is ``d x n`` with one sample (or
image patch) per column.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import ShapeError, matmul


class DivergenceError(FloatingPointError):
    """Raised when a decorrelation or optimizer update produces NaN/Inf."""


@dataclass(frozen=True)
class DecorrConfig:
    kappa: float = 0.0
    epsilon: float = 1e-3
    sample_fraction: float = 0.1
    normalize_by_dim: bool = False

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")


@dataclass(frozen=True)
class DecorrelationState:
    r: np.ndarray
    config: DecorrConfig = field(default_factory=DecorrConfig)
    name: str = "layer"

    @property
    def d(self) -> int:
        return self.r.shape[0]

    @classmethod
    def identity(cls, d: int, config: DecorrConfig | None = None, dtype=np.float32, name: str = "layer"):
        return cls(np.eye(d, dtype=dtype), config or DecorrConfig(), name)


@dataclass(frozen=True)
class CorrelationStats:
    """Batch means of the per-sample ``C`` and ``V`` matrices.

    ``sample_loss_terms`` keeps the per-sample ``(Tr(CC^T), Tr(VV^T))``
    averages, which is what the layer loss is built from (the trace of the
    averaged matrices would be a different quantity).
    """

    c_mean: np.ndarray
    v_mean: np.ndarray
    n_samples: int
    sample_loss_terms: tuple[float, float]


def apply_decorrelation(state: DecorrelationState, z: np.ndarray) -> np.ndarray:
    if z.ndim != 2 or z.shape[0] != state.d:
        raise ShapeError(f"expected input with {state.d} rows, got {z.shape}")
    return matmul(state.r, z)


def correlation_stats(x: np.ndarray) -> CorrelationStats:
    if x.ndim != 2:
        raise ShapeError(f"expected a d x n batch, got shape {x.shape}")
    n = x.shape[1]
    if n < 1:
        raise ValueError("correlation_stats needs at least one sample")
    xd = np.ascontiguousarray(x, dtype=np.float64)  # fixed layout keeps reductions reproducible
    m = xd @ xd.T / n
    sq_mean = np.diag(m).copy()
    c_mean = m - np.diag(sq_mean)
    v_mean = np.diag(sq_mean - 1.0)

    sq = xd * xd
    norm2 = sq.sum(axis=0)
    # Tr(CC^T) = sum_{i != j} x_i^2 x_j^2 = |x|^4 - sum_i x_i^4
    tr_cc = float(np.mean(norm2 * norm2 - (sq * sq).sum(axis=0)))
    tr_vv = float(np.mean(((sq - 1.0) ** 2).sum(axis=0)))
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    return CorrelationStats(c_mean.astype(dt), v_mean.astype(dt), n, (tr_cc, tr_vv))


def decorrelation_loss(stats: CorrelationStats, kappa: float) -> float:
    tr_cc, tr_vv = stats.sample_loss_terms
    return (1.0 - kappa) * tr_cc + kappa * tr_vv


def update_direction(stats: CorrelationStats, config: DecorrConfig) -> np.ndarray:
    g = (1.0 - config.kappa) * stats.c_mean + config.kappa * stats.v_mean
    if config.normalize_by_dim:
        g = g / stats.c_mean.shape[0]
    return g


def subsample_columns(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted column indices of a uniform subsample without replacement."""
    k = max(1, int(round(fraction * n)))
    if k >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def update_decorrelation(
    state: DecorrelationState, z: np.ndarray, rng: np.random.Generator | None = None
) -> DecorrelationState:
    """One step of the decorrelation rule, estimated on a column subsample of ``z``."""
    if z.ndim != 2 or z.shape[0] != state.d:
        raise ShapeError(f"expected input with {state.d} rows, got {z.shape}")
    n = z.shape[1]
    if n < 1:
        raise ValueError("update_decorrelation needs at least one sample")
    cfg = state.config
    if cfg.sample_fraction < 1.0:
        if rng is None:
            raise ValueError("a random generator is required when sample_fraction < 1")
        z = z[:, subsample_columns(n, cfg.sample_fraction, rng)]
    with np.errstate(over="ignore", invalid="ignore"):
        x = state.r @ z
        g = update_direction(correlation_stats(x), cfg).astype(state.r.dtype, copy=False)
        r_new = state.r - cfg.epsilon * (g @ state.r)
    if not np.isfinite(r_new).all():
        raise DivergenceError(
            f"decorrelation matrix of {state.name} became non-finite (epsilon={cfg.epsilon})"
        )
    return replace(state, r=r_new)


def fuse(w: np.ndarray, state: DecorrelationState) -> np.ndarray:
    """Condensed weight matrix ``A = W R``."""
    if w.ndim != 2 or w.shape[1] != state.d:
        raise ShapeError(f"weights {w.shape} do not match decorrelation dimension {state.d}")
    return matmul(w, state.r)


def correlation_metric(stats: CorrelationStats) -> float:
    """Mean squared value of the strictly lower triangle of the mean C matrix."""
    d = stats.c_mean.shape[0]
    if d < 2:
        raise ValueError("correlation metric needs at least two dimensions")
    rows, cols = np.tril_indices(d, -1)
    low = stats.c_mean[rows, cols].astype(np.float64)
    return float(np.mean(low * low))
