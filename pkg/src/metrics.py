"""
Shared numeric utilities: Gaussian densities, small symmetric eigen problems,
log-determinants with eigenvalue clipping, and the distance/uncertainty/error
metrics used by bayes_grid and hybrid.

Only dense small matrices are handled here (parameter dimension at most 64).
"""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from src.errors import NumericalFailureError, UndefinedRelativeErrorError

ASYMMETRY_TOL = 1e-12
MAX_DIM = 64


@dataclass(frozen=True)
class SymMatrix:
    """Dense symmetric matrix; symmetrized on construction."""

    values: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.values, dtype=float))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"SymMatrix needs a square matrix, got shape {m.shape}")
        if m.shape[0] > MAX_DIM:
            raise ValueError(f"SymMatrix dimension {m.shape[0]} exceeds {MAX_DIM}")
        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
        if asym > ASYMMETRY_TOL * scale:
            raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
        object.__setattr__(self, "values", 0.5 * (m + m.T))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.values))


@dataclass(frozen=True)
class JitterPolicy:
    """
    Regularization for near-singular ensemble covariances.

    The floor is rel_jitter * tr(M) / d. Jitter of that size is added when the
    condition number exceeds max_condition; log-determinants clip eigenvalues
    at the floor.
    """

    rel_jitter: float = 1e-8
    max_condition: float = 1e12

    def floor(self, m: SymMatrix) -> float:
        return self.rel_jitter * m.trace / m.dim


DEFAULT_JITTER = JitterPolicy()


@dataclass(frozen=True)
class LogDet:
    value: float
    clipped: int


def sym_eigvals(m: SymMatrix) -> np.ndarray:
    """Real eigenvalues in ascending order."""
    return np.linalg.eigvalsh(m.values)


def condition_number(m: SymMatrix) -> float:
    lam = sym_eigvals(m)
    if lam[0] <= 0.0:
        return np.inf
    return float(lam[-1] / lam[0])


def logdet_spd(m: SymMatrix, floor: float | None = None, policy: JitterPolicy = DEFAULT_JITTER) -> LogDet:
    """
    Sum of logs of the eigenvalues, clipped from below at the jitter floor.

    A negative eigenvalue larger in magnitude than the floor means the matrix
    is not PSD and is reported as a numerical failure.
    """
    if floor is None:
        floor = policy.floor(m)
    if not floor > 0.0:
        raise NumericalFailureError("log-determinant undefined: clip floor is not positive (zero-trace matrix)")
    lam = sym_eigvals(m)
    if lam[0] < -floor:
        raise NumericalFailureError(f"matrix is not PSD: smallest eigenvalue {lam[0]:.3e} below -{floor:.3e}")
    clipped = int(np.count_nonzero(lam < floor))
    return LogDet(value=float(np.sum(np.log(np.maximum(lam, floor)))), clipped=clipped)


def clipped_inverse(m: SymMatrix, floor: float) -> np.ndarray:
    """
    Inverse restricted to eigen-directions above the floor.

    This is the derivative of the clipped log-determinant with respect to m,
    so values and gradients stay consistent when clipping is active.
    """
    lam, vec = np.linalg.eigh(m.values)
    inv = np.where(lam >= floor, 1.0 / np.maximum(lam, floor), 0.0)
    return (vec * inv) @ vec.T


def gaussian_density(y: float | np.ndarray, mean: float | np.ndarray, var: float) -> np.ndarray:
    return stats.norm.pdf(y, loc=mean, scale=np.sqrt(var))


def gaussian_log_density(y: float | np.ndarray, mean: float | np.ndarray, var: float) -> np.ndarray:
    return stats.norm.logpdf(y, loc=mean, scale=np.sqrt(var))


def map_distance(estimate: tuple[float, float], truth: tuple[float, float]) -> float:
    return float(np.hypot(estimate[0] - truth[0], estimate[1] - truth[1]))


def equivalent_std(cov: SymMatrix) -> float:
    """(λ1 λ2)^(1/4) for a 2x2 covariance; tiny negative round-off is clipped to zero."""
    lam = np.maximum(sym_eigvals(cov), 0.0)
    return float(np.prod(lam) ** (1.0 / (2 * cov.dim)))


def mean_squared_error(field: np.ndarray, reference: np.ndarray) -> float:
    return float(np.mean((np.asarray(field) - np.asarray(reference)) ** 2))


def relative_error(field: np.ndarray, reference: np.ndarray) -> float:
    denom = float(np.sum(np.abs(reference)))
    if denom == 0.0:
        raise UndefinedRelativeErrorError("relative error undefined: reference field is identically zero")
    return float(np.sum(np.abs(np.asarray(field) - np.asarray(reference))) / denom)
