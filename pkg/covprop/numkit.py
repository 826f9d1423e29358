"""Small dense linear algebra and special functions used across covprop.

All values are 64-bit floats. Matrices and vectors are plain ``numpy.ndarray``
objects; the helpers below add the shape/finiteness checks and the structured
errors the rest of the package relies on.
"""

import logging
from typing import Union

import numpy as np
from scipy import optimize, special, stats

from constants.common import SYMMETRY_TOL
from covprop.errors import DomainError, ShapeError, ValidationFailure

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, list, tuple, float]

JACOBI_MAX_N = 64  # larger matrices go to LAPACK
JACOBI_MAX_SWEEPS = 50
_SQRT2 = np.sqrt(2.0)


def as_matrix(value: ArrayLike, name: str = "matrix") -> np.ndarray:
    matrix = np.asarray(value, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValidationFailure(f"{name} must be 2-D, got {matrix.ndim}-D")
    if not np.all(np.isfinite(matrix)):
        raise ValidationFailure(f"{name} has non-finite entries")
    return matrix


def as_vector(value: ArrayLike, name: str = "vector") -> np.ndarray:
    vector = np.asarray(value, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vector)):
        raise ValidationFailure(f"{name} has non-finite entries")
    return vector


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a shape check that names both operands."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} by {b.shape}", (a.shape[-1],), (b.shape[0],))
    return a @ b


def max_asymmetry(m: np.ndarray) -> float:
    return float(np.max(np.abs(m - m.T))) if m.size else 0.0


def _jacobi_eigenvalues(m: np.ndarray) -> np.ndarray:
    """Cyclic Jacobi rotations; returns the diagonal once off-diagonal mass vanishes."""
    a = np.array(m, dtype=np.float64, copy=True)
    n = a.shape[0]
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n)
    for _ in range(JACOBI_MAX_SWEEPS):
        off_diagonal = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off_diagonal <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
    return np.diag(a).copy()


def eigenvalues_sym(m: np.ndarray) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, ascending."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError("symmetric eigensolve", (m.shape[0], m.shape[0]), m.shape)
    asymmetry = max_asymmetry(m)
    if asymmetry > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(m)))):
        raise DomainError(f"matrix is not symmetric: max |m - m^T| = {asymmetry:.3e}")
    m = 0.5 * (m + m.T)
    if m.shape[0] <= JACOBI_MAX_N:
        return np.sort(_jacobi_eigenvalues(m))
    return np.linalg.eigvalsh(m)


def min_eigenvalue_sym(m: np.ndarray) -> float:
    return float(eigenvalues_sym(m)[0]) if np.asarray(m).size else 0.0


def erf(x: ArrayLike) -> Union[float, np.ndarray]:
    return special.erf(x)


def std_normal_cdf(x: ArrayLike) -> Union[float, np.ndarray]:
    """Phi(x) through the complementary error function, accurate in both tails."""
    return 0.5 * special.erfc(-np.asarray(x, dtype=np.float64) / _SQRT2)


def std_normal_pdf(x: ArrayLike) -> Union[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def std_normal_cdf_inv(p: ArrayLike) -> Union[float, np.ndarray]:
    """Phi^-1(p) for p strictly inside (0, 1); one Newton step polishes the quantile."""
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0) or np.any(~np.isfinite(p_arr)):
        raise DomainError(f"Phi^-1 is defined on the open interval (0, 1), got {p}")
    z = special.ndtri(p_arr)
    density = std_normal_pdf(z)
    z = np.where(density > 0.0, z - (std_normal_cdf(z) - p_arr) / np.where(density > 0.0, density, 1.0), z)
    return float(z) if np.ndim(z) == 0 else z


def binom_lower_confidence(successes: int, trials: int, alpha: float) -> float:
    """One-sided Clopper-Pearson lower bound on a binomial success probability.

    Returns the p at which P[Bin(trials, p) >= successes] equals ``alpha``, located
    by bisection on the binomial tail.
    """
    if trials <= 0:
        raise ValidationFailure("binomial confidence bound needs at least one trial")
    if not 0 <= successes <= trials:
        raise ValidationFailure(f"successes must lie in [0, {trials}], got {successes}")
    if not 0.0 < alpha < 1.0:
        raise ValidationFailure(f"alpha must lie in (0, 1), got {alpha}")
    if successes == 0:
        return 0.0

    def tail_minus_alpha(p: float) -> float:
        return float(stats.binom.sf(successes - 1, trials, p)) - alpha

    return float(optimize.bisect(tail_minus_alpha, 0.0, 1.0, xtol=1e-15, maxiter=200))


def seeded_rng(seed: int, *substreams: int) -> np.random.Generator:
    """Counter-based (Philox) generator; normals come from numpy's ziggurat sampler.

    ``substreams`` derive independent, reproducible streams from the same seed.
    """
    entropy = [int(seed) % 2**64, *(int(s) % 2**64 for s in substreams)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def frobenius_rel_error(actual: np.ndarray, expected: np.ndarray) -> float:
    denominator = np.linalg.norm(expected)
    difference = np.linalg.norm(np.asarray(actual) - np.asarray(expected))
    return float(difference / denominator) if denominator > 0 else float(difference)


def check_covariance(cov: np.ndarray, tol: float, where: str = "covariance") -> None:
    """Raise when ``cov`` is asymmetric or has an eigenvalue below ``-tol``."""
    asymmetry = max_asymmetry(cov)
    if asymmetry > SYMMETRY_TOL * max(1.0, float(np.max(np.abs(cov))) if cov.size else 1.0):
        raise DomainError(f"{where} is not symmetric (max asymmetry {asymmetry:.3e})")
    smallest = min_eigenvalue_sym(cov)
    if smallest < -tol * max(1.0, float(np.max(np.abs(cov))) if cov.size else 1.0):
        raise DomainError(f"{where} is not positive semidefinite (min eigenvalue {smallest:.3e})")
