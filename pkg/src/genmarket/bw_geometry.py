"""Exact 2-Wasserstein (Bures-Wasserstein) geometry on nonsingular Gaussians.

A Gaussian with nonsingular covariance is identified with a point of a
smooth manifold through the global chart

    (mu, sigma) -> Normal(mu, expm(sym(sigma))),

where ``sym`` packs a vector of length D(D+1)/2 into a symmetric D x D
matrix (row-major upper triangle) and ``expm`` is the matrix exponential.
The geodesic distance of this geometry is the 2-Wasserstein distance,
available in closed form (Gelbrich):

    W2^2 = ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S2^{1/2} S1 S2^{1/2})^{1/2}).

All matrix functions (sqrt / exp / log) are computed through one primitive,
the symmetric eigendecomposition, which preserves symmetry exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, NearSingularError, NumericError

__all__ = [
    "GaussianMeasure",
    "ChartCoords",
    "sym_embed",
    "sym_extract",
    "chart_decode",
    "chart_encode",
    "spd_sqrt",
    "matrix_exp",
    "matrix_log",
    "w2_distance",
]

# Relative eigenvalue floor below which an SPD matrix counts as singular.
EIG_FLOOR = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


def _check_symmetric(s: np.ndarray, what: str) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"{what} must be a square matrix, got shape {s.shape}")
    scale = 1.0 + (np.abs(s).max() if s.size else 0.0)
    if np.abs(s - s.T).max() > 1e-12 * scale:
        raise DomainError(f"{what} is not symmetric (asymmetry {np.abs(s - s.T).max():.3e})")
    return 0.5 * (s + s.T)


@dataclass(frozen=True)
class GaussianMeasure:
    """A D-dimensional Gaussian with symmetric positive definite covariance.

    Immutable after construction; safe to share across threads.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1:
            raise DimensionError(f"mean must be a vector, got shape {mean.shape}")
        cov = _check_symmetric(self.cov, "covariance")
        if cov.shape[0] != mean.shape[0]:
            raise DimensionError(
                f"mean has length {mean.shape[0]} but covariance is {cov.shape[0]}x{cov.shape[1]}"
            )
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise NumericError("Gaussian parameters contain non-finite entries")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise DomainError("covariance is not positive definite") from None
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "cov", _readonly(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class ChartCoords:
    """Global chart coordinates: mean vector plus packed log-covariance.

    ``sigma_coords`` has length D(D+1)/2; every real value is admissible.
    """

    mu: np.ndarray
    sigma_coords: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sc = np.atleast_1d(np.asarray(self.sigma_coords, dtype=float))
        if mu.ndim != 1 or sc.ndim != 1:
            raise DimensionError("chart coordinates must be flat vectors")
        d = mu.shape[0]
        if sc.shape[0] != d * (d + 1) // 2:
            raise DimensionError(
                f"sigma_coords has length {sc.shape[0]}, expected {d * (d + 1) // 2} for dimension {d}"
            )
        object.__setattr__(self, "mu", _readonly(mu))
        object.__setattr__(self, "sigma_coords", _readonly(sc))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def as_vector(self) -> np.ndarray:
        """Concatenated (mu, sigma_coords), the raw regression target."""
        return np.concatenate([self.mu, self.sigma_coords])


def _triangular_dim(length: int) -> int:
    """Invert L = D(D+1)/2; raises if L is not a triangular number."""
    d = int((np.sqrt(8 * length + 1) - 1) / 2 + 0.5)
    if d * (d + 1) // 2 != length:
        raise DimensionError(f"vector length {length} is not D(D+1)/2 for any integer D")
    return d


def sym_embed(x: np.ndarray) -> np.ndarray:
    """Pack a length-D(D+1)/2 vector into a symmetric D x D matrix.

    Entries fill the upper triangle row by row: the first row is
    (x1, ..., xD), the second row continues (x2, x_{D+1}, ..., x_{2D-1}),
    and so on; the lower triangle mirrors it. Linear, and inverted exactly
    by :func:`sym_extract`.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise DimensionError(f"expected a flat vector, got shape {x.shape}")
    d = _triangular_dim(x.shape[0])
    s = np.zeros((d, d))
    iu = np.triu_indices(d)
    s[iu] = x
    s = s + s.T - np.diag(np.diag(s))
    return s


def sym_extract(s: np.ndarray) -> np.ndarray:
    """Inverse of :func:`sym_embed`: read the upper triangle row by row."""
    s = _check_symmetric(s, "matrix")
    return s[np.triu_indices(s.shape[0])].copy()


def _eigh_spd(s: np.ndarray, what: str, floor: float = EIG_FLOOR):
    """Eigendecomposition with a relative positive-definiteness gate."""
    evals, evecs = np.linalg.eigh(s)
    top = evals[-1]
    if top <= 0.0 or evals[0] <= floor * top:
        raise NearSingularError(
            f"{what} is not positive definite at floor {floor:g}: "
            f"smallest eigenvalue {evals[0]:.6e} (largest {top:.6e})"
        )
    return evals, evecs


def spd_sqrt(s: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Unique SPD square root of an SPD matrix, via eigendecomposition.

    Eigenvalues at or below ``floor`` times the largest eigenvalue raise
    :class:`NearSingularError` rather than being silently regularized.
    """
    s = _check_symmetric(s, "spd_sqrt input")
    evals, evecs = _eigh_spd(s, "spd_sqrt input", floor)
    root = (evecs * np.sqrt(evals)) @ evecs.T
    return 0.5 * (root + root.T)


def matrix_exp(s: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric matrix; the result is SPD."""
    s = _check_symmetric(s, "matrix_exp input")
    if not np.isfinite(s).all():
        raise NumericError("matrix_exp input contains non-finite entries")
    evals, evecs = np.linalg.eigh(s)
    with np.errstate(over="ignore", invalid="ignore"):  # overflow raised below
        out = (evecs * np.exp(evals)) @ evecs.T
    if not np.isfinite(out).all():
        raise NumericError(
            f"matrix exponential overflowed (largest eigenvalue {evals[-1]:.3e})"
        )
    return 0.5 * (out + out.T)


def matrix_log(s: np.ndarray) -> np.ndarray:
    """Matrix logarithm of an SPD matrix; the result is symmetric."""
    s = _check_symmetric(s, "matrix_log input")
    try:
        evals, evecs = _eigh_spd(s, "matrix_log input")
    except NearSingularError as exc:
        raise DomainError(f"matrix_log requires an SPD input: {exc}") from None
    out = (evecs * np.log(evals)) @ evecs.T
    return 0.5 * (out + out.T)


def chart_decode(coords: ChartCoords) -> GaussianMeasure:
    """Map chart coordinates to the Gaussian Normal(mu, expm(sym(sigma)))."""
    if not (np.isfinite(coords.mu).all() and np.isfinite(coords.sigma_coords).all()):
        raise NumericError("chart coordinates contain non-finite entries")
    return GaussianMeasure(coords.mu, matrix_exp(sym_embed(coords.sigma_coords)))


def chart_encode(g: GaussianMeasure) -> ChartCoords:
    """Inverse chart: mu stays, covariance maps to packed matrix log."""
    return ChartCoords(g.mean, sym_extract(matrix_log(g.cov)))


def w2_distance(g1: GaussianMeasure, g2: GaussianMeasure) -> float:
    """Closed-form 2-Wasserstein distance between two Gaussians.

    The Bures trace term is evaluated through the eigenvalues of
    S2^{1/2} S1 S2^{1/2}, which is PSD in exact arithmetic; eigenvalues
    negative beyond round-off raise :class:`NumericError`. A trace term
    negative within the round-off window (1e-9, scaled by the covariance
    magnitude) is clamped to zero; anything more negative is treated as an
    algebra bug, not noise.
    """
    if g1.dim != g2.dim:
        raise DimensionError(f"dimension mismatch: {g1.dim} vs {g2.dim}")
    dm = g1.mean - g2.mean
    mean_term = float(dm @ dm)

    r2 = spd_sqrt(g2.cov)
    cross = r2 @ g1.cov @ r2
    cross = 0.5 * (cross + cross.T)
    cross_evals = np.linalg.eigvalsh(cross)
    neg_tol = EIG_FLOOR * max(cross_evals[-1], 1.0)
    if cross_evals[0] < -neg_tol:
        raise NumericError(
            f"cross-covariance product has eigenvalue {cross_evals[0]:.3e} < 0"
        )
    cross_evals = np.clip(cross_evals, 0.0, None)

    trace_term = float(np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.sqrt(cross_evals).sum())
    window = 1e-9 * (1.0 + abs(np.trace(g1.cov)) + abs(np.trace(g2.cov)))
    if trace_term < -window:
        raise NumericError(f"Bures trace term {trace_term:.3e} is negative beyond round-off")
    trace_term = max(trace_term, 0.0)
    return float(np.sqrt(mean_term + trace_term))
