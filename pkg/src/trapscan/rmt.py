"""Empirical spectra, the Marchenko-Pastur law, and edge thresholds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, FitError, NumericalError
from .tensor_store import WeightMatrix

BULK_QUANTILE = 0.99
MIN_FIT_EIGENVALUES = 10
DEFAULT_C_TW = 4.0

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class Esd:
    """Eigenvalues of X = A^T A / N for the long-side-first orientation A (N >= M)."""

    eigenvalues: np.ndarray
    N: int
    M: int
    transposed: bool = False

    @property
    def Q(self) -> float:
        return self.N / self.M


@dataclass(frozen=True)
class MPFit:
    sigma2: float
    Q: float
    lambda_minus: float
    lambda_plus: float
    ks_distance: float
    bulk_fraction_used: float

    def to_json(self) -> dict:
        return {
            "sigma2": self.sigma2,
            "Q": self.Q,
            "lambda_minus": self.lambda_minus,
            "lambda_plus": self.lambda_plus,
            "ks_distance": self.ks_distance,
            "bulk_fraction_used": self.bulk_fraction_used,
        }


@dataclass(frozen=True)
class EdgeThreshold:
    delta_tw: float
    c_tw: float
    lambda_plus: float

    @property
    def threshold(self) -> float:
        return self.lambda_plus + self.delta_tw

    def to_json(self) -> dict:
        return {"delta_tw": self.delta_tw, "c_tw": self.c_tw, "threshold": self.threshold}


def oriented(data: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return ``data`` with the long side first, and whether it was transposed."""
    if data.shape[1] > data.shape[0]:
        return data.T, True
    return data, False


def _clamp(evals: np.ndarray) -> np.ndarray:
    evals = evals.copy()
    evals[evals < 1e-12 * evals.max(initial=0.0)] = 0.0
    return evals


def spectrum_and_vectors(data: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Eigenvalues (ascending) and matching unit eigenvectors (columns) of X.

    Computed from the SVD of the oriented matrix: lambda_k = s_k^2 / N, v_k = k-th
    right singular vector.
    """
    A, transposed = oriented(np.asarray(data, dtype=np.float64))
    N, M = A.shape
    if N < 2 or M < 2:
        raise DimensionError(f"need at least 2 rows and 2 columns, got {data.shape}")
    try:
        _, s, vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    order = np.argsort(s, kind="stable")
    evals = _clamp(s[order] ** 2 / N)
    return evals, vt[order].T, transposed


def covariance_spectrum(W: WeightMatrix) -> Esd:
    A, transposed = oriented(W.data)
    N, M = A.shape
    if N < 2 or M < 2:
        raise DimensionError(f"layer {W.layer_id!r}: need at least 2 rows and 2 columns, got {W.shape}")
    try:
        s = np.linalg.svd(A, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"layer {W.layer_id!r}: SVD did not converge: {exc}") from exc
    evals = _clamp(np.sort(s**2 / N))
    evals.setflags(write=False)
    return Esd(evals, N, M, transposed)


def mp_edges(sigma2: float, Q: float) -> tuple[float, float]:
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    if not Q >= 1:
        raise DomainError(f"Q must be >= 1, got {Q}")
    r = Q**-0.5
    return sigma2 * (1.0 - r) ** 2, sigma2 * (1.0 + r) ** 2


def mp_density(lam, fit: MPFit):
    """Marchenko-Pastur density; zero outside [lambda_minus, lambda_plus]."""
    lam = np.asarray(lam, dtype=np.float64)
    lo, hi = fit.lambda_minus, fit.lambda_plus
    inside = (lam > lo) & (lam < hi)
    safe = np.where(inside, lam, 1.0)
    out = fit.Q / (2.0 * np.pi * fit.sigma2) * np.sqrt(np.maximum((hi - safe) * (safe - lo), 0.0)) / safe
    out = np.where(inside, out, 0.0)
    return float(out) if out.ndim == 0 else out


def _mp_antiderivative(x, a, b):
    # integral of sqrt((b-x)(x-a))/x; atan2 forms stay accurate at the edges
    R = np.sqrt(np.maximum((b - x) * (x - a), 0.0))
    g = R + 0.5 * (a + b) * np.arctan2(2.0 * x - a - b, 2.0 * R)
    if a > 0:
        rab = math.sqrt(a * b)
        g = g - rab * np.arctan2((a + b) * x - 2.0 * a * b, 2.0 * rab * R)
    return g


def mp_cdf(lam, sigma2: float, Q: float):
    """Closed-form Marchenko-Pastur CDF (no atom at zero since Q >= 1)."""
    lam = np.asarray(lam, dtype=np.float64)
    y = 1.0 / Q
    a, b = (1.0 - math.sqrt(y)) ** 2, (1.0 + math.sqrt(y)) ** 2
    x = np.clip(lam / sigma2, a, b)
    g0 = _mp_antiderivative(np.float64(a), a, b)
    F = (_mp_antiderivative(x, a, b) - g0) / (2.0 * np.pi * y)
    F = np.clip(F, 0.0, 1.0)
    F = np.where(lam / sigma2 >= b, 1.0, F)
    return float(F) if F.ndim == 0 else F


def _ks_objective(bulk: np.ndarray, M: int, Q: float):
    hi = np.arange(1, bulk.size + 1) / M
    lo = hi - 1.0 / M

    def ks(log_s2: float) -> float:
        F = mp_cdf(bulk, math.exp(log_s2), Q)
        return float(max(np.max(hi - F), np.max(F - lo)))

    return ks


def _golden_min(f, a: float, b: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_mp(esd: Esd, bulk_quantile: float = BULK_QUANTILE, grid_points: int = 241) -> MPFit:
    """Fit sigma^2 by minimising the KS distance over the bulk of the spectrum.

    The largest ``1 - bulk_quantile`` share of eigenvalues is left out so that
    outliers cannot drag the fit. The empirical CDF keeps its full-sample ranks
    (i / M), so excluding the top tail does not bias the bulk comparison.
    """
    evals = np.asarray(esd.eigenvalues, dtype=np.float64)
    M = evals.size
    if M < MIN_FIT_EIGENVALUES:
        raise FitError(f"need at least {MIN_FIT_EIGENVALUES} eigenvalues, got {M}")
    k = int(math.ceil(bulk_quantile * M - 1e-9))
    if k < MIN_FIT_EIGENVALUES:
        raise FitError(f"bulk has {k} eigenvalues after trimming; need {MIN_FIT_EIGENVALUES}")
    Q = esd.Q

    # work in units of a robust scale so the search is scale-free
    scale = float(np.median(evals))
    if not scale > 0:
        scale = float(np.mean(evals))
    if not (scale > 0 and math.isfinite(scale)):
        raise FitError("spectrum has zero trace")
    bulk = evals[:k] / scale

    ks = _ks_objective(bulk, M, Q)
    grid = np.linspace(math.log(0.01), math.log(100.0), grid_points)
    values = np.array([ks(g) for g in grid])
    i = int(np.argmin(values))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid_points - 1)]
    best = _golden_min(ks, lo, hi)
    if ks(best) > values[i]:
        best = grid[i]
    sigma2 = math.exp(best) * scale
    lam_minus, lam_plus = mp_edges(sigma2, Q)
    return MPFit(sigma2, Q, lam_minus, lam_plus, ks(best), k / M)


def tw_delta(fit: MPFit, N: int, c_tw: float = DEFAULT_C_TW) -> EdgeThreshold:
    """Finite-size largest-eigenvalue fluctuation scale above the MP edge.

    delta = c_tw * sigma^2 * N^(-2/3) * (1 + Q^(-1/2)) * (1 + Q^(1/2))^(1/3), the
    Tracy-Widom scaling for sample covariance matrices normalised by 1/N.
    """
    if N < 2:
        raise DomainError(f"N must be >= 2, got {N}")
    if not c_tw > 0:
        raise DomainError(f"c_tw must be positive, got {c_tw}")
    if not fit.sigma2 > 0 or not fit.Q >= 1:
        raise DomainError("invalid MP fit")
    Q = fit.Q
    delta = c_tw * fit.sigma2 * N ** (-2.0 / 3.0) * (1.0 + Q**-0.5) * (1.0 + Q**0.5) ** (1.0 / 3.0)
    return EdgeThreshold(delta, c_tw, fit.lambda_plus)
