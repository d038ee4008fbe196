"""Sampled-mean instability induced by traps aligned with the constant direction.

For a shuffled layer A (N x M, N >= M after orientation) and a trap eigenpair
(lam, v) of X = A^T A / N with eta = |<v, 1/sqrt(M)>|, the row means r_i obey

    mean_i r_i^2 >= eta^2 lam / M,  so  Var_i(r_i) >= eta^2 lam / M - rbar^2,

and the variance of the sampled block mean mu_{I,J} is at least Var_i(r_i) for
every subset size s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError, NotNormalized, ShapeMismatch
from .tensor_store import WeightMatrix
from .traps import TrapRecord

DEFAULT_TRIALS = 10_000
_TOL = 1e-9


def constant_overlap(v, tol: float = 1e-6) -> float:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > tol:
        raise NotNormalized(f"vector norm is {norm}, expected 1")
    return abs(float(np.sum(v))) / math.sqrt(v.size)


class VarianceEstimate(NamedTuple):
    value: float
    stderr: float


@dataclass
class MeanInstabilityReport:
    layer_id: str
    eta: float
    lambda_trap: float
    row_mean_sq_avg: float
    bar_r: float
    bound: float
    row_mean_variance: float
    sampled_variance: dict[int, VarianceEstimate] = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.row_mean_variance - self.bound

    def to_json(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "eta": self.eta,
            "lambda_trap": self.lambda_trap,
            "row_mean_sq_avg": self.row_mean_sq_avg,
            "bar_r": self.bar_r,
            "bound": self.bound,
            "row_mean_variance": self.row_mean_variance,
            "sampled_variance": {
                str(s): {"value": est.value, "stderr": est.stderr} for s, est in self.sampled_variance.items()
            },
        }


def _oriented_for(A: WeightMatrix, length: int) -> np.ndarray:
    # the trap vector lives on the short side; orient A so its columns match
    if A.cols == length:
        return A.data
    if A.rows == length:
        return A.data.T
    raise ShapeMismatch(f"trap eigenvector has length {length}, matrix {A.layer_id!r} is {A.shape}")


def theorem2_bound(
    A: WeightMatrix,
    trap: TrapRecord,  # anything with .eigenvector and .lambda_trap
    sample_sizes=(),
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
) -> MeanInstabilityReport:
    """Evaluate both row-mean inequalities for one trap of the shuffled matrix ``A``.

    Raises AssertionError if either inequality is violated beyond 1e-9 (relative).
    """
    v = np.asarray(trap.eigenvector, dtype=np.float64)
    data = _oriented_for(A, v.size)
    N, M = data.shape
    eta = constant_overlap(v)
    r = data.mean(axis=1)
    bar_r = float(r.mean())
    sq_avg = float(np.mean(r**2))
    var_r = float(np.mean((r - bar_r) ** 2))
    spike = eta**2 * trap.lambda_trap / M
    bound = spike - bar_r**2

    scale = _TOL * max(1.0, abs(spike), sq_avg)
    if sq_avg < spike - scale:
        raise AssertionError(f"mean r^2 {sq_avg} < eta^2 lam / M {spike}")
    if var_r < bound - scale:
        raise AssertionError(f"Var(r) {var_r} < bound {bound}")

    oriented = WeightMatrix(A.layer_id, data, A.source)
    sampled = {
        int(s): sampled_mean_variance(oriented, int(s), trials, seed + i) for i, s in enumerate(sample_sizes)
    }
    return MeanInstabilityReport(A.layer_id, eta, trap.lambda_trap, sq_avg, bar_r, bound, var_r, sampled)


def sampled_mean_variance(A: WeightMatrix, s: int, trials: int = DEFAULT_TRIALS, seed: int = 0) -> VarianceEstimate:
    """Monte-Carlo Var(mu_{I,J} | A) with I a uniform row and J a uniform s-subset of columns.

    Returns the unbiased sample variance over ``trials`` draws and its standard
    error, sqrt((m4 - (n-3)/(n-1) s^4) / n).
    """
    N, M = A.shape
    if not 1 <= s <= M:
        raise DomainError(f"s must lie in [1, {M}], got {s}")
    if trials < 100:
        raise DomainError(f"trials must be >= 100, got {trials}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(s)]))
    rows = rng.integers(0, N, size=trials)
    mu = np.empty(trials)
    chunk = max(1, 2_000_000 // M)
    for start in range(0, trials, chunk):
        stop = min(trials, start + chunk)
        if s == M:
            mu[start:stop] = A.data[rows[start:stop]].mean(axis=1)
            continue
        # argpartition of iid uniforms gives uniform s-subsets without replacement
        keys = rng.random((stop - start, M))
        cols = np.argpartition(keys, s - 1, axis=1)[:, :s]
        mu[start:stop] = A.data[rows[start:stop, None], cols].mean(axis=1)
    var = float(np.var(mu, ddof=1))
    dev = mu - mu.mean()
    m4 = float(np.mean(dev**4))
    se2 = (m4 - (trials - 3) / (trials - 1) * var**2) / trials
    return VarianceEstimate(var, math.sqrt(max(se2, 0.0)))


def exact_sampled_mean_variance(A: WeightMatrix, s: int) -> float:
    """Closed form of Var(mu_{I,J} | A) via the law of total variance.

    Var = Var_i(r_i) + mean_i[ S_i^2 / s * (M - s) / (M - 1) ] where S_i^2 is the
    population variance of row i (finite-population correction for sampling
    without replacement).
    """
    N, M = A.shape
    if not 1 <= s <= M:
        raise DomainError(f"s must lie in [1, {M}], got {s}")
    r = A.data.mean(axis=1)
    between = float(np.var(r))
    if M == 1:
        return between
    within = float(np.mean(A.data.var(axis=1))) / s * (M - s) / (M - 1)
    return between + within
