"""Correlation-trap detection on entry-wise shuffled layer spectra.

Per replicate: shuffle the entries of W, take the spectrum of X = A^T A / N,
fit a Marchenko-Pastur bulk, and report every eigenvalue above
``lambda_plus + delta_tw`` together with its eigenvector.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, NotNormalized, NumericalError, ZeroTrace
from .rmt import DEFAULT_C_TW, Esd, EdgeThreshold, MPFit, fit_mp, oriented, spectrum_and_vectors, tw_delta
from .tensor_store import WeightMatrix

DEFAULT_REPLICATES = 5


@dataclass(frozen=True)
class ShuffleSeed:
    seed: int
    replicate_index: int = 0

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, self.replicate_index]))


def layer_seed(base_seed: int, layer_id: str) -> int:
    """Per-layer seed from (base_seed, layer id) that does not depend on scan order."""
    ss = np.random.SeedSequence([int(base_seed), zlib.crc32(layer_id.encode("utf-8"))])
    return int(ss.generate_state(1, np.uint64)[0])


def shuffle_permutation(shape: tuple[int, int], seed: ShuffleSeed) -> np.ndarray:
    """Flat permutation p such that W_rand.flat[i] = W.flat[p[i]]."""
    return seed.rng().permutation(shape[0] * shape[1])


def shuffle_entries(W: WeightMatrix, seed: ShuffleSeed) -> WeightMatrix:
    perm = shuffle_permutation(W.shape, seed)
    return W.with_data(W.data.ravel()[perm].reshape(W.shape))


@dataclass(frozen=True)
class Localization:
    ipr: float
    top_k_mass: dict[int, float]
    top_5pct_k: int

    @property
    def top_5pct_mass(self) -> float:
        return self.top_k_mass[self.top_5pct_k]


def localization_metrics(v, tol: float = 1e-6) -> Localization:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > tol:
        raise NotNormalized(f"vector norm is {norm}, expected 1")
    M = v.size
    p = np.sort(v**2)[::-1]
    csum = np.cumsum(p)
    k5 = max(1, math.ceil(0.05 * M - 1e-9))
    ks = sorted({min(1, M), min(5, M), min(k5, M)})
    return Localization(
        ipr=float(np.sum(p**2)),
        top_k_mass={k: float(csum[k - 1]) for k in ks},
        top_5pct_k=min(k5, M),
    )


def condensation_ratio(esd: Esd | np.ndarray) -> float:
    """Largest eigenvalue over the mean eigenvalue."""
    evals = np.asarray(esd.eigenvalues if isinstance(esd, Esd) else esd, dtype=np.float64)
    if evals.size == 0:
        raise ZeroTrace("empty spectrum")
    mean = float(np.mean(evals))
    if not mean > 0:
        raise ZeroTrace("spectrum has zero trace")
    return float(np.max(evals)) / mean


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    return v if v[int(np.argmax(np.abs(v)))] >= 0 else -v


@dataclass(frozen=True, eq=False)
class TrapRecord:
    layer_id: str
    lambda_trap: float
    eigenvector: np.ndarray
    gap_over_edge: float
    threshold: float
    ipr: float
    top_k_mass: dict[int, float]
    top_5pct_mass: float
    replicate_index: int
    shuffle_seed: ShuffleSeed
    transposed: bool = False

    def to_json(self, include_vector: bool = False) -> dict:
        out = {
            "layer_id": self.layer_id,
            "replicate_index": self.replicate_index,
            "lambda_trap": self.lambda_trap,
            "gap_over_edge": self.gap_over_edge,
            "threshold": self.threshold,
            "ipr": self.ipr,
            "top_k_mass": {str(k): m for k, m in self.top_k_mass.items()},
            "top_5pct_mass": self.top_5pct_mass,
        }
        if include_vector:
            out["eigenvector"] = self.eigenvector.tolist()
        return out


@dataclass
class ReplicateResult:
    index: int
    seed: ShuffleSeed
    fit: MPFit | None = None
    edge: EdgeThreshold | None = None
    traps: list[TrapRecord] = field(default_factory=list)
    lambda_max: float | None = None
    condensation: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def count(self) -> int | None:
        return len(self.traps) if self.ok else None


@dataclass
class LayerTrapReport:
    layer_id: str
    shape: tuple[int, int]
    c_tw: float
    base_seed: int
    replicates: list[ReplicateResult]

    @property
    def trap_count_per_replicate(self) -> list[int | None]:
        return [r.count for r in self.replicates]

    @property
    def valid_counts(self) -> list[int]:
        return [r.count for r in self.replicates if r.ok]

    @property
    def mean_count(self) -> float:
        counts = self.valid_counts
        return float(np.mean(counts)) if counts else float("nan")

    @property
    def std_count(self) -> float:
        counts = self.valid_counts
        return float(np.std(counts)) if counts else float("nan")

    @property
    def traps(self) -> list[TrapRecord]:
        return [t for r in self.replicates for t in r.traps]

    @property
    def mp_fits(self) -> list[MPFit | None]:
        return [r.fit for r in self.replicates]

    @property
    def condensation_ratio(self) -> float:
        vals = [r.condensation for r in self.replicates if r.ok]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def failures(self) -> list[dict]:
        return [{"replicate_index": r.index, "error": r.error} for r in self.replicates if not r.ok]

    def to_json(self, include_vectors: bool = False) -> dict:
        def num(x):
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else x

        return {
            "layer_id": self.layer_id,
            "rows": self.shape[0],
            "cols": self.shape[1],
            "replicates": len(self.replicates),
            "c_tw": self.c_tw,
            "base_seed": self.base_seed,
            "trap_count_per_replicate": self.trap_count_per_replicate,
            "mean_count": num(self.mean_count),
            "std_count": num(self.std_count),
            "condensation_ratio": num(self.condensation_ratio),
            "mp_fit": [None if r.fit is None else r.fit.to_json() for r in self.replicates],
            "edge": [None if r.edge is None else r.edge.to_json() for r in self.replicates],
            "lambda_max": [r.lambda_max for r in self.replicates],
            "traps": [t.to_json(include_vectors) for t in self.traps],
            "failures": self.failures,
        }


def _run_replicate(W: WeightMatrix, seed: ShuffleSeed, c_tw: float) -> ReplicateResult:
    result = ReplicateResult(seed.replicate_index, seed)
    try:
        A = shuffle_entries(W, seed)
        evals, vecs, transposed = spectrum_and_vectors(A.data)
        N, M = oriented(A.data)[0].shape
        esd = Esd(evals, N, M, transposed)
        fit = fit_mp(esd)
        edge = tw_delta(fit, N, c_tw)
    except NumericalError as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        return result

    result.fit, result.edge = fit, edge
    result.lambda_max = float(evals[-1])
    if evals.mean() > 0:
        result.condensation = condensation_ratio(evals)
    for i in np.flatnonzero(evals > edge.threshold)[::-1]:
        v = _canonical_sign(vecs[:, i])
        loc = localization_metrics(v / np.linalg.norm(v))
        result.traps.append(
            TrapRecord(
                layer_id=W.layer_id,
                lambda_trap=float(evals[i]),
                eigenvector=v,
                gap_over_edge=float(evals[i] - fit.lambda_plus),
                threshold=edge.threshold,
                ipr=loc.ipr,
                top_k_mass=loc.top_k_mass,
                top_5pct_mass=loc.top_5pct_mass,
                replicate_index=seed.replicate_index,
                shuffle_seed=seed,
                transposed=transposed,
            )
        )
    return result


def detect_traps(
    W: WeightMatrix,
    replicates: int = DEFAULT_REPLICATES,
    base_seed: int = 0,
    c_tw: float = DEFAULT_C_TW,
    workers: int = 1,
) -> LayerTrapReport:
    """Count correlation traps over ``replicates`` independent entry-wise shuffles.

    Replicates whose MP fit fails are kept in the report with an error message
    and excluded from the mean and std.
    """
    if replicates < 1:
        raise DomainError(f"replicates must be >= 1, got {replicates}")
    if min(W.shape) < 2:
        raise DimensionError(f"layer {W.layer_id!r}: need at least 2 rows and 2 columns, got {W.shape}")
    lseed = layer_seed(base_seed, W.layer_id)
    seeds = [ShuffleSeed(lseed, r) for r in range(replicates)]
    if workers > 1 and replicates > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: _run_replicate(W, s, c_tw), seeds))
    else:
        results = [_run_replicate(W, s, c_tw) for s in seeds]
    return LayerTrapReport(W.layer_id, W.shape, c_tw, int(base_seed), results)


def shuffled_matrix_for(W: WeightMatrix, trap: TrapRecord) -> WeightMatrix:
    """Rebuild the shuffled matrix a trap was found in."""
    return shuffle_entries(W, trap.shuffle_seed)


def scale_perturbation_check(
    W: WeightMatrix,
    scale: float,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    c_tw: float = DEFAULT_C_TW,
) -> tuple[float, float]:
    """Mean trap counts for W and scale * W under identical shuffles."""
    if not scale > 0:
        raise DomainError(f"scale must be positive, got {scale}")
    original = detect_traps(W, replicates, seed, c_tw)
    scaled = detect_traps(W.scaled(scale), replicates, seed, c_tw)
    return original.mean_count, scaled.mean_count
