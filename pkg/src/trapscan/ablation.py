"""Trap removal and the data-free Jensen-Shannon ablation score."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr, softmax

from .errors import DegenerateSVD, NonFiniteLogits, ShapeMismatch
from .nn import Dataset, MlpModel, evaluate, forward
from .rmt import oriented
from .traps import TrapRecord, shuffle_permutation

DEFAULT_PROBES = 1024
DEFAULT_TEMPERATURE = 1.0
DEFAULT_TAU_ERR = 0.01
DEFAULT_TAU_JSD = 1e-3
AMBIGUOUS_OVERLAP = 0.3


class Classification(str, enum.Enum):
    HARMFUL = "Harmful"
    BENIGN = "Benign"
    UNLABELED = "Unlabeled"


@dataclass(frozen=True)
class ProbeConfig:
    num_probes: int = DEFAULT_PROBES
    mean: float = 0.0
    std: float = 1.0
    seed: int = 0
    temperature: float = DEFAULT_TEMPERATURE
    probe_kind: str = "gaussian_matched"

    def __post_init__(self):
        if self.num_probes < 1:
            raise ValueError("num_probes must be >= 1")
        if not self.std > 0:
            raise ValueError("probe std must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.probe_kind != "gaussian_matched":
            raise ValueError(f"unsupported probe kind {self.probe_kind!r}")

    def draw(self, dim: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.normal(self.mean, self.std, size=(self.num_probes, dim))


MAPPINGS = ("shuffled", "overlap")


@dataclass(frozen=True, eq=False)
class TrapMapping:
    """The rank-one component of a layer that a trap is attributed to."""

    index: int
    overlap: float
    singular_value: float
    transposed: bool
    method: str = "shuffled"

    @property
    def ambiguous(self) -> bool:
        return self.overlap < AMBIGUOUS_OVERLAP


def _best_component(A: np.ndarray, v_trap: np.ndarray):
    if v_trap.size != A.shape[1]:
        raise ShapeMismatch(f"trap eigenvector has length {v_trap.size}, layer short side is {A.shape[1]}")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    overlaps = np.abs(Vt @ v_trap)
    k = int(np.argmax(overlaps))
    return k, float(overlaps[k]), float(s[k]), s[k] * np.outer(U[:, k], Vt[k])


def map_trap_to_layer(weight: np.ndarray, trap: TrapRecord, mapping: str = "shuffled") -> tuple[TrapMapping, np.ndarray]:
    """Locate the trap's rank-one component and express it in the layer's own coordinates.

    ``shuffled``: take the singular component of the shuffled matrix the trap came
    from (rebuilt from ``trap.shuffle_seed``) and scatter its entries back through
    the shuffle permutation. ``overlap``: take the right singular vector of the
    unshuffled layer with maximal |<v, v_trap>|.

    Returns the mapping and the component as a matrix of the layer's shape.
    """
    W = np.asarray(weight, dtype=np.float64)
    v_trap = np.asarray(trap.eigenvector, dtype=np.float64)
    if mapping == "overlap":
        A, transposed = oriented(W)
        k, overlap, sigma, comp = _best_component(A, v_trap)
        comp = comp.T if transposed else comp
    elif mapping == "shuffled":
        perm = shuffle_permutation(W.shape, trap.shuffle_seed)
        A, transposed = oriented(W.ravel()[perm].reshape(W.shape))
        k, overlap, sigma, comp = _best_component(A, v_trap)
        flat = (comp.T if transposed else comp).ravel()
        comp = np.empty(W.size)
        comp[perm] = flat
        comp = comp.reshape(W.shape)
    else:
        raise ValueError(f"unknown mapping {mapping!r}; expected one of {MAPPINGS}")
    return TrapMapping(k, overlap, sigma, transposed, mapping), comp


def remove_trap(
    model: MlpModel,
    layer_id: str,
    trap: TrapRecord,
    seed: int = 0,
    strict: bool = False,
    mapping: str = "shuffled",
) -> MlpModel:
    """Swap the trap's rank-one component sigma u v^T for sigma u_rand v_rand^T.

    A mapped component with singular value below 1e-12 is already null, so the
    model is returned unchanged (or DegenerateSVD is raised when ``strict``).
    """
    index = model.layer_index(layer_id)
    found, comp = map_trap_to_layer(model.weights[index], trap, mapping)
    out = model.copy()
    if found.singular_value < 1e-12:
        if strict:
            raise DegenerateSVD(f"trap maps to a null component (sigma = {found.singular_value:g})")
        return out
    rows, cols = out.weights[index].shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), index]))
    u_rand = rng.standard_normal(rows)
    v_rand = rng.standard_normal(cols)
    u_rand /= np.linalg.norm(u_rand)
    v_rand /= np.linalg.norm(v_rand)
    out.weights[index] = out.weights[index] - comp + found.singular_value * np.outer(u_rand, v_rand)
    return out


def js_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise Jensen-Shannon divergence in nats."""
    m = 0.5 * (p + q)
    return 0.5 * rel_entr(p, m).sum(axis=-1) + 0.5 * rel_entr(q, m).sum(axis=-1)


def jsd_score(model: MlpModel, ablated: MlpModel, probes: ProbeConfig = ProbeConfig()) -> float:
    """Mean JS divergence between temperature-scaled softmax outputs on Gaussian probes."""
    if model.input_dim != ablated.input_dim or model.output_dim != ablated.output_dim:
        raise ShapeMismatch("models differ in input or output dimension")
    x = probes.draw(model.input_dim)
    za = forward(model, x)
    zb = forward(ablated, x)
    if not (np.all(np.isfinite(za)) and np.all(np.isfinite(zb))):
        raise NonFiniteLogits("probe logits are not finite")
    p = softmax(za / probes.temperature, axis=1)
    q = softmax(zb / probes.temperature, axis=1)
    return float(np.clip(js_divergence(p, q).mean(), 0.0, math.log(2.0)))


def classify_trap(
    jsd: float,
    delta_test_error: float | None,
    tau_jsd: float = DEFAULT_TAU_JSD,
    tau_err: float = DEFAULT_TAU_ERR,
) -> Classification:
    """Label by the change in test error; ``jsd`` and ``tau_jsd`` are informational only."""
    if tau_err <= 0 or tau_jsd <= 0:
        raise ValueError("thresholds must be positive")
    if delta_test_error is None:
        return Classification.UNLABELED
    return Classification.HARMFUL if abs(delta_test_error) > tau_err else Classification.BENIGN


@dataclass
class AblationResult:
    layer_id: str
    replicate: int
    trap_index: int
    lambda_trap: float
    ipr: float
    jsd_score: float
    temperature: float
    overlap: float
    delta_test_error: float | None
    classification: Classification
    mapping: str = "shuffled"

    def to_json(self) -> dict:
        return {
            "trap_ref": {"layer_id": self.layer_id, "replicate": self.replicate, "trap_index": self.trap_index},
            "lambda_trap": self.lambda_trap,
            "ipr": self.ipr,
            "jsd_score": self.jsd_score,
            "temperature": self.temperature,
            "mapping": self.mapping,
            "overlap": self.overlap,
            "ambiguous_mapping": self.overlap < AMBIGUOUS_OVERLAP,
            "delta_test_error": self.delta_test_error,
            "classification": self.classification.value,
        }

    def csv_row(self) -> list:
        trap_id = f"{self.layer_id}/r{self.replicate}/t{self.trap_index}"
        delta = "" if self.delta_test_error is None else repr(self.delta_test_error)
        return [trap_id, self.layer_id, repr(self.lambda_trap), repr(self.ipr), repr(self.jsd_score), delta, self.classification.value]


CSV_HEADER = ["trap_id", "layer", "lambda", "ipr", "jsd", "delta_err", "class"]


def ablate(
    model: MlpModel,
    layer_id: str,
    trap: TrapRecord,
    trap_index: int = 0,
    probes: ProbeConfig = ProbeConfig(),
    eval_dataset: Dataset | None = None,
    seed: int = 0,
    tau_err: float = DEFAULT_TAU_ERR,
    mapping: str = "shuffled",
) -> tuple[AblationResult, MlpModel]:
    """Remove one trap, score it, and classify it when evaluation data is supplied.

    The signed change is err(ablated) - err(original).
    """
    index = model.layer_index(layer_id)
    found, _ = map_trap_to_layer(model.weights[index], trap, mapping)
    ablated = remove_trap(model, layer_id, trap, seed, mapping=mapping)
    jsd = jsd_score(model, ablated, probes)
    delta = None
    if eval_dataset is not None:
        acc0, _ = evaluate(model, eval_dataset)
        acc1, _ = evaluate(ablated, eval_dataset)
        delta = (1.0 - acc1) - (1.0 - acc0)
    result = AblationResult(
        layer_id=model.weight_matrix(index).layer_id,
        replicate=trap.replicate_index,
        trap_index=trap_index,
        lambda_trap=trap.lambda_trap,
        ipr=trap.ipr,
        jsd_score=jsd,
        temperature=probes.temperature,
        overlap=found.overlap,
        delta_test_error=delta,
        classification=classify_trap(jsd, delta, tau_err=tau_err),
        mapping=mapping,
    )
    return result, ablated
