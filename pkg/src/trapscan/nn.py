"""A small float64 ReLU MLP with hand-written backprop and AdamW.

Weights are stored (out x in) like ``torch.nn.Linear``; the loss is the mean
squared error against one-hot targets, averaged over batch and classes.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DivergenceError, DomainError, LayerNotFound, ShapeMismatch
from .tensor_store import WeightMatrix, load_checkpoint, save_checkpoint

LOG_COLUMNS = ("step", "train_acc", "train_loss", "eval_acc", "eval_loss")


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatch(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeMismatch(f"layer {k} expects {w.shape[1]} inputs, previous layer emits {self.weights[k - 1].shape[0]}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_names(self) -> list[str]:
        return [f"fc{k + 1}" for k in range(len(self.weights))]

    def layer_index(self, layer_id: str) -> int:
        name = layer_id[: -len(".weight")] if layer_id.endswith(".weight") else layer_id
        try:
            return self.layer_names.index(name)
        except ValueError:
            raise LayerNotFound(f"no layer named {layer_id!r}; have {self.layer_names}") from None

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def weight_matrix(self, index: int) -> WeightMatrix:
        return WeightMatrix(f"{self.layer_names[index]}.weight", self.weights[index])

    def to_weight_matrices(self) -> list[WeightMatrix]:
        out = []
        for name, w, b in zip(self.layer_names, self.weights, self.biases):
            out.append(WeightMatrix(f"{name}.weight", w))
            out.append(WeightMatrix(f"{name}.bias", b.reshape(1, -1)))
        return out

    @classmethod
    def from_weight_matrices(cls, layers: Sequence[WeightMatrix]) -> "MlpModel":
        by_id = {wm.layer_id: wm for wm in layers}
        weights, biases = [], []
        k = 1
        while f"fc{k}.weight" in by_id:
            w = by_id[f"fc{k}.weight"].data
            bias = by_id.get(f"fc{k}.bias")
            weights.append(w)
            biases.append(np.zeros(w.shape[0]) if bias is None else bias.data.reshape(-1))
            k += 1
        if not weights:
            raise LayerNotFound("checkpoint has no fc1.weight layer")
        return cls(weights, biases)


def init_mlp(sizes: Sequence[int], init_scale: float = 1.0, seed: int = 0) -> MlpModel:
    """PyTorch-default Linear init (U(-1/sqrt(fan_in), 1/sqrt(fan_in))) times ``init_scale``."""
    if len(sizes) < 2:
        raise DomainError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)) * init_scale)
        biases.append(rng.uniform(-bound, bound, size=fan_out) * init_scale)
    return MlpModel(weights, biases)


def forward(model: MlpModel, x) -> np.ndarray:
    """Logits for one input vector or a batch (rows)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ShapeMismatch(f"input has dimension {x.shape[-1]}, model expects {model.input_dim}")
    h = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss_and_grads(model: MlpModel, X: np.ndarray, Y: np.ndarray):
    """MSE loss against targets ``Y`` and its gradients, as (loss, dW list, db list)."""
    acts = [X]
    pre = []
    h = X
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)
    diff = h - Y
    loss = float(np.mean(diff**2))

    delta = 2.0 * diff / diff.size
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for k in range(last, -1, -1):
        gw[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k]) * (pre[k - 1] > 0)
    return loss, gw, gb


class AdamW:
    """AdamW with decoupled weight decay, applied in place to a list of arrays."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if not (0 < betas[0] < 1 and 0 < betas[1] < 1) or eps <= 0 or weight_decay < 0:
            raise DomainError("invalid AdamW hyperparameters")
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.exp_avg = [np.zeros_like(p) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        beta1, beta2 = self.betas
        bias_correction1 = 1 - beta1**self.t
        bias_correction2_sqrt = math.sqrt(1 - beta2**self.t)
        step_size = self.lr / bias_correction1
        for p, g, m, v in zip(self.params, grads, self.exp_avg, self.exp_avg_sq):
            p *= 1 - self.lr * self.weight_decay
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            denom = np.sqrt(v) / bias_correction2_sqrt + self.eps
            p -= step_size * m / denom


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.size:
            raise ShapeMismatch("inputs must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def save(self, path) -> None:
        np.savez(path, inputs=self.inputs, labels=self.labels, num_classes=self.num_classes)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as f:
            return cls(f["inputs"], f["labels"], int(f["num_classes"]))


def make_gaussian_clusters(
    num_classes: int = 10,
    dim: int = 32,
    per_class: int = 100,
    noise: float = 1.0,
    separation: float = 1.0,
    seed: int = 0,
    test_per_class: int = 0,
) -> tuple[Dataset, Dataset | None]:
    """Balanced Gaussian-cluster classification task, optionally with a held-out split.

    Class centres are N(0, separation^2 I); samples add N(0, noise^2 I).
    """
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation, size=(num_classes, dim))

    def draw(n):
        labels = np.repeat(np.arange(num_classes), n)
        x = centres[labels] + rng.normal(0.0, noise, size=(labels.size, dim))
        return Dataset(x, labels, num_classes)

    train = draw(per_class)
    test = draw(test_per_class) if test_per_class else None
    return train, test


def evaluate(model: MlpModel, dataset: Dataset) -> tuple[float, float]:
    """(argmax accuracy, mean squared error against one-hot targets)."""
    if dataset.dim != model.input_dim or dataset.num_classes != model.output_dim:
        raise ShapeMismatch("dataset and model dimensions differ")
    logits = forward(model, dataset.inputs)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    loss = float(np.mean((logits - one_hot(dataset.labels, dataset.num_classes)) ** 2))
    return acc, loss


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 200
    steps: int = 200_000
    init_scale: float = 8.0
    seed: int = 0
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    checkpoint_schedule: list[int] | None = None
    num_checkpoints: int = 20
    log_every: int = 1000

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.epsilon <= 0:
            raise DomainError("need 0 < beta1, beta2 < 1 and epsilon > 0")
        if self.weight_decay < 0 or self.steps < 0 or self.batch_size < 1:
            raise DomainError("weight_decay and steps must be nonnegative, batch_size positive")

    def schedule(self) -> list[int]:
        if self.checkpoint_schedule is not None:
            return sorted({int(s) for s in self.checkpoint_schedule if 0 <= s <= self.steps})
        return log_spaced_steps(self.steps, self.num_checkpoints)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: dict) -> "TrainConfig":
        known = {k: v for k, v in raw.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def log_spaced_steps(steps: int, count: int) -> list[int]:
    """Step 0 plus ``count`` roughly log-spaced steps ending at ``steps``."""
    if steps <= 0:
        return [0]
    pts = np.unique(np.round(np.geomspace(1, steps, max(count, 1))).astype(int))
    return [0] + [int(p) for p in pts]


@dataclass
class TrainResult:
    model: MlpModel
    checkpoints: list[Path]
    log: list[dict]


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def write_log_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row.get(k)) for k in LOG_COLUMNS])


def save_model(model: MlpModel, path, metadata: dict | None = None, step: int = 0, model_name: str = "mlp"):
    meta = {"activation": "relu", "step": step}
    meta.update(metadata or {})
    return save_checkpoint(model.to_weight_matrices(), meta, path, model_name=model_name, step=step)


def load_model(path) -> tuple[MlpModel, dict]:
    layers, manifest = load_checkpoint(path)
    return MlpModel.from_weight_matrices(layers), manifest


def train(
    model: MlpModel,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    eval_dataset: Dataset | None = None,
) -> TrainResult:
    """Train in place with AdamW on MSE-vs-one-hot; returns the model, checkpoint paths and log.

    The log holds one row per ``log_every`` steps and per checkpoint step, each
    evaluated on the full training set (and ``eval_dataset`` when given).
    """
    if len(dataset) == 0:
        raise DomainError("empty dataset")
    if dataset.dim != model.input_dim or dataset.num_classes != model.output_dim:
        raise ShapeMismatch("dataset and model dimensions differ")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    targets = one_hot(dataset.labels, dataset.num_classes)
    params = model.parameters()
    opt = AdamW(params, config.learning_rate, (config.beta1, config.beta2), config.epsilon, config.weight_decay)

    schedule = set(config.schedule())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    checkpoints: list[Path] = []
    log: list[dict] = []
    n = len(dataset)
    full_batch = config.batch_size >= n
    order = np.arange(n)
    cursor = n

    input_stats = {"input_mean": repr(float(dataset.inputs.mean())), "input_std": repr(float(dataset.inputs.std()))}

    def record(step: int):
        train_acc, train_loss = evaluate(model, dataset)
        row = {"step": step, "train_acc": train_acc, "train_loss": train_loss, "eval_acc": None, "eval_loss": None}
        if eval_dataset is not None:
            row["eval_acc"], row["eval_loss"] = evaluate(model, eval_dataset)
        if not math.isfinite(train_loss):
            raise DivergenceError(step, train_loss)
        log.append(row)
        if out is not None and step in schedule:
            meta = {"train_acc": repr(train_acc), "train_loss": repr(train_loss), **input_stats}
            if row["eval_acc"] is not None:
                meta["test_acc"] = repr(row["eval_acc"])
                meta["test_loss"] = repr(row["eval_loss"])
            path = out / f"step_{step:09d}.json"
            save_model(model, path, meta, step=step)
            checkpoints.append(path)

    record(0)
    for step in range(1, config.steps + 1):
        if full_batch:
            X, Y = dataset.inputs, targets
        else:
            if cursor + config.batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor : cursor + config.batch_size]
            cursor += config.batch_size
            X, Y = dataset.inputs[idx], targets[idx]
        loss, gw, gb = loss_and_grads(model, X, Y)
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        opt.step([g for pair in zip(gw, gb) for g in pair])
        if step in schedule or step % config.log_every == 0:
            record(step)
    if out is not None:
        write_log_csv(log, out / "train_log.csv")
        (out / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")
    return TrainResult(model, checkpoints, log)


def inject_trap(model: MlpModel, layer_index: int, magnitude: float, k: int, seed: int = 0) -> MlpModel:
    """Add ``+-magnitude`` to ``k`` distinct random entries of one weight matrix."""
    if not 0 <= layer_index < len(model.weights):
        raise DomainError(f"layer index {layer_index} out of range")
    w = model.weights[layer_index]
    if not 1 <= k <= w.size:
        raise DomainError(f"k must lie in [1, {w.size}], got {k}")
    out = model.copy()
    if magnitude == 0:
        return out
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), layer_index, k]))
    idx = rng.choice(w.size, size=k, replace=False)
    signs = rng.choice([-1.0, 1.0], size=k)
    out.weights[layer_index].flat[idx] += magnitude * signs
    return out
