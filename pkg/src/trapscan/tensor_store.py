"""Two-file checkpoint container: a JSON manifest plus one raw little-endian blob.

Manifest layout::

    {"model_name": str, "step": int, "data_file": str,
     "layers": [{"layer_id", "rows", "cols", "dtype", "byte_offset", "byte_length"}, ...],
     "metadata": {str: str}}

Tensors are stored row-major. ``f32`` tensors are widened to ``f64`` on load.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import MalformedManifest, NonFiniteEntry, TensorBoundsError, TrapscanError

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """An immutable dense N x M layer matrix held in float64."""

    layer_id: str
    data: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"layer {self.layer_id!r}: expected a non-empty 2-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def validate_finite(self) -> None:
        bad = np.flatnonzero(~np.isfinite(self.data))
        if bad.size:
            idx = int(bad[0])
            raise NonFiniteEntry(self.layer_id, idx, float(self.data.flat[idx]))

    def with_data(self, data: np.ndarray, source: str | None = None) -> "WeightMatrix":
        return WeightMatrix(self.layer_id, data, self.source if source is None else source)

    def scaled(self, factor: float) -> "WeightMatrix":
        return self.with_data(self.data * factor)


@dataclass(frozen=True)
class LayerEntry:
    layer_id: str
    rows: int
    cols: int
    dtype: str
    byte_offset: int
    byte_length: int

    def to_json(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "rows": self.rows,
            "cols": self.cols,
            "dtype": self.dtype,
            "byte_offset": self.byte_offset,
            "byte_length": self.byte_length,
        }


@dataclass(frozen=True)
class CheckpointManifest:
    model_name: str
    step: int
    data_file: str
    layers: tuple[LayerEntry, ...]
    metadata: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "model_name": self.model_name,
            "step": self.step,
            "data_file": self.data_file,
            "layers": [entry.to_json() for entry in self.layers],
            "metadata": dict(self.metadata),
        }


def _require(obj: Mapping, key: str, kind, where: str):
    if key not in obj:
        raise MalformedManifest(f"{where}: missing field {key!r}")
    value = obj[key]
    # bool is an int subclass; reject it for integer fields
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise MalformedManifest(f"{where}: field {key!r} must be an integer, got {value!r}")
    if kind is not int and not isinstance(value, kind):
        raise MalformedManifest(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def parse_manifest(raw: Mapping) -> CheckpointManifest:
    if not isinstance(raw, Mapping):
        raise MalformedManifest("manifest root must be a JSON object")
    model_name = _require(raw, "model_name", str, "manifest")
    step = _require(raw, "step", int, "manifest")
    if step < 0:
        raise MalformedManifest(f"manifest: step must be nonnegative, got {step}")
    data_file = _require(raw, "data_file", str, "manifest")
    layers_raw = _require(raw, "layers", list, "manifest")
    metadata_raw = raw.get("metadata", {})
    if not isinstance(metadata_raw, Mapping):
        raise MalformedManifest("manifest: metadata must be an object")
    metadata = {str(k): str(v) for k, v in metadata_raw.items()}

    layers = []
    seen = set()
    for i, item in enumerate(layers_raw):
        where = f"layers[{i}]"
        if not isinstance(item, Mapping):
            raise MalformedManifest(f"{where}: must be an object")
        entry = LayerEntry(
            layer_id=_require(item, "layer_id", str, where),
            rows=_require(item, "rows", int, where),
            cols=_require(item, "cols", int, where),
            dtype=_require(item, "dtype", str, where),
            byte_offset=_require(item, "byte_offset", int, where),
            byte_length=_require(item, "byte_length", int, where),
        )
        if entry.dtype not in DTYPES:
            raise MalformedManifest(f"{where}: dtype must be one of {sorted(DTYPES)}, got {entry.dtype!r}")
        if entry.rows < 1 or entry.cols < 1:
            raise MalformedManifest(f"{where}: rows and cols must be positive")
        if entry.layer_id in seen:
            raise MalformedManifest(f"{where}: duplicate layer_id {entry.layer_id!r}")
        seen.add(entry.layer_id)
        layers.append(entry)
    return CheckpointManifest(model_name, step, data_file, tuple(layers), metadata)


def _check_bounds(manifest: CheckpointManifest, file_size: int) -> None:
    spans = []
    for entry in manifest.layers:
        expected = entry.rows * entry.cols * DTYPES[entry.dtype].itemsize
        if entry.byte_length != expected:
            raise TensorBoundsError(
                f"layer {entry.layer_id!r}: byte_length {entry.byte_length} does not match "
                f"{entry.rows}x{entry.cols} {entry.dtype} ({expected} bytes)"
            )
        if entry.byte_offset < 0 or entry.byte_offset + entry.byte_length > file_size:
            raise TensorBoundsError(
                f"layer {entry.layer_id!r}: bytes [{entry.byte_offset}, {entry.byte_offset + entry.byte_length}) "
                f"exceed data file of {file_size} bytes"
            )
        spans.append((entry.byte_offset, entry.byte_offset + entry.byte_length, entry.layer_id))
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise TensorBoundsError(f"layers {a!r} and {b!r} overlap in the data file")


def load_checkpoint(manifest_path: str | os.PathLike) -> tuple[list[WeightMatrix], CheckpointManifest]:
    """Load every layer listed in a manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedManifest(f"{manifest_path}: {exc}") from exc
    manifest = parse_manifest(raw)

    data_path = manifest_path.parent / manifest.data_file
    blob = data_path.read_bytes()
    _check_bounds(manifest, len(blob))

    layers = []
    for entry in manifest.layers:
        dtype = DTYPES[entry.dtype]
        flat = np.frombuffer(blob, dtype=dtype, count=entry.rows * entry.cols, offset=entry.byte_offset)
        wm = WeightMatrix(entry.layer_id, flat.astype(np.float64).reshape(entry.rows, entry.cols), str(manifest_path))
        wm.validate_finite()
        layers.append(wm)
    return layers, manifest


def save_checkpoint(
    layers: Iterable[WeightMatrix],
    metadata: Mapping[str, object] | None,
    path: str | os.PathLike,
    *,
    model_name: str = "model",
    step: int | None = None,
    dtype: str = "f64",
) -> CheckpointManifest:
    """Write ``path`` (JSON manifest) and a sibling ``.bin`` blob.

    ``step`` defaults to ``metadata["step"]`` when present, else 0.
    """
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
    path = Path(path)
    metadata = {str(k): str(v) for k, v in (metadata or {}).items()}
    if step is None:
        step = int(metadata.get("step", 0))

    np_dtype = DTYPES[dtype]
    data_file = path.with_suffix(".bin").name
    entries = []
    chunks = []
    offset = 0
    for wm in layers:
        wm.validate_finite()
        raw = np.ascontiguousarray(wm.data, dtype=np_dtype).tobytes()
        entries.append(LayerEntry(wm.layer_id, wm.rows, wm.cols, dtype, offset, len(raw)))
        chunks.append(raw)
        offset += len(raw)
    if len({e.layer_id for e in entries}) != len(entries):
        raise TrapscanError("duplicate layer ids")

    manifest = CheckpointManifest(model_name, int(step), data_file, tuple(entries), metadata)
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.parent / data_file).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
