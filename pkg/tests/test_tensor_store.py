import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trapscan.errors import MalformedManifest, NonFiniteEntry, TensorBoundsError
from trapscan.tensor_store import WeightMatrix, load_checkpoint, parse_manifest, save_checkpoint


def write_raw(tmp_path, layers, blob, name="ckpt"):
    """Hand-write a manifest plus blob without going through save_checkpoint."""
    manifest = {"model_name": "m", "step": 0, "data_file": f"{name}.bin", "layers": layers, "metadata": {}}
    (tmp_path / f"{name}.bin").write_bytes(blob)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(manifest))
    return path


def layer(layer_id, rows, cols, dtype, offset, length):
    return {"layer_id": layer_id, "rows": rows, "cols": cols, "dtype": dtype, "byte_offset": offset, "byte_length": length}


def f32_widen_oracle(x: float) -> float:
    # decode the binary32 bit pattern by hand: sign, exponent, mantissa
    (bits,) = struct.unpack("<I", struct.pack("<f", x))
    sign = -1.0 if bits >> 31 else 1.0
    exp = (bits >> 23) & 0xFF
    frac = bits & 0x7FFFFF
    if exp == 0:
        return sign * math.ldexp(frac, -149)
    return sign * math.ldexp((1 << 23) | frac, exp - 150)


def test_load_2x3_f64(tmp_path):
    blob = struct.pack("<6d", 1, 2, 3, 4, 5, 6)
    path = write_raw(tmp_path, [layer("w", 2, 3, "f64", 0, 48)], blob)
    layers, manifest = load_checkpoint(path)
    assert len(layers) == 1
    w = layers[0]
    assert (w.rows, w.cols) == (2, 3)
    assert w.data.ravel().tolist() == [1, 2, 3, 4, 5, 6]
    assert manifest.layers[0].layer_id == "w"


def test_zero_byte_length_is_bounds_error(tmp_path):
    path = write_raw(tmp_path, [layer("w", 2, 3, "f64", 0, 0)], struct.pack("<6d", *range(6)))
    with pytest.raises(TensorBoundsError):
        load_checkpoint(path)


def test_range_past_end_of_file(tmp_path):
    path = write_raw(tmp_path, [layer("w", 2, 3, "f64", 8, 48)], struct.pack("<6d", *range(6)))
    with pytest.raises(TensorBoundsError):
        load_checkpoint(path)


def test_overlapping_ranges(tmp_path):
    blob = struct.pack("<8d", *range(8))
    path = write_raw(tmp_path, [layer("a", 2, 2, "f64", 0, 32), layer("b", 2, 2, "f64", 16, 32)], blob)
    with pytest.raises(TensorBoundsError):
        load_checkpoint(path)


def test_f32_widening_matches_bit_oracle(tmp_path):
    values = [0.1, -3.75, 1e-40, 65504.0, 1.0 / 3.0, -0.0]
    blob = struct.pack("<6f", *values)
    path = write_raw(tmp_path, [layer("w", 2, 3, "f32", 0, 24)], blob)
    (w,), _ = load_checkpoint(path)
    for got, x in zip(w.data.ravel(), values):
        assert got == f32_widen_oracle(x)
    assert w.data[0, 0] != 0.1
    assert w.data.dtype == np.float64


def test_non_finite_entry_reports_layer_and_index(tmp_path):
    blob = struct.pack("<4d", 1.0, 2.0, float("nan"), 4.0)
    path = write_raw(tmp_path, [layer("bad", 2, 2, "f64", 0, 32)], blob)
    with pytest.raises(NonFiniteEntry) as info:
        load_checkpoint(path)
    assert info.value.layer_id == "bad"
    assert info.value.flat_index == 2


@pytest.mark.parametrize(
    "mutate",
    [
        lambda m: m.pop("layers"),
        lambda m: m.update(step=-1),
        lambda m: m.update(step=True),
        lambda m: m["layers"][0].update(dtype="f16"),
        lambda m: m["layers"][0].update(rows=0),
        lambda m: m["layers"][0].update(rows="2"),
        lambda m: m["layers"].append(dict(m["layers"][0])),
        lambda m: m.update(metadata=[1]),
    ],
)
def test_malformed_manifests(mutate):
    manifest = {"model_name": "m", "step": 0, "data_file": "x.bin", "layers": [layer("w", 2, 2, "f64", 0, 32)]}
    mutate(manifest)
    with pytest.raises(MalformedManifest):
        parse_manifest(manifest)


def test_bad_json_is_malformed(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("{not json")
    with pytest.raises(MalformedManifest):
        load_checkpoint(path)


def test_pi_round_trip_bit_exact(tmp_path):
    save_checkpoint([WeightMatrix("pi", [[math.pi]])], {}, tmp_path / "pi.json")
    (w,), _ = load_checkpoint(tmp_path / "pi.json")
    assert struct.pack("<d", w.data[0, 0]) == struct.pack("<d", math.pi)


def test_two_layers_have_disjoint_offsets(tmp_path):
    a = WeightMatrix("a", np.arange(6.0).reshape(2, 3))
    b = WeightMatrix("b", np.arange(4.0).reshape(4, 1))
    manifest = save_checkpoint([a, b], {}, tmp_path / "two.json")
    ea, eb = manifest.layers
    assert (ea.byte_offset, ea.byte_length) == (0, 48)
    assert (eb.byte_offset, eb.byte_length) == (48, 32)
    assert (tmp_path / "two.bin").stat().st_size == 80


def test_metadata_round_trip(tmp_path):
    manifest = save_checkpoint([WeightMatrix("a", [[1.0]])], {"step": "100"}, tmp_path / "m.json")
    assert manifest.step == 100
    _, loaded = load_checkpoint(tmp_path / "m.json")
    assert loaded.metadata == {"step": "100"}
    assert loaded.step == 100


def test_f32_save_widens_on_reload(tmp_path):
    save_checkpoint([WeightMatrix("a", [[0.1, 0.2]])], {}, tmp_path / "h.json", dtype="f32")
    (w,), manifest = load_checkpoint(tmp_path / "h.json")
    assert manifest.layers[0].dtype == "f32"
    assert w.data[0, 0] == f32_widen_oracle(0.1)


def test_weight_matrix_is_read_only():
    w = WeightMatrix("a", np.ones((2, 2)))
    with pytest.raises(ValueError):
        w.data[0, 0] = 3.0


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=40, deadline=None)
@given(
    arrays=st.lists(
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6), elements=finite),
        min_size=1,
        max_size=4,
    )
)
def test_save_load_save_is_byte_identical(tmp_path_factory, arrays):
    tmp = tmp_path_factory.mktemp("rt")
    layers = [WeightMatrix(f"l{i}", a) for i, a in enumerate(arrays)]
    first = save_checkpoint(layers, {"k": "v"}, tmp / "a.json")
    loaded, _ = load_checkpoint(tmp / "a.json")
    second = save_checkpoint(loaded, {"k": "v"}, tmp / "b.json")
    assert (tmp / "a.bin").read_bytes() == (tmp / "b.bin").read_bytes()
    for orig, back in zip(layers, loaded):
        assert orig.data.tobytes() == back.data.tobytes()
    # the loader consumes exactly the declared bytes
    assert sum(e.byte_length for e in second.layers) == (tmp / "b.bin").stat().st_size
    assert first.to_json()["layers"] == second.to_json()["layers"]
