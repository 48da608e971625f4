import json
import struct

import numpy as np
import pytest

from advfusion.adapters import Adapter, attach
from advfusion.checkpoint import (MAGIC, inspect, load_adapter, load_checkpoint, load_into, read_checkpoint,
                                  save_checkpoint)
from advfusion.errors import DimensionError, IntegrityError, MissingGroupError, VersionError
from advfusion.model import TransformerModel
from advfusion.trainer import param_checksum

from conftest import language_stack, randomize, tiny_config


def same_params(a, b):
    return set(a.params) == set(b.params) and all(
        a.params[n].data.dtype == b.params[n].data.dtype and a.params[n].data.tobytes() == b.params[n].data.tobytes()
        for n in a.params)


@pytest.mark.parametrize("mechanism", [None, "task-adapter", "lora", "fusion", "advfusion"])
def test_round_trip_bitwise(tmp_path, cfg32, tokens, mechanism):
    m = TransformerModel(cfg32, seed=2)
    if mechanism:
        stack = language_stack(cfg32, randomize=True) if "fusion" in mechanism else None
        attach(m, mechanism, stack=stack, seed=3)
        randomize(m, [n for n in m.params if m.groups[n] != "base"], 0.2, seed=4)
    path = tmp_path / "m.avf"
    save_checkpoint(m, path)
    back = load_checkpoint(path).model
    assert same_params(m, back)
    assert np.array_equal(m.encode(tokens).states.data, back.encode(tokens).states.data)
    if mechanism:
        assert back.attachment.describe() == m.attachment.describe()


def test_round_trip_float64(tmp_path, tokens):
    m = TransformerModel(tiny_config("float64"), seed=1)
    save_checkpoint(m, tmp_path / "m.avf")
    assert same_params(m, load_checkpoint(tmp_path / "m.avf").model)


def test_detached_adapters_saved_and_loaded_alone(tmp_path, cfg32):
    m = TransformerModel(cfg32)
    stack = language_stack(cfg32, tags=("x", "y"), randomize=True)
    save_checkpoint(m, tmp_path / "m.avf", adapters=stack.adapters)
    ck = load_checkpoint(tmp_path / "m.avf", groups=["adapter:x"])
    assert ck.model is None and list(ck.adapters) == ["x"]
    want = stack.adapters[0].named_tensors()
    got = ck.adapters["x"].named_tensors()
    assert set(want) == set(got) and all(np.array_equal(want[n].data, got[n].data) for n in want)
    assert ck.adapters["x"].kind == "language"


def test_load_adapter_hidden_mismatch(tmp_path, cfg32):
    m = TransformerModel(cfg32)
    save_checkpoint(m, tmp_path / "m.avf", adapters=language_stack(cfg32, tags=("x",)).adapters)
    other = TransformerModel(tiny_config(hidden=32))
    with pytest.raises(DimensionError, match=r"adapter\.x\.0\.down\.w"):
        load_adapter(tmp_path / "m.avf", "x", model=other)


def test_missing_group(tmp_path, cfg32):
    save_checkpoint(TransformerModel(cfg32), tmp_path / "m.avf")
    with pytest.raises(MissingGroupError):
        load_checkpoint(tmp_path / "m.avf", groups=["fusion"])
    with pytest.raises(MissingGroupError):
        load_adapter(tmp_path / "m.avf", "go")


def test_truncated_file_applies_nothing(tmp_path, cfg32):
    src = TransformerModel(cfg32, seed=1)
    path = tmp_path / "m.avf"
    save_checkpoint(src, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 100])
    dst = TransformerModel(cfg32, seed=2)
    before = param_checksum(dst)
    with pytest.raises(IntegrityError):
        load_into(dst, path, ["base"])
    assert param_checksum(dst) == before
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_bad_magic_and_corrupt_byte(tmp_path, cfg32):
    path = tmp_path / "m.avf"
    save_checkpoint(TransformerModel(cfg32), path)
    raw = bytearray(path.read_bytes())
    (tmp_path / "bad.avf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(IntegrityError):
        read_checkpoint(tmp_path / "bad.avf")
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="checksum"):
        read_checkpoint(path)


def test_version_mismatch(tmp_path, cfg32):
    path = tmp_path / "m.avf"
    save_checkpoint(TransformerModel(cfg32), path)
    raw = path.read_bytes()
    (n,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8 : 8 + n])
    manifest["format_version"] = 99
    head = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(head)) + head + raw[8 + n :])
    with pytest.raises(VersionError):
        read_checkpoint(path)


def test_little_endian_layout(tmp_path, cfg32):
    m = TransformerModel(cfg32, seed=0)
    path = tmp_path / "m.avf"
    manifest = save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw[:4] == b"AVF1"
    (n,) = struct.unpack("<I", raw[4:8])
    blob = raw[8 + n :]
    e = manifest["entries"][0]
    assert e["dtype"] == "<f4"
    first = struct.unpack("<f", blob[e["offset"] : e["offset"] + 4])[0]
    assert first == float(m.params[e["name"]].data.reshape(-1)[0])


def test_same_model_same_bytes(tmp_path, cfg32):
    for name in ("a", "b"):
        save_checkpoint(TransformerModel(cfg32, seed=5), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_load_into_shape_mismatch(tmp_path, cfg32):
    save_checkpoint(TransformerModel(cfg32), tmp_path / "m.avf")
    other = TransformerModel(tiny_config(hidden=32))
    before = param_checksum(other)
    with pytest.raises(DimensionError):
        load_into(other, tmp_path / "m.avf", ["base"])
    assert param_checksum(other) == before


def test_load_into_partial(tmp_path, cfg32):
    a, b = TransformerModel(cfg32, seed=1), TransformerModel(cfg32, seed=2)
    save_checkpoint(a, tmp_path / "m.avf")
    dec_before = param_checksum(b, b.names_in("decoder"))
    load_into(b, tmp_path / "m.avf", ["base"])
    assert param_checksum(b, b.names_in("base")) == param_checksum(a, a.names_in("base"))
    assert param_checksum(b, b.names_in("decoder")) == dec_before


def test_inspect_groups(tmp_path, cfg32):
    m = TransformerModel(cfg32)
    attach(m, "task-adapter")
    save_checkpoint(m, tmp_path / "m.avf")
    info = inspect(tmp_path / "m.avf")
    assert set(info["groups"]) == {"base", "decoder", "adapter:task"}
    assert info["attachment"]["mechanism"] == "task-adapter"


def test_atomic_write_leaves_no_temp(tmp_path, cfg32):
    save_checkpoint(TransformerModel(cfg32), tmp_path / "m.avf")
    assert [p.name for p in tmp_path.iterdir()] == ["m.avf"]
