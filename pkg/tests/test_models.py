import struct
import zlib

import numpy as np
import pytest

from srlab import checkpoint as C
from srlab.models import (ModelSpec, ModelSpecError, Network, WAState, build_model, count_params,
                          default_spec, forward, wa_update)


def test_default_param_count():
    spec = default_spec((1, 16, 16), 2)
    shapes = spec.param_shapes()
    enumerated = sum(int(np.prod(s)) for s in shapes.values())
    assert enumerated == count_params(spec) == 1762
    assert shapes["conv0.weight"] == (8, 1, 3, 3)
    assert shapes["dense6.weight"] == (256, 2)


def test_same_seed_bit_identical():
    spec = default_spec()
    a, b = build_model(spec, 3), build_model(spec, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = build_model(spec, 4)
    assert not np.array_equal(a["conv0.weight"], c["conv0.weight"])


def test_bad_specs():
    with pytest.raises(ModelSpecError):
        ModelSpec((1, 4, 4), (), 2).param_shapes()
    with pytest.raises(ModelSpecError):
        ModelSpec((1, 4, 4), (("dense", 3),), 2).param_shapes()
    with pytest.raises(ModelSpecError):
        ModelSpec((1, 4, 4), (("conv", 2, 2), ("dense", 2)), 2).param_shapes()
    with pytest.raises(ModelSpecError):
        ModelSpec((1, 4, 4), (("softmax",),), 2).param_shapes()


def test_zero_params_zero_logits():
    spec = default_spec()
    params = {k: np.zeros_like(v) for k, v in build_model(spec).items()}
    net = Network(spec, params)
    x = np.random.default_rng(0).random((3, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(net.logits(x), 0)
    np.testing.assert_array_equal(net.predict(x), 0)


def test_identical_images_identical_rows():
    net = Network.init(default_spec(), seed=1)
    x = np.repeat(np.random.default_rng(0).random((1, 1, 16, 16)).astype(np.float32), 4, axis=0)
    out = net.logits(x)
    assert (out == out[0]).all()


def test_linear_layer_by_hand():
    spec = ModelSpec((1, 1, 2), (("dense", 3),), 3)
    w = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]])
    b = np.array([0.1, 0.2, 0.3])
    out = forward(spec, {"dense0.weight": w, "dense0.bias": b}, np.array([[[[2.0, -1.0]]]])).data
    want = [2 * 1 + -1 * 3 + 0.1, 2 * -2 + 0 + 0.2, 2 * 0.5 + -1 * -1 + 0.3]
    np.testing.assert_allclose(out[0], want, rtol=0, atol=1e-12)


def test_normalize_layer():
    spec = ModelSpec((1, 1, 2), (("normalize", 0.5, 0.25), ("dense", 1)), 1)
    params = {"dense1.weight": np.array([[1.0], [1.0]]), "dense1.bias": np.zeros(1)}
    out = forward(spec, params, np.array([[[[1.0, 0.0]]]])).data
    assert out[0, 0] == pytest.approx(2.0 - 2.0)
    with pytest.raises(ModelSpecError):
        ModelSpec((1, 1, 2), (("normalize", 0.5, 0.0), ("dense", 1)), 1).param_shapes()


def test_input_shape_checked():
    net = Network.init(default_spec())
    with pytest.raises(ValueError):
        net.logits(np.zeros((1, 1, 8, 8), np.float32))


def test_wa_first_and_two_point():
    s = wa_update(WAState(), {"w": np.array([5.0])})
    assert s.params["w"][0] == 5.0 and s.count == 1
    s = WAState({"w": np.array([0.0])}, count=1)
    assert wa_update(s, {"w": np.array([2.0])}).params["w"][0] == 1.0


def test_wa_running_mean_matches_direct_mean():
    rng = np.random.default_rng(7)
    snaps = [{"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)} for _ in range(5)]
    s = WAState()
    for i, p in enumerate(snaps):
        s = wa_update(s, p, epoch=i)
    for k in ("w", "b"):
        assert np.abs(s.params[k] - np.mean([p[k] for p in snaps], axis=0)).max() < 1e-12
    assert s.history == list(range(5))


def test_wa_mismatch():
    s = wa_update(WAState(), {"w": np.zeros(2)})
    with pytest.raises(ModelSpecError):
        wa_update(s, {"v": np.zeros(2)})
    with pytest.raises(ModelSpecError):
        wa_update(s, {"w": np.zeros(3)})


# checkpoints ---------------------------------------------------------------------------

def _ckpt():
    spec = default_spec()
    return C.Checkpoint(spec, build_model(spec, 2), epoch=7, rng_state={"seed": 2},
                        config_digest="abc", extra={"objective": "at"})


def test_checkpoint_round_trip(tmp_path):
    ck = _ckpt()
    path = tmp_path / "m.ckpt"
    C.save_checkpoint(ck, path)
    back = C.load_checkpoint(path)
    assert back.spec == ck.spec and back.epoch == 7 and back.extra == {"objective": "at"}
    for k, v in ck.params.items():
        assert back.params[k].dtype == v.dtype
        np.testing.assert_array_equal(back.params[k], v)


def test_truncated_by_one_byte(tmp_path):
    path = tmp_path / "m.ckpt"
    C.save_checkpoint(_ckpt(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(C.CheckpointError):
        C.load_checkpoint(path)
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(C.TruncatedError):
        C.load_checkpoint(path)


def test_corrupted_byte(tmp_path):
    path = tmp_path / "m.ckpt"
    C.save_checkpoint(_ckpt(), path)
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(C.ChecksumError):
        C.load_checkpoint(path)


def test_version_and_magic():
    blob = C.encode_tensors({"a": np.zeros(2, np.float32)})
    with pytest.raises(C.VersionError):
        C.decode_tensors(b"SRLCKPT9" + blob[8:])
    with pytest.raises(C.CheckpointError):
        C.decode_tensors(b"NOTACKPT" + blob[8:])


def test_hand_crafted_little_endian_fixture():
    # one f64 tensor "w" of shape (2,) = [1.5, -2.0] and one f32 scalar-vector
    body = b"SRLCKPT1" + (2).to_bytes(4, "little")
    body += (1).to_bytes(2, "little") + b"w" + bytes([1]) + (2).to_bytes(8, "little") + bytes([1])
    body += bytes.fromhex("000000000000f83f") + bytes.fromhex("00000000000000c0")
    body += (1).to_bytes(2, "little") + b"s" + bytes([1]) + (1).to_bytes(8, "little") + bytes([0])
    body += bytes.fromhex("0000803f")
    blob = body + (zlib.crc32(body)).to_bytes(4, "little")
    out = C.decode_tensors(blob)
    assert out["w"].tolist() == [1.5, -2.0] and out["w"].dtype == np.float64
    assert out["s"].tolist() == [1.0] and out["s"].dtype == np.float32
    assert C.encode_tensors({"w": np.array([1.5, -2.0]), "s": np.array([1.0], np.float32)}) == blob


def test_big_endian_arrays_encode_as_little_endian():
    be = np.array([1.0, 2.0], dtype=">f8")
    blob = C.encode_tensors({"x": be})
    assert blob.endswith(struct.pack("<2d", 1.0, 2.0) + blob[-4:])
    np.testing.assert_array_equal(C.decode_tensors(blob)["x"], [1.0, 2.0])


def test_shape_mismatch_on_save(tmp_path):
    ck = _ckpt()
    ck.params["conv0.weight"] = np.zeros((1, 1, 1, 1), np.float32)
    with pytest.raises(C.ShapeMismatchError):
        C.save_checkpoint(ck, tmp_path / "x.ckpt")


def test_unsupported_dtype():
    with pytest.raises(C.CheckpointError):
        C.encode_tensors({"i": np.zeros(2, np.int32)})
