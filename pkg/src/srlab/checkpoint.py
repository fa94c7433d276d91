"""Binary tensor container and model checkpoints.

Layout (all integers little-endian)::

    b"SRLCKPT1"
    u32 tensor_count
    per tensor:
        u16 name_length, name (utf-8)
        u8  rank, rank x u64 extents
        u8  dtype code (0 = f32, 1 = f64)
        raw little-endian values, row-major
    u32 CRC-32 of every preceding byte

Checkpoint metadata (spec, epoch, RNG state, config digest) travels as a
JSON blob stored in a float32 tensor named ``__meta__`` holding one UTF-8 byte
per element.
"""
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec

MAGIC = b"SRLCKPT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def encode_tensors(tensors):
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(arr.dtype.newbyteorder("="), copy=False)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        code = _CODES[arr.dtype]
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob):
    if len(blob) < len(MAGIC) + 8:
        raise TruncatedError("file too short to be a tensor container")
    if blob[:len(MAGIC)] != MAGIC:
        if blob[:7] == MAGIC[:7]:
            raise VersionError(f"unsupported container version {blob[7:8]!r}")
        raise CheckpointError("bad magic bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        # could be truncation or corruption; try to tell them apart
        try:
            _parse(body)
        except TruncatedError:
            raise TruncatedError("container is truncated") from None
        except CheckpointError:
            pass
        raise ChecksumError("CRC-32 mismatch")
    out, end = _parse(body)
    if end != len(body):
        raise CheckpointError(f"{len(body) - end} trailing bytes before the checksum")
    return out


def _parse(body):
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedError("container is truncated")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        (code,) = struct.unpack("<B", take(1))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="))
    return out, pos


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, tensors):
    atomic_write_bytes(path, encode_tensors(tensors))


def load_tensors(path):
    with open(path, "rb") as f:
        return decode_tensors(f.read())


def _meta_tensor(meta):
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def _meta_from_tensor(arr):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict
    epoch: int = 0
    rng_state: dict = None
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def spec_hash(self):
        return self.spec.digest()


def save_checkpoint(ckpt, path):
    shapes = ckpt.spec.param_shapes()
    for name, shape in shapes.items():
        if name not in ckpt.params or tuple(np.shape(ckpt.params[name])) != tuple(shape):
            raise ShapeMismatchError(f"{name}: parameters do not match the model spec")
    meta = {"spec": ckpt.spec.to_dict(), "spec_hash": ckpt.spec_hash, "epoch": ckpt.epoch,
            "rng_state": ckpt.rng_state, "config_digest": ckpt.config_digest, "extra": ckpt.extra}
    tensors = {META_KEY: _meta_tensor(meta)}
    tensors.update((name, np.asarray(ckpt.params[name])) for name in shapes)
    save_tensors(path, tensors)


def load_checkpoint(path):
    tensors = load_tensors(path)
    if META_KEY not in tensors:
        raise CheckpointError("not a checkpoint: metadata block missing")
    meta = _meta_from_tensor(tensors.pop(META_KEY))
    spec = ModelSpec.from_dict(meta["spec"])
    if spec.digest() != meta["spec_hash"]:
        raise CheckpointError("spec hash does not match the stored spec")
    shapes = spec.param_shapes()
    if set(shapes) != set(tensors):
        raise ShapeMismatchError("parameter names do not match the model spec")
    for name, shape in shapes.items():
        if tensors[name].shape != tuple(shape):
            raise ShapeMismatchError(f"{name}: stored shape {tensors[name].shape} != spec {shape}")
    params = {name: tensors[name] for name in shapes}
    return Checkpoint(spec, params, meta["epoch"], meta["rng_state"],
                      meta["config_digest"], meta.get("extra", {}))
