"""Binary tensor files and JSON/npz artifacts.

TensorFile layout (little-endian)::

    b"QTNSR1" | u8 dtype (0 = f32) | u8 rank | rank x u64 extents | f32 payload | [u32 CRC32]

The CRC32 (zlib polynomial) covers the payload only and is optional; a file
either ends right after the payload or carries exactly four more bytes.
"""

import json
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .peg import GroupSpec, GroupSpecError
from .quant import PerEmbedding, PerEmbeddingGroup, PerTensor, QParams, QuantError, VectorQParams

MAGIC = b"QTNSR1"
DTYPE_F32 = 0
SPEC_VERSION = 1
MODEL_CONFIG_KEY = "__config__"


class TensorFileError(ValueError):
    """Malformed tensor file; ``offset`` is the byte position of the problem."""

    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class TensorFile:
    data: np.ndarray
    has_crc: bool


def encode_tensor(array, crc=True):
    src = np.asarray(array, dtype="<f4")
    arr = np.ascontiguousarray(src).reshape(src.shape)  # keeps rank 0
    if arr.ndim > 255:
        raise TensorFileError(f"rank {arr.ndim} does not fit in one byte")
    payload = arr.tobytes(order="C")
    head = MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    tail = struct.pack("<I", zlib.crc32(payload)) if crc else b""
    return head + payload + tail


def decode_tensor(buf):
    buf = bytes(buf)
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise TensorFileError("bad magic, expected b'QTNSR1'", 0)
    pos = len(MAGIC)
    if len(buf) < pos + 2:
        raise TensorFileError("truncated header", len(buf))
    dtype, rank = struct.unpack_from("<BB", buf, pos)
    if dtype != DTYPE_F32:
        raise TensorFileError(f"unsupported dtype tag {dtype}", pos)
    pos += 2
    if len(buf) < pos + 8 * rank:
        raise TensorFileError(f"truncated extents for rank {rank}", len(buf))
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    nbytes = 4 * math.prod(shape)
    extra = len(buf) - pos - nbytes
    if extra < 0:
        raise TensorFileError(f"payload truncated: need {nbytes} bytes, have {len(buf) - pos}", len(buf))
    if extra not in (0, 4):
        raise TensorFileError(f"{extra} unexpected trailing bytes", pos + nbytes)
    payload = buf[pos:pos + nbytes]
    if extra == 4:
        (stored,) = struct.unpack_from("<I", buf, pos + nbytes)
        actual = zlib.crc32(payload)
        if stored != actual:
            raise TensorFileError(f"CRC mismatch: stored {stored:#010x}, computed {actual:#010x}",
                                  pos + nbytes)
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return TensorFile(data, extra == 4)


def write_tensor(path, array, crc=True):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array, crc))


def read_tensor(path):
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


# -- JSON artifacts ----------------------------------------------------------

def group_spec_to_json(spec):
    obj = {"version": SPEC_VERSION, **spec.to_dict(),
           "groups": [spec.group_indices(g).tolist() for g in range(spec.k)]}
    return json.dumps(obj, indent=2, sort_keys=True)


def group_spec_from_json(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GroupSpecError(f"group spec is not valid JSON: {exc}") from exc
    if obj.get("version") != SPEC_VERSION:
        raise GroupSpecError(f"unsupported group spec version {obj.get('version')!r}")
    return GroupSpec.from_dict(obj)


def save_model(path, model):
    arrays = {k: np.asarray(v) for k, v in model.params.items()}
    arrays[MODEL_CONFIG_KEY] = np.array(json.dumps(model.config.to_dict(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path):
    from .encoder.model import Encoder, EncoderConfig

    with np.load(path, allow_pickle=False) as z:
        if MODEL_CONFIG_KEY not in z:
            raise TensorFileError(f"{path} has no model config entry")
        cfg = EncoderConfig(**json.loads(str(z[MODEL_CONFIG_KEY])))
        params = {k: z[k].copy() for k in z.files if k != MODEL_CONFIG_KEY}
    return Encoder(cfg, params)


def qparams_from_dict(obj):
    """Inverse of ``QParams.to_dict`` / ``VectorQParams.to_dict``."""
    try:
        gran = obj.get("granularity")
        if gran is None:
            return QParams(int(obj["bit_width"]), float(obj["scale"]), int(obj["zero_point"]),
                           bool(obj["symmetric"]))
        kind = gran["kind"]
        if kind == "tensor":
            g = PerTensor()
        elif kind == "embedding":
            g = PerEmbedding(int(gran["d"]))
        elif kind == "peg":
            g = PerEmbeddingGroup(GroupSpec.from_dict(gran["spec"]))
        else:
            raise QuantError(f"unknown granularity kind {kind!r}")
        return VectorQParams(int(obj["bit_width"]), np.asarray(obj["scale"], dtype=np.float64),
                             np.asarray(obj["zero_point"], dtype=np.int64), bool(obj["symmetric"]), g)
    except (KeyError, TypeError, AttributeError) as exc:
        raise QuantError(f"malformed quantization params: {exc!r}") from exc
