"""Named-tensor manifest files used for weights and checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"DOLGTNSR"
    version    u32
    count      u32
    count x {
        name_len  u16,  name  utf-8
        ndim      u8,   dims  ndim x u32
        payload   prod(dims) x float32 (row-major)
    }
    meta_len   u32,  meta  utf-8 JSON (may be empty)

Integer buffers (BatchNorm counters) are stored as float32 and cast back on load.
"""

import json
import struct

import numpy as np
import torch

from .errors import FormatError, ShapeError

MAGIC = b"DOLGTNSR"
VERSION = 1


def write_tensors(path, tensors, meta=None):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(_to_numpy(value), dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    raw_meta = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(raw_meta)) + raw_meta)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_tensors(path):
    """Return ``(tensors, meta)`` where tensors maps name -> float32 ndarray."""
    with open(path, "rb") as fh:
        buf = fh.read()
    reader = _Reader(buf)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic bytes, not a tensor manifest", 0)
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", len(MAGIC))
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = reader.unpack("<B", "ndim")
        dims = reader.unpack(f"<{ndim}I", "dims")
        n = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(4 * n, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    (meta_len,) = reader.unpack("<I", "metadata length")
    meta = json.loads(reader.take(meta_len, "metadata").decode("utf-8") or "{}")
    if reader.pos != len(buf):
        raise FormatError(f"{len(buf) - reader.pos} trailing bytes", reader.pos)
    return tensors, meta


def load_into(module, tensors, strict=True):
    """Copy manifest tensors into `module`'s state dict, checking shapes."""
    state = module.state_dict()
    missing = [k for k in state if k not in tensors]
    unexpected = [k for k in tensors if k not in state]
    if strict and (missing or unexpected):
        raise ShapeError(f"manifest mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    for name, arr in tensors.items():
        if name not in state:
            continue
        target = state[name]
        if tuple(target.shape) != tuple(arr.shape):
            raise ShapeError(
                f"tensor {name!r}: manifest shape {tuple(arr.shape)} != model shape {tuple(target.shape)}"
            )
        state[name] = torch.from_numpy(arr).to(dtype=target.dtype)
    module.load_state_dict(state, strict=False)
    return missing


def _to_numpy(value):
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().to(torch.float64).numpy()
    return np.asarray(value)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
