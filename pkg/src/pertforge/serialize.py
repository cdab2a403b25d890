"""Binary tensor files: magic "PFT1", u32 rank, u32 dims, little-endian f32 payload."""

import struct

import numpy as np

from .autograd import Tensor
from .errors import DataError

MAGIC = b"PFT1"


def save_tensor(path, tensor):
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        payload = fh.read()
    expected = 4 * int(np.prod(dims)) if rank else 4
    if len(payload) != expected:
        raise DataError(f"{path}: payload length {len(payload)} != expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Tensor(arr)
