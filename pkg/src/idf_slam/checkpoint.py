"""Binary checkpoint format for named float32 tensors.

Layout (all integers little-endian uint32):

    magic  b"IDFW"
    version
    tensor_count
    repeated per tensor:
        name_length, name bytes (UTF-8)
        rank, one dim per axis
        raw float32 data, little-endian, C order

Tensors are written sorted by name so identical parameter sets always
produce identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation

MAGIC = b"IDFW"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: Mapping[str, "np.ndarray | Tensor"]) -> None:
    path = Path(path)
    entries = []
    for name in sorted(tensors):
        value = tensors[name]
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        entries.append((name, np.ascontiguousarray(data, dtype="<f4")))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, data in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ContractViolation(f"{path} is not a checkpoint (bad magic {blob[:4]!r})")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContractViolation(f"unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        out[name] = np.array(data, dtype=np.float32)
    if offset != len(blob):
        raise ContractViolation(f"{path} has {len(blob) - offset} trailing bytes")
    return out
