"""Binary tensor checkpoints.

Layout (little-endian throughout): magic ``LIFTCKPT``, u32 version (1), u32
tensor count, then per tensor: u16 name length, UTF-8 name, u8 rank, one u64
per dimension, u8 dtype code (0 = float32, 1 = float64), raw element bytes in
row-major order. The file ends with the CRC32 (u32) of every preceding byte.
The CRC is validated before any parsing, so truncation or corruption anywhere
surfaces as a checksum error rather than a garbled read.
"""

from __future__ import annotations

import struct
import zlib
from typing import Mapping, Optional

import numpy as np

from .model import HeadParams
from .training import AdamState

MAGIC = b"LIFTCKPT"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class ChecksumError(CheckpointError):
    """File CRC32 does not match its contents (truncation or corruption)."""


class FormatError(CheckpointError):
    """Bad magic, version, or structural field."""


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Serialize name->array pairs in iteration order."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise FormatError(f"tensor {name} has unsupported dtype {arr.dtype}")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name!r}")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            parts.append(struct.pack("<Q", dim))
        parts.append(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def read_tensors(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint back into name->array pairs in file order."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 12:
        raise ChecksumError(f"{path}: file too short to hold a checksum")
    blob, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        (code,) = struct.unpack_from("<B", blob, off)
        off += 1
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: tensor {name} has unknown dtype code {code}")
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if off + n_bytes > len(blob):
            raise FormatError(f"{path}: tensor {name} overruns the file")
        arr = np.frombuffer(blob, dtype=dtype, count=n_bytes // dtype.itemsize,
                            offset=off).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        off += n_bytes
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after last tensor")
    return out


def save_checkpoint(params: HeadParams, opt_state: Optional[AdamState], path) -> None:
    """Write model parameters and, if given, optimizer state to one file.

    Optimizer entries are stored as ``adam.m.<name>``, ``adam.v.<name>`` and
    a scalar ``adam.step`` alongside the plain parameter names.
    """
    tensors: dict[str, np.ndarray] = {n: t.data for n, t in params.named_parameters()}
    if opt_state is not None:
        tensors["adam.step"] = np.array(opt_state.step, dtype=np.float64)
        for name, arr in opt_state.m.items():
            tensors[f"adam.m.{name}"] = arr
        for name, arr in opt_state.v.items():
            tensors[f"adam.v.{name}"] = arr
    write_tensors(path, tensors)


def load_checkpoint(path, params: HeadParams,
                    opt_state: Optional[AdamState] = None
                    ) -> tuple[HeadParams, Optional[AdamState]]:
    """Load a checkpoint into existing structures (shape-checked by name).

    Pass an AdamState to restore optimizer moments too; a checkpoint saved
    without them then fails with FormatError.
    """
    tensors = read_tensors(path)
    for name, t in params.named_parameters():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        arr = tensors.pop(name)
        if arr.shape != t.shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(t.data.dtype, copy=False)
        t.grad = None
    if opt_state is not None:
        if "adam.step" not in tensors:
            raise FormatError(f"{path}: missing tensor adam.step")
        opt_state.step = int(tensors.pop("adam.step"))
        for prefix, store in (("adam.m.", opt_state.m), ("adam.v.", opt_state.v)):
            for name in list(store):
                key = prefix + name
                if key not in tensors:
                    raise FormatError(f"{path}: missing tensor {key}")
                arr = tensors.pop(key)
                if arr.shape != store[name].shape:
                    raise FormatError(
                        f"{path}: tensor {key} has shape {arr.shape}, "
                        f"expected {store[name].shape}")
                store[name] = arr.astype(store[name].dtype, copy=False)
    unexpected = [k for k in tensors if not k.startswith("adam.")]
    if unexpected:
        raise FormatError(f"{path}: unexpected tensors {unexpected[:5]}")
    return params, opt_state
