"""FPT1 tensor files: a fixed little-endian header followed by the raw payload.

Layout::

    magic     4 bytes   b"FPT1"
    dtype     1 byte    0x00 binary32, 0x01 fp8-e4m3, 0x02 fp8-e5m2
    rank      1 byte    1..8
    reserved  2 bytes   zero
    dims      rank x uint64 little-endian
    payload   element_count x element size, no padding

FP8 files may carry a ``<path>.meta.json`` sidecar with their scale.
"""

import json
import logging
import struct
from enum import IntEnum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from fp8kit.formats import E4M3, E5M2, Fp8Format, Fp8Tensor, get_format
from fp8kit.scaling import ScaleSet

MAGIC = b"FPT1"
MAX_RANK = 8
MAX_ELEMENTS = 2 ** 40
SIDECAR_SUFFIX = ".meta.json"

_HEADER = struct.Struct('<4sBBH')
_DIM = struct.Struct('<Q')


class Dtype(IntEnum):
    BINARY32 = 0x00
    FP8_E4M3 = 0x01
    FP8_E5M2 = 0x02

    @property
    def itemsize(self) -> int:
        return 4 if self is Dtype.BINARY32 else 1

    @property
    def fp8_format(self) -> Optional[Fp8Format]:
        return {Dtype.FP8_E4M3: E4M3, Dtype.FP8_E5M2: E5M2}.get(self)

    @classmethod
    def for_format(cls, fmt: Fp8Format) -> "Dtype":
        if fmt == E4M3:
            return cls.FP8_E4M3
        if fmt == E5M2:
            return cls.FP8_E5M2
        raise ValueError(f"No FPT1 dtype for format {fmt.name}")


class TensorFileError(Exception):
    """A tensor file could not be read or written; `field` names what was wrong."""

    def __init__(self, field: str, path, message: str):
        self.field = field
        self.path = str(path)
        super().__init__(f"{self.path}: {field}: {message}")


class BadMagic(TensorFileError):
    pass


class BadDtype(TensorFileError):
    pass


class TruncatedPayload(TensorFileError):
    pass


class RankOutOfRange(TensorFileError):
    pass


class ShapeOutOfRange(TensorFileError):
    pass


class BadHeader(TensorFileError):
    pass


TensorLike = Union[np.ndarray, Fp8Tensor]


def _check_shape(shape: Tuple[int, ...], path) -> int:
    if not 1 <= len(shape) <= MAX_RANK:
        raise RankOutOfRange('rank', path, f"rank {len(shape)} not in [1, {MAX_RANK}]")
    count = 1
    for dim in shape:
        if dim < 1:
            raise ShapeOutOfRange('dims', path, f"dimension {dim} in {tuple(shape)} is not positive")
        count *= dim
    if count > MAX_ELEMENTS:
        raise ShapeOutOfRange('dims', path, f"{count} elements exceeds 2^40")
    return count


def encode_header(dtype: Dtype, shape: Tuple[int, ...], path='<memory>') -> bytes:
    _check_shape(tuple(shape), path)
    return _HEADER.pack(MAGIC, int(dtype), len(shape), 0) + b''.join(_DIM.pack(d) for d in shape)


def decode_header(data: bytes, path='<memory>') -> Tuple[Dtype, Tuple[int, ...], int]:
    """Parse a header; returns (dtype, shape, header length)."""
    if len(data) < _HEADER.size:
        raise BadHeader('header', path, f"{len(data)} bytes is shorter than the fixed header")
    magic, dtype_byte, rank, reserved = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic('magic', path, f"expected {MAGIC!r}, found {magic!r}")
    try:
        dtype = Dtype(dtype_byte)
    except ValueError:
        raise BadDtype('dtype', path, f"unknown dtype byte 0x{dtype_byte:02X}") from None
    if not 1 <= rank <= MAX_RANK:
        raise RankOutOfRange('rank', path, f"rank {rank} not in [1, {MAX_RANK}]")
    if reserved != 0:
        raise BadHeader('reserved', path, f"reserved bytes must be zero, found 0x{reserved:04X}")
    header_len = _HEADER.size + rank * _DIM.size
    if len(data) < header_len:
        raise BadHeader('dims', path, f"header declares rank {rank} but dims are cut short")
    shape = tuple(_DIM.unpack_from(data, _HEADER.size + i * _DIM.size)[0] for i in range(rank))
    _check_shape(shape, path)
    return dtype, shape, header_len


def read_tensor(path) -> TensorLike:
    """Read an FPT1 file: float32 ndarray for binary32, Fp8Tensor for fp8 dtypes."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise TensorFileError('io', path, f"could not read: {e}") from e

    dtype, shape, header_len = decode_header(data, path)
    count = int(np.prod(shape, dtype=np.uint64))
    expected = count * dtype.itemsize
    payload = data[header_len:]
    if len(payload) < expected:
        raise TruncatedPayload('payload', path, f"expected {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise BadHeader('payload', path, f"{len(payload) - expected} trailing bytes after payload")

    logging.debug(f"Read {path} ({dtype.name}, shape {shape})")
    if dtype is Dtype.BINARY32:
        return np.frombuffer(payload, dtype='<f4').astype(np.float32).reshape(shape)
    bits = np.frombuffer(payload, dtype=np.uint8).copy().reshape(shape)
    return Fp8Tensor(bits, dtype.fp8_format)


def write_tensor(path, tensor: TensorLike, dtype: Optional[Dtype] = None):
    """Write a tensor as FPT1. binary32 data is written bit-for-bit."""
    path = Path(path)
    if isinstance(tensor, Fp8Tensor):
        natural = Dtype.for_format(tensor.format)
        payload_array = np.ascontiguousarray(tensor.bits, dtype=np.uint8)
    else:
        natural = Dtype.BINARY32
        payload_array = np.ascontiguousarray(np.asarray(tensor, dtype=np.float32), dtype='<f4')
    if dtype is not None and Dtype(dtype) is not natural:
        raise BadDtype('dtype', path, f"cannot write {natural.name} data as {Dtype(dtype).name}")

    header = encode_header(natural, payload_array.shape, path)
    try:
        with open(path, 'wb') as f:
            f.write(header)
            f.write(payload_array.tobytes())
    except OSError as e:
        raise TensorFileError('io', path, f"could not write: {e}") from e
    logging.debug(f"Wrote {path} ({natural.name}, shape {payload_array.shape})")


def sidecar_path(path) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def write_sidecar(path, fmt: Fp8Format, scale_set: ScaleSet) -> Path:
    """Write ``<path>.meta.json`` describing the format and scale of an FP8 file."""
    meta: Dict = {'format': fmt.name}
    meta.update(scale_set.to_dict())
    target = sidecar_path(path)
    try:
        with open(target, 'w', encoding='utf-8') as f:
            json.dump(meta, f, indent=2, sort_keys=True)
    except OSError as e:
        raise TensorFileError('io', target, f"could not write sidecar: {e}") from e
    return target


def read_sidecar(path) -> Optional[Tuple[Fp8Format, ScaleSet]]:
    """Format and ScaleSet from a sidecar, or None when there is no sidecar."""
    target = sidecar_path(path)
    if not target.exists():
        return None
    try:
        with open(target, 'r', encoding='utf-8') as f:
            meta = json.load(f)
        return get_format(meta['format']), ScaleSet.from_dict(meta)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise TensorFileError('sidecar', target, f"unreadable metadata: {e}") from e


def load_as_binary32(path) -> np.ndarray:
    """Read any FPT1 file as binary32; FP8 files are decoded and unscaled via their sidecar."""
    tensor = read_tensor(path)
    if not isinstance(tensor, Fp8Tensor):
        return tensor
    values = tensor.decode()
    meta = read_sidecar(path)
    if meta is None:
        return values
    _, scale_set = meta
    return values * scale_set.reciprocal_broadcast(values.shape)
