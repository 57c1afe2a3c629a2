"""
Reader and writer for the ".nt" tensor file format.

Layout: magic ``NT01``, u32 little-endian rank, ``rank`` u32 extents, then
product(extents) little-endian float32 values. No padding anywhere.
"""

import logging
import os
import struct
from typing import Union

import numpy as np

from src.autodiff import Tensor
from src.exceptions import TensorFormatError

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

MAGIC = b"NT01"
MAX_RANK = 16
_PAYLOAD_DTYPE = np.dtype("<f4")


def encode_array(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(np.asarray(array), dtype=_PAYLOAD_DTYPE)
    header = MAGIC + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape) if array.ndim else b""
    return header + array.tobytes(order="C")


def decode_array(blob: bytes) -> np.ndarray:
    """Parse an ".nt" byte string; every failure names the byte offset where parsing stopped."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    if len(blob) < 8:
        raise TensorFormatError("header short: missing rank", 4)
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank > MAX_RANK:
        raise TensorFormatError(f"bad rank {rank} (maximum {MAX_RANK})", 4)
    offset = 8
    shape = []
    for axis in range(rank):
        if len(blob) < offset + 4:
            raise TensorFormatError(f"header short: missing extent {axis} of {rank}", offset)
        (extent,) = struct.unpack_from("<I", blob, offset)
        if extent == 0:
            raise TensorFormatError(f"bad extent 0 on axis {axis}", offset)
        shape.append(extent)
        offset += 4
    expected = int(np.prod(shape, dtype=np.int64)) * _PAYLOAD_DTYPE.itemsize
    available = len(blob) - offset
    if available < expected:
        raise TensorFormatError(f"payload short: expected {expected} bytes, found {available}", offset + available)
    if available > expected:
        raise TensorFormatError(f"trailing data: {available - expected} bytes after payload", offset + expected)
    payload = np.frombuffer(blob, dtype=_PAYLOAD_DTYPE, count=expected // 4, offset=offset)
    return payload.astype(np.float32).reshape(shape)


def save_array(array: np.ndarray, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_array(array))
    return path


def load_array(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_array(f.read())


def save_tensor(t: Union[Tensor, np.ndarray], path: str) -> str:
    """
    Write a tensor to ``path`` in ".nt" format.

    Args:
        t: Tensor (or raw array) to store; values are written as float32
        path: Destination file

    Returns:
        The path written
    """
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    save_array(data, path)
    logger.debug(f"Saved tensor {data.shape} to {path}")
    return path


def load_tensor(path: str, requires_grad: bool = False) -> Tensor:
    return Tensor(load_array(path), requires_grad=requires_grad)
