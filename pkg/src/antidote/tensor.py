"""Dense NCHW tensors, masked broadcast multiply, pooled means and raw serialization.

Tensors are plain ``numpy`` arrays of rank 4 laid out as (batch, channel,
row, col). Everything here preserves the input dtype, so the engine runs in
float32 while gradient checks may feed float64 through the same code.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor or mask dimensions do not line up."""


def check_tensor4(a: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(a, np.ndarray) or a.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 array, got {getattr(a, 'shape', type(a))}")
    if min(a.shape) < 1:
        raise ShapeError(f"{name} has a zero dimension: {a.shape}")
    return a


def new_tensor(dims: Iterable[int], fill: float = 0.0, dtype=DTYPE) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ShapeError(f"expected 4 dims (n, c, h, w), got {dims}")
    if min(dims) < 1:
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    return np.full(dims, fill, dtype=dtype)


def elementwise_mul_broadcast(a: np.ndarray, channel_mask: np.ndarray,
                              spatial_mask: np.ndarray) -> np.ndarray:
    """Multiply ``a`` by a channel mask and a spatial mask.

    ``channel_mask`` is (C,) or per-sample (N, C); ``spatial_mask`` is (H, W)
    or per-sample (N, H, W). Masks are read as {0, 1}. Nothing else is
    broadcast.
    """
    check_tensor4(a)
    n, c, h, w = a.shape
    ch = np.asarray(channel_mask)
    sp = np.asarray(spatial_mask)
    if ch.shape == (c,):
        ch = ch.reshape(1, c, 1, 1)
    elif ch.shape == (n, c):
        ch = ch.reshape(n, c, 1, 1)
    else:
        raise ShapeError(f"channel mask {ch.shape} does not fit tensor {a.shape}")
    if sp.shape == (h, w):
        sp = sp.reshape(1, 1, h, w)
    elif sp.shape == (n, h, w):
        sp = sp.reshape(n, 1, h, w)
    else:
        raise ShapeError(f"spatial mask {sp.shape} does not fit tensor {a.shape}")
    return a * ch.astype(a.dtype) * sp.astype(a.dtype)


def mean_over_spatial(a: np.ndarray) -> np.ndarray:
    """(N, C) matrix of per-channel means over H*W, accumulated in float64."""
    check_tensor4(a)
    return a.mean(axis=(2, 3), dtype=np.float64).astype(a.dtype)


def mean_over_channels(a: np.ndarray) -> np.ndarray:
    """(N, H, W) map of per-location means over channels, accumulated in float64."""
    check_tensor4(a)
    return a.mean(axis=1, dtype=np.float64).astype(a.dtype)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and an optional stream path.

    Distinct ``stream`` tuples give independent streams, which is how callers
    split one seed across epochs, layers and batches.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) for s in stream)])
    return np.random.Generator(np.random.Philox(ss))


# Raw record: four little-endian uint32 dims, then n*c*h*w little-endian float32.
_HEADER = struct.Struct("<4I")


def write_tensor(fh: BinaryIO, a: np.ndarray) -> None:
    a = np.asarray(a)
    dims = tuple(a.shape) + (1,) * (4 - a.ndim)
    if a.ndim > 4 or len(dims) != 4:
        raise ShapeError(f"cannot serialize array of shape {a.shape}")
    fh.write(_HEADER.pack(*dims))
    fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise EOFError("truncated tensor header")
    dims = _HEADER.unpack(head)
    count = int(np.prod(dims))
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise EOFError(f"truncated tensor body: expected {4 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(dims)
