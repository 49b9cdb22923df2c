"""Rank-4 NCHW tensors.

Tensors are plain ``numpy.ndarray`` objects with ``ndim == 4`` laid out as
(batch, channel, height, width) in C order. float32 is the production dtype;
the same kernels accept float64 for gradient checking.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    def validate(self) -> "Shape":
        if any(int(d) <= 0 for d in self):
            raise ShapeError(f"all dimensions must be positive, got {tuple(self)}")
        return self

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


def check4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) <= 0:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


def new_filled(shape, value: float, dtype=DTYPE) -> np.ndarray:
    shape = Shape(*shape).validate()
    return np.full(tuple(shape), value, dtype=dtype)


def offset(shape, index) -> int:
    """Flat row-major offset of ``index = (n, c, h, w)``."""
    _, C, H, W = Shape(*shape).validate()
    n, c, h, w = index
    return ((n * C + c) * H + h) * W + w


def unravel(shape, off: int) -> tuple[int, int, int, int]:
    _, C, H, W = Shape(*shape).validate()
    off, w = divmod(off, W)
    off, h = divmod(off, H)
    n, c = divmod(off, C)
    return n, c, h, w


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    check4(a, "a")
    check4(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}") from None
    return fn(a, b)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``b``'s channels after ``a``'s: channels [0, a.c) then [a.c, a.c + b.c)."""
    check4(a, "a")
    check4(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concat {a.shape} and {b.shape}: batch/spatial dims differ")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, c_first: int) -> tuple[np.ndarray, np.ndarray]:
    check4(x)
    if not 0 < c_first < x.shape[1]:
        raise ShapeError(f"split point {c_first} outside (0, {x.shape[1]})")
    return x[:, :c_first], x[:, c_first:]
