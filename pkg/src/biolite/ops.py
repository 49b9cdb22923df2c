"""Forward and backward kernels for the layers of the segmentation network.

Every kernel is a pure function of its arguments and preserves the input
dtype, so the same code runs in float32 for training/inference and in
float64 for finite-difference gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import InternalError, ShapeError
from .tensor import check4

@dataclass
class ConvDWParams:
    depthwise_kernel: np.ndarray  # (c_in, 1, 3, 3)
    depthwise_bias: np.ndarray  # (c_in,)
    pointwise_kernel: np.ndarray  # (c_out, c_in, 1, 1)
    pointwise_bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        c_in = self.depthwise_kernel.shape[0]
        if self.depthwise_kernel.shape != (c_in, 1, 3, 3):
            raise ShapeError(f"depthwise kernel must be (c, 1, 3, 3), got {self.depthwise_kernel.shape}")
        if self.depthwise_bias.shape != (c_in,):
            raise ShapeError(f"depthwise bias must be ({c_in},), got {self.depthwise_bias.shape}")
        pk = self.pointwise_kernel
        if pk.ndim != 4 or pk.shape[1:] != (c_in, 1, 1):
            raise ShapeError(f"pointwise kernel must be (c_out, {c_in}, 1, 1), got {pk.shape}")
        if self.pointwise_bias.shape != (pk.shape[0],):
            raise ShapeError(f"pointwise bias must be ({pk.shape[0]},), got {self.pointwise_bias.shape}")

    @property
    def c_in(self) -> int:
        return self.depthwise_kernel.shape[0]

    @property
    def c_out(self) -> int:
        return self.pointwise_kernel.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.depthwise_kernel, self.depthwise_bias, self.pointwise_kernel, self.pointwise_bias)

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


# ---------------------------------------------------------------- depthwise 3x3


@numba.njit(cache=True)
def _dw3x3_padded(xp, k, b, out):
    # out[n, c, h, w] = b[c] + sum_ij k[c, i, j] * xp[n, c, h + i, w + j]
    N, C, H, W = out.shape
    for n in range(N):
        for c in range(C):
            k00, k01, k02 = k[c, 0, 0], k[c, 0, 1], k[c, 0, 2]
            k10, k11, k12 = k[c, 1, 0], k[c, 1, 1], k[c, 1, 2]
            k20, k21, k22 = k[c, 2, 0], k[c, 2, 1], k[c, 2, 2]
            bc = b[c]
            for h in range(H):
                r0 = xp[n, c, h]
                r1 = xp[n, c, h + 1]
                r2 = xp[n, c, h + 2]
                o = out[n, c, h]
                for w in range(W):
                    o[w] = bc + (k00 * r0[w] + k01 * r0[w + 1] + k02 * r0[w + 2]) \
                        + (k10 * r1[w] + k11 * r1[w + 1] + k12 * r1[w + 2]) \
                        + (k20 * r2[w] + k21 * r2[w + 1] + k22 * r2[w + 2])


@numba.njit(cache=True, fastmath=True)
def _dw3x3_kernel_grad(xp, dy, dk):
    # float64 accumulators regardless of input dtype
    N, C, H, W = dy.shape
    for c in range(C):
        acc = np.zeros(9)
        for n in range(N):
            for h in range(H):
                d = dy[n, c, h]
                for i in range(3):
                    r = xp[n, c, h + i]
                    s0 = 0.0
                    s1 = 0.0
                    s2 = 0.0
                    for w in range(W):
                        s0 += d[w] * r[w]
                        s1 += d[w] * r[w + 1]
                        s2 += d[w] * r[w + 2]
                    acc[3 * i] += s0
                    acc[3 * i + 1] += s1
                    acc[3 * i + 2] += s2
        for t in range(9):
            dk[c, t // 3, t % 3] = acc[t]


def _pad1(x):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def depthwise_conv3x3_fwd(x, kernel, bias):
    """Per-channel 3x3 cross-correlation with zero padding 1 (output same size)."""
    check4(x, "x")
    c = x.shape[1]
    if kernel.shape != (c, 1, 3, 3) or bias.shape != (c,):
        raise ShapeError(f"depthwise params {kernel.shape}/{bias.shape} do not match input channels {c}")
    k = np.ascontiguousarray(kernel[:, 0], dtype=x.dtype)
    out = np.empty_like(x)
    _dw3x3_padded(_pad1(x), k, bias.astype(x.dtype), out)
    return out


def depthwise_conv3x3_bwd(x, kernel, dy):
    """Returns (dx, dkernel, dbias)."""
    if dy.shape != x.shape:
        raise InternalError(f"upstream grad {dy.shape} does not match cached input {x.shape}")
    c = x.shape[1]
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    # input gradient is the same correlation with the kernel rotated by 180 degrees
    flipped = np.ascontiguousarray(kernel[:, 0, ::-1, ::-1], dtype=x.dtype)
    dx = np.empty_like(x)
    _dw3x3_padded(_pad1(dy), flipped, np.zeros(c, dtype=x.dtype), dx)
    dk = np.empty((c, 3, 3), dtype=x.dtype)
    _dw3x3_kernel_grad(_pad1(x), dy, dk)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dk.reshape(c, 1, 3, 3), db


# ---------------------------------------------------------------- pointwise 1x1


def pointwise_conv1x1_fwd(x, kernel, bias):
    check4(x, "x")
    n, c, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[1:] != (c, 1, 1):
        raise ShapeError(f"pointwise kernel {kernel.shape} does not match input channels {c}")
    c_out = kernel.shape[0]
    wmat = kernel.reshape(c_out, c).astype(x.dtype, copy=False)
    y = np.matmul(wmat, x.reshape(n, c, h * w))
    y += bias.astype(x.dtype, copy=False)[:, None]
    return y.reshape(n, c_out, h, w)


def pointwise_conv1x1_bwd(x, kernel, dy):
    n, c, h, w = x.shape
    c_out = kernel.shape[0]
    if dy.shape != (n, c_out, h, w):
        raise InternalError(f"upstream grad {dy.shape} does not match expected {(n, c_out, h, w)}")
    wmat = kernel.reshape(c_out, c).astype(x.dtype, copy=False)
    dy2 = dy.reshape(n, c_out, h * w)
    x2 = x.reshape(n, c, h * w)
    dx = np.matmul(wmat.T, dy2).reshape(x.shape)
    dk = np.zeros((c_out, c), dtype=x.dtype)
    for b in range(n):
        dk += dy2[b] @ x2[b].T
    db = dy2.sum(axis=(0, 2))
    return dx, dk.reshape(kernel.shape), db


# ---------------------------------------------------------------- activation


def relu_fwd(x):
    return np.maximum(x, 0)


def relu_bwd(x, dy):
    return dy * (x > 0)


# ---------------------------------------------------------------- composed block


def dwsep_block_fwd(x, params: ConvDWParams, activation: str | None = "relu"):
    """depthwise 3x3 -> pointwise 1x1 -> activation. Returns (y, cache)."""
    if activation not in ("relu", None):
        raise ValueError(f"unsupported activation {activation!r}")
    if x.ndim == 4 and x.shape[1] != params.c_in:
        raise ShapeError(f"block expects {params.c_in} input channels, got {x.shape[1]}")
    mid = depthwise_conv3x3_fwd(x, params.depthwise_kernel, params.depthwise_bias)
    pre = pointwise_conv1x1_fwd(mid, params.pointwise_kernel, params.pointwise_bias)
    y = relu_fwd(pre) if activation == "relu" else pre
    return y, (x, mid, pre, activation)


def dwsep_block_bwd(params: ConvDWParams, cache, dy):
    """Returns (dx, ConvDWParams of gradients)."""
    x, mid, pre, activation = cache
    if dy.shape != pre.shape:
        raise InternalError(f"upstream grad {dy.shape} does not match cached output {pre.shape}")
    dpre = relu_bwd(pre, dy) if activation == "relu" else dy
    dmid, dpk, dpb = pointwise_conv1x1_bwd(mid, params.pointwise_kernel, dpre)
    dx, ddk, ddb = depthwise_conv3x3_bwd(x, params.depthwise_kernel, dmid)
    return dx, ConvDWParams(ddk, ddb, dpk, dpb)


# ---------------------------------------------------------------- max pooling


@numba.njit(cache=True)
def _maxpool_kernel(x, out, idx):
    N, C, H2, W2 = out.shape
    for n in range(N):
        for c in range(C):
            for i in range(H2):
                r0 = x[n, c, 2 * i]
                r1 = x[n, c, 2 * i + 1]
                for j in range(W2):
                    # row-major window order; strict '>' keeps the first maximum
                    best = r0[2 * j]
                    k = 0
                    if r0[2 * j + 1] > best:
                        best = r0[2 * j + 1]
                        k = 1
                    if r1[2 * j] > best:
                        best = r1[2 * j]
                        k = 2
                    if r1[2 * j + 1] > best:
                        best = r1[2 * j + 1]
                        k = 3
                    out[n, c, i, j] = best
                    idx[n, c, i, j] = k


@numba.njit(cache=True)
def _maxpool_route(idx, dy, dx):
    N, C, H2, W2 = dy.shape
    for n in range(N):
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    k = idx[n, c, i, j]
                    dx[n, c, 2 * i + k // 2, 2 * j + k % 2] = dy[n, c, i, j]


def maxpool2x2_fwd(x):
    """2x2/stride-2 max pooling. Returns (y, argmax) with argmax in 0..3 per window.

    Window slots are numbered row-major, (0,0)=0 ... (1,1)=3; ties go to the lowest slot.
    """
    check4(x, "x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got {h}x{w}")
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty(out.shape, dtype=np.uint8)
    _maxpool_kernel(np.ascontiguousarray(x), out, idx)
    return out, idx


def maxpool2x2_bwd(argmax, dy):
    if argmax.shape != dy.shape:
        raise InternalError(f"pool indices {argmax.shape} do not match upstream grad {dy.shape}")
    n, c, h2, w2 = dy.shape
    dx = np.zeros((n, c, 2 * h2, 2 * w2), dtype=dy.dtype)
    _maxpool_route(argmax, np.ascontiguousarray(dy), dx)
    return dx


# ---------------------------------------------------------------- bilinear 2x upsampling
#
# Half-pixel centres: output index o samples source coordinate (o + 0.5) / 2 - 0.5,
# clamped to the border. For o = 2i that is i - 0.25 and for o = 2i + 1 it is
# i + 0.25, so each output row/column mixes the nearest source line (weight 0.75)
# with its outward neighbour (weight 0.25, edge-replicated).


@numba.njit(cache=True)
def _up2x_kernel(x, out):
    N, C, H, W = x.shape
    for n in range(N):
        for c in range(C):
            for oh in range(2 * H):
                i = oh // 2
                i2 = max(i - 1, 0) if oh % 2 == 0 else min(i + 1, H - 1)
                ra = x[n, c, i]
                rb = x[n, c, i2]
                o = out[n, c, oh]
                for j in range(W):
                    jp = max(j - 1, 0)
                    jn = min(j + 1, W - 1)
                    ca = 0.75 * ra[j] + 0.25 * rb[j]
                    o[2 * j] = 0.75 * ca + 0.25 * (0.75 * ra[jp] + 0.25 * rb[jp])
                    o[2 * j + 1] = 0.75 * ca + 0.25 * (0.75 * ra[jn] + 0.25 * rb[jn])


@numba.njit(cache=True)
def _up2x_adjoint(dy, dx):
    N, C, H, W = dx.shape
    for n in range(N):
        for c in range(C):
            for oh in range(2 * H):
                i = oh // 2
                i2 = max(i - 1, 0) if oh % 2 == 0 else min(i + 1, H - 1)
                g = dy[n, c, oh]
                da = dx[n, c, i]
                db = dx[n, c, i2]
                for j in range(W):
                    jp = max(j - 1, 0)
                    jn = min(j + 1, W - 1)
                    ge = g[2 * j]
                    go = g[2 * j + 1]
                    # transpose of the forward expression, term by term
                    da[j] += 0.5625 * (ge + go)
                    db[j] += 0.1875 * (ge + go)
                    da[jp] += 0.1875 * ge
                    db[jp] += 0.0625 * ge
                    da[jn] += 0.1875 * go
                    db[jn] += 0.0625 * go


def bilinear_up2x_fwd(x):
    check4(x, "x")
    n, c, h, w = x.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    _up2x_kernel(np.ascontiguousarray(x), out)
    return out


def bilinear_up2x_bwd(dy):
    """Exact transpose of ``bilinear_up2x_fwd``."""
    check4(dy, "dy")
    n, c, h2, w2 = dy.shape
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"upsample gradient must have even spatial dims, got {dy.shape}")
    dx = np.zeros((n, c, h2 // 2, w2 // 2), dtype=dy.dtype)
    _up2x_adjoint(np.ascontiguousarray(dy), dx)
    return dx


# ---------------------------------------------------------------- softmax


def log_softmax_channels(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_channels_fwd(x):
    check4(x, "x")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
