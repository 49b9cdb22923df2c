"""BioLite U-Net: a two-level encoder/decoder built from depthwise-separable blocks.

Dataflow::

    x -> enc1 -> pool -> enc2 -> pool -> bottleneck
      -> up -> concat(., enc2) -> dec1 -> up -> concat(., enc1) -> dec2 -> head

In each concat the upsampled decoder features occupy the leading channels and
the encoder skip features follow them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import InternalError, ShapeError
from .tensor import DTYPE, check4

BLOCKS = ("enc1", "enc2", "bottleneck", "dec1", "dec2")
BLOCK_SUFFIXES = ("dw.weight", "dw.bias", "pw.weight", "pw.bias")

# FLOP convention: a multiply-add is 2 FLOPs, biases/ReLU/pool/concat are free,
# and a bilinear output element is 4 multiply-adds.
UPSAMPLE_FLOPS_PER_ELEM = 8


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    num_classes: int = 3
    enc_channels: tuple[int, int] = (16, 40)
    bottleneck_channels: int = 56
    dec_channels: tuple[int, int] = (40, 16)

    def __post_init__(self):
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(int(c) for c in self.dec_channels))
        if self.num_classes != 3:
            raise ValueError("num_classes must be 3 (background, bioink, nozzle)")
        if len(self.enc_channels) != 2 or len(self.dec_channels) != 2:
            raise ValueError("exactly two encoder and two decoder levels are supported")
        widths = (self.in_channels, *self.enc_channels, self.bottleneck_channels, *self.dec_channels)
        if any(c <= 0 for c in widths):
            raise ValueError(f"channel widths must be positive, got {widths}")

    def block_channels(self) -> dict[str, tuple[int, int]]:
        """(c_in, c_out) of every depthwise-separable block."""
        c1, c2 = self.enc_channels
        c3 = self.bottleneck_channels
        d1, d2 = self.dec_channels
        return {
            "enc1": (self.in_channels, c1),
            "enc2": (c1, c2),
            "bottleneck": (c2, c3),
            "dec1": (c3 + c2, d1),
            "dec2": (d1 + c1, d2),
        }

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every parameter name and shape, in serialization order."""
        shapes = {}
        for name, (ci, co) in self.block_channels().items():
            shapes[f"{name}.dw.weight"] = (ci, 1, 3, 3)
            shapes[f"{name}.dw.bias"] = (ci,)
            shapes[f"{name}.pw.weight"] = (co, ci, 1, 1)
            shapes[f"{name}.pw.bias"] = (co,)
        shapes["head.weight"] = (self.num_classes, self.dec_channels[1], 1, 1)
        shapes["head.bias"] = (self.num_classes,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        d["dec_channels"] = list(self.dec_channels)
        return d


@dataclass
class ModelParams:
    config: ArchConfig
    tensors: dict[str, np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        expected = self.config.param_shapes()
        if list(self.tensors) != list(expected):
            raise InternalError(f"parameter names {list(self.tensors)} do not follow {list(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def block(self, name: str) -> ops.ConvDWParams:
        t = self.tensors
        return ops.ConvDWParams(*(t[f"{name}.{s}"] for s in BLOCK_SUFFIXES))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.seed)


def fan_in(shape) -> int:
    # depthwise (c, 1, 3, 3) -> 9; pointwise (c_out, c_in, 1, 1) -> c_in
    return int(np.prod(shape[1:]))


# Kaiming-uniform gains: sqrt(2) where a ReLU follows, 1 for the linear depthwise
# stage, and a small head gain so that initial logits are near-uniform.
INIT_GAINS = {"dw": 1.0, "pw": float(np.sqrt(2.0)), "head": 0.25}


def init_bound(name: str, shape) -> float:
    kind = "head" if name.startswith("head") else name.split(".")[1]
    return INIT_GAINS[kind] * float(np.sqrt(3.0 / fan_in(shape)))


def build(config: ArchConfig = ArchConfig(), seed: int = 0) -> ModelParams:
    """Weights ~ U(-b, b), b = gain * sqrt(3 / fan_in) with gains from ``INIT_GAINS``; zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("bias"):
            tensors[name] = np.zeros(shape, dtype=DTYPE)
        else:
            bound = init_bound(name, shape)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return ModelParams(config, tensors, seed)


# ---------------------------------------------------------------- forward / backward


def forward(params: ModelParams, x: np.ndarray, cache: bool = False):
    """Logits at input resolution. With ``cache=True`` returns (logits, cache)."""
    check4(x, "x")
    cfg = params.config
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {c}")
    if h % 4 or w % 4:
        raise ShapeError(f"spatial dims must be divisible by 4, got {h}x{w}")
    st = {}
    e1, st["enc1"] = ops.dwsep_block_fwd(x, params.block("enc1"))
    p1, st["pool1"] = ops.maxpool2x2_fwd(e1)
    e2, st["enc2"] = ops.dwsep_block_fwd(p1, params.block("enc2"))
    p2, st["pool2"] = ops.maxpool2x2_fwd(e2)
    b, st["bottleneck"] = ops.dwsep_block_fwd(p2, params.block("bottleneck"))
    u1 = ops.bilinear_up2x_fwd(b)
    d1, st["dec1"] = ops.dwsep_block_fwd(np.concatenate([u1, e2], axis=1), params.block("dec1"))
    u2 = ops.bilinear_up2x_fwd(d1)
    d2, st["dec2"] = ops.dwsep_block_fwd(np.concatenate([u2, e1], axis=1), params.block("dec2"))
    logits = ops.pointwise_conv1x1_fwd(d2, params["head.weight"], params["head.bias"])
    if not cache:
        return logits
    st["head_in"] = d2
    return logits, st


def backward(params: ModelParams, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every parameter, keyed and ordered like ``params``."""
    if not cache:
        raise InternalError("backward needs the cache from forward(..., cache=True)")
    cfg = params.config
    c1, c2 = cfg.enc_channels
    c3 = cfg.bottleneck_channels
    d1c = cfg.dec_channels[0]
    g = {}

    dd2, g["head.weight"], g["head.bias"] = ops.pointwise_conv1x1_bwd(cache["head_in"], params["head.weight"], dlogits)
    dcat2, bg = ops.dwsep_block_bwd(params.block("dec2"), cache["dec2"], dd2)
    _store(g, "dec2", bg)
    du2, de1_skip = dcat2[:, :d1c], dcat2[:, d1c:]
    dd1 = ops.bilinear_up2x_bwd(du2)
    dcat1, bg = ops.dwsep_block_bwd(params.block("dec1"), cache["dec1"], dd1)
    _store(g, "dec1", bg)
    du1, de2_skip = dcat1[:, :c3], dcat1[:, c3:]
    db = ops.bilinear_up2x_bwd(du1)
    dp2, bg = ops.dwsep_block_bwd(params.block("bottleneck"), cache["bottleneck"], db)
    _store(g, "bottleneck", bg)
    de2 = ops.maxpool2x2_bwd(cache["pool2"], dp2) + de2_skip
    dp1, bg = ops.dwsep_block_bwd(params.block("enc2"), cache["enc2"], de2)
    _store(g, "enc2", bg)
    de1 = ops.maxpool2x2_bwd(cache["pool1"], dp1) + de1_skip
    _, bg = ops.dwsep_block_bwd(params.block("enc1"), cache["enc1"], de1)
    _store(g, "enc1", bg)
    assert de1_skip.shape[1] == c1 and de2_skip.shape[1] == c2
    return {name: g[name] for name in params.names()}


def _store(grads, prefix, block_grads: ops.ConvDWParams):
    for suffix, arr in zip(BLOCK_SUFFIXES, block_grads.arrays()):
        grads[f"{prefix}.{suffix}"] = arr


# ---------------------------------------------------------------- complexity accounting


@dataclass
class LayerRow:
    name: str
    kind: str
    out_shape: tuple[int, int, int, int]
    params: int = 0
    flops: int = 0
    extra: dict = field(default_factory=dict)


def layer_table(config: ArchConfig, h: int = 256, w: int = 256) -> list[LayerRow]:
    """Analytic per-layer output shape, parameter count and FLOPs for batch size 1.

    depthwise 3x3: 2 * 9 * out_elems; pointwise/head 1x1: 2 * c_in * out_elems;
    bilinear upsample: UPSAMPLE_FLOPS_PER_ELEM * out_elems; pool/concat: 0.
    """
    if h % 4 or w % 4:
        raise ShapeError(f"spatial dims must be divisible by 4, got {h}x{w}")
    chans = config.block_channels()
    rows = []

    def block(name, hh, ww):
        ci, co = chans[name]
        rows.append(LayerRow(f"{name}.dw", "depthwise3x3", (1, ci, hh, ww), ci * 9 + ci, 2 * 9 * ci * hh * ww))
        rows.append(LayerRow(f"{name}.pw", "pointwise1x1", (1, co, hh, ww), ci * co + co, 2 * ci * co * hh * ww))

    c1, c2 = config.enc_channels
    c3 = config.bottleneck_channels
    d1, d2 = config.dec_channels
    block("enc1", h, w)
    rows.append(LayerRow("pool1", "maxpool2x2", (1, c1, h // 2, w // 2)))
    block("enc2", h // 2, w // 2)
    rows.append(LayerRow("pool2", "maxpool2x2", (1, c2, h // 4, w // 4)))
    block("bottleneck", h // 4, w // 4)
    rows.append(LayerRow("up1", "bilinear2x", (1, c3, h // 2, w // 2), 0, UPSAMPLE_FLOPS_PER_ELEM * c3 * h * w // 4))
    rows.append(LayerRow("cat1", "concat", (1, c3 + c2, h // 2, w // 2)))
    block("dec1", h // 2, w // 2)
    rows.append(LayerRow("up2", "bilinear2x", (1, d1, h, w), 0, UPSAMPLE_FLOPS_PER_ELEM * d1 * h * w))
    rows.append(LayerRow("cat2", "concat", (1, d1 + c1, h, w)))
    block("dec2", h, w)
    k = config.num_classes
    rows.append(LayerRow("head", "pointwise1x1", (1, k, h, w), d2 * k + k, 2 * d2 * k * h * w))
    return rows


def count_params(config: ArchConfig) -> int:
    return sum(r.params for r in layer_table(config, 4, 4))


def count_flops(config: ArchConfig, input_shape=(256, 256)) -> int:
    h, w = input_shape[-2:]
    return sum(r.flops for r in layer_table(config, h, w))


def trace_shapes(params: ModelParams, x: np.ndarray) -> dict[str, tuple[int, ...]]:
    """Output shape of every row of ``layer_table`` as observed in an actual forward pass."""
    _, st = forward(params, x, cache=True)
    shapes = {}
    for name in BLOCKS:
        bx, mid, pre, _ = st[name]
        shapes[f"{name}.dw"] = mid.shape
        shapes[f"{name}.pw"] = pre.shape
    shapes["pool1"] = st["enc2"][0].shape
    shapes["pool2"] = st["bottleneck"][0].shape
    c3 = params.config.bottleneck_channels
    d1 = params.config.dec_channels[0]
    cat1 = st["dec1"][0].shape
    cat2 = st["dec2"][0].shape
    shapes["cat1"] = cat1
    shapes["up1"] = (cat1[0], c3, cat1[2], cat1[3])
    shapes["cat2"] = cat2
    shapes["up2"] = (cat2[0], d1, cat2[2], cat2[3])
    shapes["head"] = (x.shape[0], params.config.num_classes, x.shape[2], x.shape[3])
    return shapes
