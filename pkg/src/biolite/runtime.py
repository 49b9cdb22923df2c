"""Deployment side: weight files, the end-to-end inference pipeline, latency and complexity reports.

Weight file layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"BLU1"
    4       2     u16 format version (1)
    6       14    7 x u16: in_channels, num_classes, enc1, enc2, bottleneck, dec1, dec2
    20      24    6 x f32: normalization mean (R, G, B), std (R, G, B)
    44      1     u8 flags (bit 0: CLAHE in the preprocessing path)
    45      4     u32 layer count
    49      ...   layer records, in ModelParams order:
                    u16 name length, UTF-8 name, u8 dtype tag (1 = f32), u8 ndim,
                    ndim x u32 dims, little-endian f32 payload
    end-4   4     u32 CRC-32 (IEEE, as zlib.crc32) of every preceding byte
"""
from __future__ import annotations

import csv
import io
import statistics
import struct
import time
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, model, ops
from .errors import DataError, FormatError

MAGIC = b"BLU1"
VERSION = 1
DTYPE_F32 = 1
FLAG_CLAHE = 1

_HEADER = struct.Struct("<4sH7H6fBI")

# Reference latencies of the original deployment, per frame.
REFERENCE_LATENCY_MS = {"Raspberry Pi 4B (reference)": 335.0, "GPU (reference)": 0.41}


# ---------------------------------------------------------------- weights file


def dumps(params: model.ModelParams, preprocess: data.PreprocessConfig | None = None) -> bytes:
    pre = preprocess or data.PreprocessConfig()
    cfg = params.config
    out = bytearray(_HEADER.pack(
        MAGIC, VERSION,
        cfg.in_channels, cfg.num_classes, *cfg.enc_channels, cfg.bottleneck_channels, *cfg.dec_channels,
        *pre.mean, *pre.std,
        FLAG_CLAHE if pre.clahe else 0,
        len(params.tensors),
    ))
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", DTYPE_F32, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"file truncated while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes):
    """Parse a weights file. Returns (ModelParams, ArchConfig, PreprocessConfig).

    The checksum is verified first, so any corruption is reported as a CRC mismatch;
    when the framing is also broken (e.g. a truncated file) that diagnosis, which names
    the layer being read, is appended to the message.
    """
    buf = bytes(buf)
    crc_error = None
    if len(buf) >= 4:
        (stored,) = struct.unpack_from("<I", buf, len(buf) - 4)
        actual = zlib.crc32(buf[:-4])
        if stored != actual:
            crc_error = f"CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
    try:
        parsed = _parse(buf)
    except FormatError as exc:
        if crc_error is None:
            raise
        raise FormatError(f"{crc_error}; {exc}") from None
    if crc_error is not None:
        raise FormatError(crc_error, len(buf) - 4)
    return parsed


def _parse(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < 6:
        raise FormatError("file truncated in header", len(buf))
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported weights format version {version} (this build reads {VERSION})", 4)
    # the last 4 bytes are the CRC; everything before it is framed content
    r = _Reader(buf, max(len(buf) - 4, 0))
    head = r.unpack(_HEADER.format, "header")
    in_c, n_cls, c1, c2, c3, d1, d2 = head[2:9]
    mean, std = head[9:12], head[12:15]
    flags, n_layers = head[15], head[16]
    try:
        config = model.ArchConfig(in_c, n_cls, (c1, c2), c3, (d1, d2))
    except ValueError as exc:
        raise FormatError(f"invalid architecture block: {exc}", 6) from None
    expected = config.param_shapes()
    if n_layers != len(expected):
        raise FormatError(f"layer count {n_layers} does not match architecture ({len(expected)})", 45)
    tensors = {}
    for want_name, want_shape in expected.items():
        start = r.pos
        ctx = f"record for layer {want_name!r}"
        (name_len,) = r.unpack("<H", ctx)
        try:
            name = r.take(name_len, ctx).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"undecodable layer name in {ctx}", start) from None
        if name != want_name:
            raise FormatError(f"expected layer {want_name!r}, found {name!r}", start)
        dtype, ndim = r.unpack("<BB", ctx)
        if dtype != DTYPE_F32:
            raise FormatError(f"layer {name!r}: unknown dtype tag {dtype}", r.pos - 2)
        shape = r.unpack(f"<{ndim}I", ctx)
        if tuple(shape) != want_shape:
            raise FormatError(f"layer {name!r}: shape {shape} does not match architecture {want_shape}", start)
        count = int(np.prod(shape))
        payload = r.take(4 * count, f"payload of layer {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != r.end:
        raise FormatError(f"{r.end - r.pos} unexpected trailing bytes before checksum", r.pos)
    if len(buf) < r.end + 4:
        raise FormatError("file truncated before checksum", r.end)
    pre = data.PreprocessConfig(clahe=bool(flags & FLAG_CLAHE), mean=mean, std=std)
    return model.ModelParams(config, tensors), config, pre


def save(params: model.ModelParams, path, preprocess: data.PreprocessConfig | None = None) -> None:
    Path(path).write_bytes(dumps(params, preprocess))


def load(path):
    """Returns (ModelParams, ArchConfig, PreprocessConfig)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weights file {path}: {exc.strerror}") from None
    return loads(buf)


# ---------------------------------------------------------------- inference


@dataclass
class Predictor:
    params: model.ModelParams
    preprocess: data.PreprocessConfig = field(default_factory=data.PreprocessConfig)

    @classmethod
    def from_file(cls, path) -> "Predictor":
        params, _, pre = load(path)
        return cls(params, pre)

    def __call__(self, image, fused_softmax: bool = False):
        return infer(image, self.params, self.preprocess, fused_softmax)


def infer(image, params: model.ModelParams, preprocess: data.PreprocessConfig | None = None,
          fused_softmax: bool = False, timings: dict | None = None) -> np.ndarray:
    """Resize -> (CLAHE) -> Normalize -> forward -> Softmax -> Argmax -> resize back.

    Returns a uint8 class mask at the input image's resolution. Argmax ties go to the
    lowest class index. With ``fused_softmax`` the argmax is taken on raw logits.
    If ``timings`` is a dict, per-stage seconds are stored in it.
    """
    pre = preprocess or data.PreprocessConfig()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise DataError(f"expected a non-empty (H, W, 3) image, got shape {image.shape}")
    t0 = time.perf_counter()
    img = data.preprocess_image(image.astype(np.uint8, copy=False), pre)
    x = data.normalize(img[None], pre.mean, pre.std)
    t1 = time.perf_counter()
    logits = model.forward(params, x)
    t2 = time.perf_counter()
    scores = logits if fused_softmax else ops.softmax_channels_fwd(logits)
    mask = scores[0].argmax(axis=0).astype(np.uint8)
    mask = data.resize_nearest(mask, image.shape[:2])
    t3 = time.perf_counter()
    if timings is not None:
        timings.update(preprocess=t1 - t0, forward=t2 - t1, postprocess=t3 - t2, total=t3 - t0)
    return mask


OVERLAY_COLORS = {1: (0, 255, 0, 255), 2: (255, 0, 0, 255)}


def overlay_rgba(mask) -> np.ndarray:
    """RGBA overlay: background transparent, bioink green, nozzle red."""
    out = np.zeros(mask.shape + (4,), dtype=np.uint8)
    for cls, color in OVERLAY_COLORS.items():
        out[mask == cls] = color
    return out


# ---------------------------------------------------------------- latency benchmark


@contextmanager
def thread_limit(threads: int | None):
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


@dataclass
class LatencyReport:
    n: int
    warmup: int
    threads: int | None
    stage_ms: dict[str, dict[str, float]]
    samples_ms: list[float] = field(repr=False, default_factory=list)

    @property
    def mean_ms(self):
        return self.stage_ms["total"]["mean"]

    @property
    def median_ms(self):
        return self.stage_ms["total"]["median"]

    @property
    def p95_ms(self):
        return self.stage_ms["total"]["p95"]

    def rows(self):
        rows = [
            {"stage": stage, "mean_ms": s["mean"], "median_ms": s["median"], "p95_ms": s["p95"],
             "n": self.n, "warmup": self.warmup, "threads": self.threads, "kind": "measured"}
            for stage, s in self.stage_ms.items()
        ]
        for label, ms in REFERENCE_LATENCY_MS.items():
            rows.append({"stage": label, "mean_ms": ms, "median_ms": "", "p95_ms": "",
                         "n": "", "warmup": "", "threads": "", "kind": "reference"})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["stage", "mean_ms", "median_ms", "p95_ms", "n", "warmup", "threads", "kind"]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()


def _summary(values_ms):
    ordered = sorted(values_ms)
    # nearest-rank percentile
    rank = max(int(np.ceil(0.95 * len(ordered))) - 1, 0)
    return {"mean": statistics.fmean(ordered), "median": statistics.median(ordered), "p95": ordered[rank]}


def benchmark(params: model.ModelParams, frames, n: int = 100, warmup: int = 10, threads: int | None = 1,
              preprocess: data.PreprocessConfig | None = None, masks_out: list | None = None) -> LatencyReport:
    """Time ``infer`` over ``n`` frames (cycling through ``frames``) after ``warmup`` untimed calls."""
    if n < 1:
        raise ValueError("n must be at least 1")
    frames = list(frames)
    if not frames:
        raise DataError("benchmark needs at least one frame")
    stages = {k: [] for k in ("preprocess", "forward", "postprocess", "total")}
    with thread_limit(threads):
        for i in range(warmup):
            infer(frames[i % len(frames)], params, preprocess)
        for i in range(n):
            t = {}
            mask = infer(frames[i % len(frames)], params, preprocess, timings=t)
            if masks_out is not None:
                masks_out.append(mask)
            for k in stages:
                stages[k].append(t[k] * 1e3)
    return LatencyReport(n, warmup, threads, {k: _summary(v) for k, v in stages.items()}, stages["total"])


# ---------------------------------------------------------------- complexity report


@dataclass
class ComplexityReport:
    config: model.ArchConfig
    input_size: tuple[int, int]
    rows: list[model.LayerRow]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def table_row(self) -> dict:
        h, w = self.input_size
        return {
            "model": "BioLite U-Net",
            "params_M": round(self.total_params / 1e6, 4),
            "flops_G": round(self.total_flops / 1e9, 4),
            "input_size": f"{h}x{w}",
        }

    def to_text(self) -> str:
        lines = [f"{'layer':<16}{'kind':<14}{'output shape':<22}{'params':>10}{'FLOPs':>14}"]
        for r in self.rows:
            shape = "x".join(str(d) for d in r.out_shape)
            lines.append(f"{r.name:<16}{r.kind:<14}{shape:<22}{r.params:>10}{r.flops:>14}")
        lines.append(f"{'total':<52}{self.total_params:>10}{self.total_flops:>14}")
        t = self.table_row()
        lines.append(f"\nModel: {t['model']} | Parameters (M): {t['params_M']} | FLOPs (G): {t['flops_G']} "
                     f"| Input Size: {t['input_size']}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "kind", "out_shape", "params", "flops"])
        for r in self.rows:
            writer.writerow([r.name, r.kind, "x".join(str(d) for d in r.out_shape), r.params, r.flops])
        writer.writerow(["total", "", "", self.total_params, self.total_flops])
        return buf.getvalue()


def describe(config: model.ArchConfig = model.ArchConfig(), input_size=(256, 256)) -> ComplexityReport:
    h, w = input_size
    return ComplexityReport(config, (h, w), model.layer_table(config, h, w))

