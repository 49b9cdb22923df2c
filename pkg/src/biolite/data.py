"""Dataset ingestion, splitting, CLAHE, augmentation and batching.

Frames are ``LabeledFrame`` objects holding an RGB uint8 image of shape
(H, W, 3) and a uint8 index mask of shape (H, W) with 0 = background,
1 = bioink, 2 = nozzle. Masks on disk are single-channel 8-bit PNGs storing
the raw class index.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .seeding import make_rng

CLASS_IDS = {"background": 0, "bioink": 1, "ink": 1, "nozzle": 2}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)
INPUT_SIZE = (256, 256)


@dataclass
class LabeledFrame:
    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.id}: image must be (H, W, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(f"{self.id}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}")
        if self.mask.size and int(self.mask.max()) > 2:
            raise DataError(f"{self.id}: mask contains class value {int(self.mask.max())} > 2")
        self.image = np.asarray(self.image, dtype=np.uint8)
        self.mask = np.asarray(self.mask, dtype=np.uint8)


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def of(self, name: str) -> list[str]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def assignment(self) -> dict[str, str]:
        return {i: name for name in ("train", "val", "test") for i in self.of(name)}


# ---------------------------------------------------------------- polygon rasterization


def polygon_mask(xs, ys, shape) -> np.ndarray:
    """Pixels whose centre (x + 0.5, y + 0.5) lies inside the polygon, even-odd rule."""
    h, w = shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = np.zeros((h, w), dtype=bool)
    if len(xs) < 3:
        return inside
    px = np.arange(w) + 0.5
    py = (np.arange(h) + 0.5)[:, None]
    x0, y0 = xs, ys
    x1, y1 = np.roll(xs, -1), np.roll(ys, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        # edge crosses the horizontal ray through py, half-open in y
        spans = (ay > py) != (by > py)
        x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= spans & (px < x_cross)
    return inside


def _region_label(region, filename) -> int:
    attrs = region.get("region_attributes") or {}
    values = [str(v).strip().lower() for v in attrs.values() if isinstance(v, (str, int))]
    for v in values:
        if v in CLASS_IDS:
            return CLASS_IDS[v]
    raise DataError(f"{filename}: unknown region label {attrs!r}")


def _region_polygon(region, filename):
    sa = region.get("shape_attributes") or {}
    kind = sa.get("name")
    if kind == "polygon":
        return sa["all_points_x"], sa["all_points_y"]
    if kind == "rect":
        x, y, w, h = sa["x"], sa["y"], sa["width"], sa["height"]
        return [x, x + w, x + w, x], [y, y, y + h, y + h]
    raise DataError(f"{filename}: unsupported VIA shape {kind!r}")


def _via_records(via) -> dict:
    """Map filename -> record for VIA 2 exports (``_via_img_metadata`` or bare) and VIA 1."""
    if isinstance(via, (str, os.PathLike)):
        with open(via) as fh:
            via = json.load(fh)
    via = via.get("_via_img_metadata", via)
    return {rec["filename"]: rec for rec in via.values()}


def rasterize_via(record, image_size) -> np.ndarray:
    """Index mask for one VIA record. Bioink is painted first, then nozzle over it."""
    h, w = image_size
    mask = np.zeros((h, w), dtype=np.uint8)
    regions = record.get("regions") or []
    if isinstance(regions, dict):  # VIA 1.x keeps regions in a dict
        regions = list(regions.values())
    fname = record.get("filename", "?")
    shapes = [(_region_label(r, fname), _region_polygon(r, fname)) for r in regions]
    for cls in (0, 1, 2):
        for label, (xs, ys) in shapes:
            if label == cls:
                mask[polygon_mask(xs, ys, (h, w))] = cls
    return mask


# ---------------------------------------------------------------- loading


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise DataError(f"{path}: index mask must be single-channel, got mode {im.mode}")
        return np.asarray(im)


def write_png(path, array) -> None:
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path, format="PNG")


def _checked_mask(mask, frame_id) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > 2):
        raise DataError(f"{frame_id}: mask contains class value {int(mask.max())} outside {{0, 1, 2}}")
    return mask.astype(np.uint8)


def load_dataset(image_dir, mask_dir=None, via_json=None) -> list[LabeledFrame]:
    """Frames from an image directory plus either index-mask PNGs or a VIA JSON file.

    Frame ids are image file stems; the result is sorted by id.
    """
    if (mask_dir is None) == (via_json is None):
        raise DataError("exactly one of mask_dir or via_json is required")
    image_dir = Path(image_dir)
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    records = _via_records(via_json) if via_json is not None else None
    frames = []
    for path in paths:
        fid = path.stem
        image = read_image(path)
        if records is not None:
            if path.name not in records:
                raise DataError(f"{fid}: no VIA annotation for {path.name}")
            mask = rasterize_via(records[path.name], image.shape[:2])
        else:
            mpath = Path(mask_dir) / f"{fid}.png"
            if not mpath.exists():
                raise DataError(f"{fid}: missing mask {mpath}")
            mask = _checked_mask(read_mask(mpath), fid)
        frames.append(LabeledFrame(fid, image, mask))
    return sorted(frames, key=lambda f: f.id)


# ---------------------------------------------------------------- manifest


MANIFEST_NAME = "manifest.tsv"


def write_manifest(path, rows, meta=None) -> None:
    """rows: (id, image_path, mask_path, split); paths relative to the manifest directory."""
    with open(path, "w") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}: {value}\n")
        fh.write("id\timage\tmask\tsplit\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


def read_manifest(path):
    """Returns (rows, meta)."""
    meta, rows = {}, []
    with open(path) as fh:
        lines = fh.read().splitlines()
    header_seen = False
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
        elif not header_seen:
            if line.split("\t") != ["id", "image", "mask", "split"]:
                raise DataError(f"{path}: bad manifest header {line!r}")
            header_seen = True
        elif line.strip():
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}: malformed manifest line {line!r}")
            rows.append(tuple(parts))
    return rows, meta


def write_frames(frames, out_dir, split: DatasetSplit | None = None, meta=None) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    assign = split.assignment() if split else {}
    rows = []
    for f in frames:
        write_png(out_dir / "images" / f"{f.id}.png", f.image)
        write_png(out_dir / "masks" / f"{f.id}.png", f.mask)
        rows.append((f.id, f"images/{f.id}.png", f"masks/{f.id}.png", assign.get(f.id, "-")))
    manifest = out_dir / MANIFEST_NAME
    write_manifest(manifest, rows, meta)
    return manifest


def load_manifest(path):
    """Returns (frames, DatasetSplit, meta) from a manifest written by ``write_frames``."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    rows, meta = read_manifest(path)
    frames, groups = [], {"train": [], "val": [], "test": []}
    for fid, img, msk, sp in rows:
        ipath, mpath = path.parent / img, path.parent / msk
        if not mpath.exists():
            raise DataError(f"{fid}: missing mask {mpath}")
        frames.append(LabeledFrame(fid, read_image(ipath), _checked_mask(read_mask(mpath), fid)))
        if sp in groups:
            groups[sp].append(fid)
    return frames, DatasetSplit(**groups), meta


# ---------------------------------------------------------------- split


def split(frames_or_ids, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then floor(80%) train, floor(10%) val, remainder test."""
    ids = [f.id if isinstance(f, LabeledFrame) else str(f) for f in frames_or_ids]
    if len(ids) < 10:
        raise DataError(f"need at least 10 frames to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise DataError("frame ids are not unique")
    ids = sorted(ids)
    order = make_rng(seed, "split").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = len(ids) * 8 // 10
    n_val = len(ids) // 10
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )


# ---------------------------------------------------------------- resizing


def _axis_coords(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image, size) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a uint8 (H, W[, C]) image to ``size = (h, w)``."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image.copy()
    y0, y1, fy = _axis_coords(image.shape[0], h)
    x0, x1, fx = _axis_coords(image.shape[1], w)
    img = image.astype(np.float32)
    extra = (None,) * (img.ndim - 2)
    fy = fy.astype(np.float32)[(slice(None), None) + extra]
    fx = fx.astype(np.float32)[(None, slice(None)) + extra]
    rows = img[y0] * (1 - fy) + img[y1] * fy
    out = rows[:, x0] * (1 - fx) + rows[:, x1] * fx
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_nearest(mask, size) -> np.ndarray:
    h, w = size
    if mask.shape[:2] == (h, w):
        return mask.copy()
    ys = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(np.intp), mask.shape[0] - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(np.intp), mask.shape[1] - 1)
    return mask[ys[:, None], xs[None, :]]


# ---------------------------------------------------------------- CLAHE


def _equalization_lut(hist, clip_count=None) -> np.ndarray:
    """Histogram-equalization lookup table for a 256-bin histogram.

    ``lut[v] = round(255 * (cdf[v] - cdf_min) / (total - cdf_min))`` after optionally
    clipping every bin at ``clip_count`` and spreading the excess evenly over all bins.
    A histogram with a single occupied level maps to the identity.
    """
    hist = hist.astype(np.float64)
    if np.count_nonzero(hist) <= 1:
        return np.arange(256, dtype=np.float64)
    if clip_count is not None:
        excess = np.maximum(hist - clip_count, 0).sum()
        hist = np.minimum(hist, clip_count) + excess / 256.0
    cdf = np.cumsum(hist)
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    lut = (cdf - cdf_min) / (cdf[-1] - cdf_min) * 255.0
    return np.clip(np.rint(lut), 0, 255)


def equalize_hist(gray) -> np.ndarray:
    """Plain global histogram equalization of a uint8 image."""
    lut = _equalization_lut(np.bincount(gray.ravel(), minlength=256))
    return lut.astype(np.uint8)[gray]


def _tile_luts(gray, tiles, clip_limit):
    tx, ty = tiles
    h, w = gray.shape
    ph = (-h) % ty
    pw = (-w) % tx
    padded = np.pad(gray, ((0, ph), (0, pw)), mode="reflect") if (ph or pw) else gray
    th, tw = padded.shape[0] // ty, padded.shape[1] // tx
    clip = None
    if clip_limit is not None and math.isfinite(clip_limit):
        clip = max(1.0, clip_limit * th * tw / 256.0)
    luts = np.empty((ty, tx, 256), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = padded[i * th:(i + 1) * th, j * tw:(j + 1) * tw]
            luts[i, j] = _equalization_lut(np.bincount(tile.ravel(), minlength=256), clip)
    return luts, th, tw


def _blend_weights(n, tile, n_tiles):
    f = np.clip((np.arange(n) + 0.5) / tile - 0.5, 0, n_tiles - 1)
    i0 = np.floor(f).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_tiles - 1)
    return i0, i1, f - i0


def _blended_map(luts, th, tw, shape, levels):
    """Bilinear blend of the four surrounding tile LUTs, evaluated at integer ``levels``."""
    ty, tx = luts.shape[:2]
    y0, y1, wy = _blend_weights(shape[0], th, ty)
    x0, x1, wx = _blend_weights(shape[1], tw, tx)
    wy = wy[:, None]
    wx = wx[None, :]
    Y0, Y1, X0, X1 = y0[:, None], y1[:, None], x0[None, :], x1[None, :]
    top = luts[Y0, X0, levels] * (1 - wx) + luts[Y0, X1, levels] * wx
    bot = luts[Y1, X0, levels] * (1 - wx) + luts[Y1, X1, levels] * wx
    return top * (1 - wy) + bot * wy


def clahe(gray, tiles=(8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of a uint8 single-channel image.

    ``tiles`` is (columns, rows). ``clip_limit`` is a multiple of the mean bin height
    of a tile histogram; ``inf`` disables clipping. Images that the tile grid does not
    divide are reflect-padded at the bottom/right for histogram collection only.
    """
    gray = np.asarray(gray, dtype=np.uint8)
    luts, th, tw = _tile_luts(gray, tiles, clip_limit)
    out = _blended_map(luts, th, tw, gray.shape, gray.astype(np.intp))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def luma(image) -> np.ndarray:
    img = image.astype(np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def clahe_rgb(image, tiles=(8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """CLAHE on luma; RGB is rescaled by the ratio of equalized to original luma."""
    y = luma(image)
    y8 = np.clip(np.rint(y), 0, 255).astype(np.uint8)
    luts, th, tw = _tile_luts(y8, tiles, clip_limit)
    lo = np.floor(y).astype(np.intp)
    hi = np.minimum(lo + 1, 255)
    frac = y - lo
    # piecewise-linear LUT evaluation at the fractional luma keeps identity maps exact
    new_y = _blended_map(luts, th, tw, y.shape, lo) * (1 - frac) + _blended_map(luts, th, tw, y.shape, hi) * frac
    img = image.astype(np.float64)
    ratio = np.divide(new_y, y, out=np.ones_like(y), where=y > 0)
    out = img * ratio[..., None]
    dark = y <= 0
    out[dark] = new_y[dark][:, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    rot_deg_range: tuple[float, float] = (-15.0, 15.0)
    brightness_delta_range: tuple[float, float] = (-0.2, 0.2)
    contrast_factor_range: tuple[float, float] = (0.8, 1.2)
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        lo, hi = self.rot_deg_range
        if lo > hi:
            raise ValueError(f"bad rotation range {self.rot_deg_range}")


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    angle_deg: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0


def sample_augment(config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    if not config.enabled:
        return AugmentParams()
    return AugmentParams(
        hflip=bool(rng.random() < config.hflip_prob),
        angle_deg=float(rng.uniform(*config.rot_deg_range)),
        brightness=float(rng.uniform(*config.brightness_delta_range)),
        contrast=float(rng.uniform(*config.contrast_factor_range)),
    )


def rotation_source_coords(shape, angle_deg):
    """Source (row, col) sampled by every output pixel when rotating about the image centre."""
    h, w = shape
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse mapping: rotate output coordinates by -angle
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    return sy, sx


def rotate_image(image, angle_deg) -> np.ndarray:
    """Bilinear rotation with zero fill outside the source."""
    if angle_deg == 0:
        return image.copy()
    h, w = image.shape[:2]
    sy, sx = rotation_source_coords((h, w), angle_deg)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    img = image.astype(np.float64)
    out = np.zeros(img.shape, dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = np.zeros(img.shape, dtype=np.float64)
        vals[ok] = img[yi[ok], xi[ok]]
        out += wgt * vals
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def rotate_mask(mask, angle_deg) -> np.ndarray:
    """Nearest-neighbour rotation with class-0 fill outside the source."""
    if angle_deg == 0:
        return mask.copy()
    h, w = mask.shape
    sy, sx = rotation_source_coords((h, w), angle_deg)
    yi = np.floor(sy + 0.5).astype(np.intp)
    xi = np.floor(sx + 0.5).astype(np.intp)
    ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    out = np.zeros_like(mask)
    out[ok] = mask[yi[ok], xi[ok]]
    return out


def adjust_photometric(image, brightness: float, contrast: float) -> np.ndarray:
    """Contrast about the image mean, then an additive shift of ``brightness * 255``."""
    if brightness == 0 and contrast == 1:
        return image.copy()
    img = image.astype(np.float64)
    m = img.mean()
    out = (img - m) * contrast + m + brightness * 255.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_augment(frame: LabeledFrame, p: AugmentParams) -> LabeledFrame:
    image, mask = frame.image, frame.mask
    if p.hflip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    image = rotate_image(image, p.angle_deg)
    mask = rotate_mask(mask, p.angle_deg)
    image = adjust_photometric(image, p.brightness, p.contrast)
    return LabeledFrame(frame.id, np.ascontiguousarray(image), np.ascontiguousarray(mask))


def augment(frame: LabeledFrame, config: AugmentConfig, rng: np.random.Generator) -> LabeledFrame:
    return apply_augment(frame, sample_augment(config, rng))


# ---------------------------------------------------------------- preprocessing and batching


@dataclass
class PreprocessConfig:
    size: tuple[int, int] = INPUT_SIZE
    clahe: bool = True
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_clip: float = 2.0
    mean: tuple[float, float, float] = MEAN
    std: tuple[float, float, float] = STD

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        self.clahe_tiles = tuple(int(v) for v in self.clahe_tiles)
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)


def preprocess_image(image, config: PreprocessConfig) -> np.ndarray:
    """Resize then (optionally) CLAHE; returns uint8 at ``config.size``."""
    if image.size == 0:
        raise DataError("empty image")
    img = resize_bilinear(image, config.size)
    if config.clahe:
        img = clahe_rgb(img, config.clahe_tiles, config.clahe_clip)
    return img


def preprocess(frame: LabeledFrame, config: PreprocessConfig) -> LabeledFrame:
    return LabeledFrame(frame.id, preprocess_image(frame.image, config), resize_nearest(frame.mask, config.size))


def normalize(images, mean=MEAN, std=STD, dtype=np.float32) -> np.ndarray:
    """uint8 (N, H, W, 3) -> standardized float (N, 3, H, W)."""
    x = images.astype(np.float32) / np.float32(255.0)
    x = (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=dtype)


def to_batch(frames, size=INPUT_SIZE, mean=MEAN, std=STD):
    """Returns (images float32 (n, 3, h, w), masks int64 (n, h, w)); resizes frames as needed."""
    frames = list(frames)
    if not frames:
        raise DataError("cannot build a batch from zero frames")
    imgs = np.stack([resize_bilinear(f.image, size) for f in frames])
    masks = np.stack([resize_nearest(f.mask, size) for f in frames]).astype(np.int64)
    return normalize(imgs, mean, std), masks
