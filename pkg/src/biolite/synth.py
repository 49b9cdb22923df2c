"""Procedural bioprinting-like frames with exact masks.

A frame is painted in three layers: a background (flat colour, optional
illumination gradient and Gaussian noise), an ink trace stroked along a
quadratic B-spline with round caps, and a nozzle (tapered body plus a narrow
needle tip) drawn on top. The mask is painted from the same geometry, with
pixel-centre coverage; the image uses 3x3 supersampled coverage.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledFrame, polygon_mask
from .seeding import make_rng

DIFFICULTIES = ("easy", "medium", "hard")
SUPERSAMPLE = 3  # odd, so the pixel centre is one of the subsamples


@dataclass
class NozzleSpec:
    tip_x: float
    tip_y: float
    width: float  # body width just above the needle, px
    taper_deg: float  # half-angle by which the body widens towards the top edge
    gray: float
    tip_length: float = 10.0
    tip_width_ratio: float = 0.45

    def polygons(self):
        """Body trapezoid and needle rectangle as (xs, ys) pairs."""
        needle_w = self.width * self.tip_width_ratio
        neck_y = max(self.tip_y - self.tip_length, 0.0)
        spread = neck_y * np.tan(np.radians(self.taper_deg))
        half = self.width / 2
        body = (
            [self.tip_x - half - spread, self.tip_x + half + spread, self.tip_x + half, self.tip_x - half],
            [0.0, 0.0, neck_y, neck_y],
        )
        needle = (
            [self.tip_x - needle_w / 2, self.tip_x + needle_w / 2, self.tip_x + needle_w / 2, self.tip_x - needle_w / 2],
            [neck_y, neck_y, self.tip_y, self.tip_y],
        )
        return [body, needle]


@dataclass
class InkSpec:
    points: list[tuple[float, float]]  # spline control points (x, y)
    thickness: float
    color: tuple[float, float, float]
    opacity: float = 1.0

    def polyline(self, samples_per_span: int = 16) -> np.ndarray:
        return quadratic_bspline(np.asarray(self.points, dtype=np.float64), samples_per_span)


@dataclass
class BackgroundSpec:
    base_color: tuple[float, float, float]
    noise_amplitude: float = 0.0  # std of per-pixel Gaussian noise, in gray levels
    gradient: tuple[float, float] = (0.0, 0.0)  # brightness change across the frame in x and y


@dataclass
class SceneConfig:
    image_size: tuple[int, int] = (256, 256)
    nozzle: NozzleSpec | None = None
    ink: InkSpec | None = None
    background: BackgroundSpec = field(default_factory=lambda: BackgroundSpec((60.0, 60.0, 60.0)))
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if self.ink is not None:
            if self.ink.thickness < 1:
                raise ValueError("ink thickness must be at least 1 px")
            pts = np.asarray(self.ink.points)
            if pts.min() < 0 or (pts[:, 0] > w).any() or (pts[:, 1] > h).any():
                raise ValueError("ink control points must lie inside the frame")
        if self.nozzle is not None:
            if not (0 <= self.nozzle.tip_x <= w and 0 <= self.nozzle.tip_y <= h):
                raise ValueError("nozzle tip must lie inside the frame")


@dataclass
class SynthFrame:
    frame: LabeledFrame
    config: SceneConfig
    difficulty: str | None = None

    @property
    def id(self):
        return self.frame.id

    @property
    def image(self):
        return self.frame.image

    @property
    def mask(self):
        return self.frame.mask


def quadratic_bspline(ctrl: np.ndarray, samples_per_span: int = 16) -> np.ndarray:
    """Uniform quadratic B-spline clamped to the first and last control points."""
    if len(ctrl) < 3:
        return ctrl.copy()
    pts = np.vstack([ctrl[:1], ctrl, ctrl[-1:]])
    t = np.linspace(0, 1, samples_per_span, endpoint=False)[:, None]
    b0 = 0.5 * (1 - t) ** 2
    b1 = 0.5 + t - t ** 2
    b2 = 0.5 * t ** 2
    spans = [b0 * pts[i] + b1 * pts[i + 1] + b2 * pts[i + 2] for i in range(len(pts) - 2)]
    return np.vstack(spans + [ctrl[-1:]])


def _stroke_distance(polyline, xs, ys, radius):
    """Distance from sample points (xs[None, :], ys[:, None]) to a polyline, capped at radius + 1."""
    cap = radius + 1.0
    dist = np.full((len(ys), len(xs)), cap)
    for (ax, ay), (bx, by) in zip(polyline[:-1], polyline[1:]):
        x_lo = np.searchsorted(xs, min(ax, bx) - cap)
        x_hi = np.searchsorted(xs, max(ax, bx) + cap)
        y_lo = np.searchsorted(ys, min(ay, by) - cap)
        y_hi = np.searchsorted(ys, max(ay, by) + cap)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        px = xs[None, x_lo:x_hi]
        py = ys[y_lo:y_hi, None]
        vx, vy = bx - ax, by - ay
        vv = vx * vx + vy * vy
        t = np.zeros(1) if vv == 0 else np.clip(((px - ax) * vx + (py - ay) * vy) / vv, 0, 1)
        d = np.hypot(px - ax - t * vx, py - ay - t * vy)
        sub = dist[y_lo:y_hi, x_lo:x_hi]
        np.minimum(sub, d, out=sub)
    return dist


def _centres(n, k=1):
    return (np.arange(n * k) + 0.5) / k


def ink_masks(ink: InkSpec, shape):
    """(pixel-centre mask, supersampled coverage in [0, 1])."""
    h, w = shape
    line = ink.polyline()
    r = ink.thickness / 2
    centre = _stroke_distance(line, _centres(w), _centres(h), r) <= r
    k = SUPERSAMPLE
    sub = _stroke_distance(line, _centres(w, k), _centres(h, k), r) <= r
    return centre, sub.reshape(h, k, w, k).mean(axis=(1, 3))


def nozzle_masks(nozzle: NozzleSpec, shape):
    h, w = shape
    k = SUPERSAMPLE
    centre = np.zeros((h, w), dtype=bool)
    sub = np.zeros((h * k, w * k), dtype=bool)
    for xs, ys in nozzle.polygons():
        centre |= polygon_mask(xs, ys, (h, w))
        sub |= polygon_mask(np.asarray(xs) * k, np.asarray(ys) * k, (h * k, w * k))
    return centre, sub.reshape(h, k, w, k).mean(axis=(1, 3))


def _nozzle_shading(nozzle: NozzleSpec, shape):
    """Cylindrical highlight across the nozzle width, relative gain around 1."""
    w = shape[1]
    x = np.arange(w) + 0.5
    u = np.clip((x - nozzle.tip_x) / max(nozzle.width, 1.0), -1.5, 1.5)
    return (1.0 + 0.15 * np.cos(u * np.pi / 1.5))[None, :, None]


def render(config: SceneConfig, rng: np.random.Generator | None = None):
    """Returns (image uint8, mask uint8). ``rng`` drives background noise only."""
    h, w = config.image_size
    bg = config.background
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = np.asarray(bg.base_color, dtype=np.float64)
    gx, gy = bg.gradient
    if gx or gy:
        ramp = gx * ((np.arange(w) + 0.5) / w - 0.5)[None, :] + gy * ((np.arange(h) + 0.5) / h - 0.5)[:, None]
        img += ramp[..., None]
    if bg.noise_amplitude > 0:
        if rng is None:
            rng = make_rng(config.seed, "noise")
        img += rng.normal(0.0, bg.noise_amplitude, size=img.shape)
    mask = np.zeros((h, w), dtype=np.uint8)
    if config.ink is not None:
        centre, cov = ink_masks(config.ink, (h, w))
        a = (cov * config.ink.opacity)[..., None]
        img = img * (1 - a) + np.asarray(config.ink.color, dtype=np.float64) * a
        mask[centre] = 1
    if config.nozzle is not None:
        centre, cov = nozzle_masks(config.nozzle, (h, w))
        a = cov[..., None]
        metal = config.nozzle.gray * _nozzle_shading(config.nozzle, (h, w))
        img = img * (1 - a) + metal * a
        mask[centre] = 2
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def generate(config: SceneConfig, frame_id: str = "synth", difficulty: str | None = None) -> SynthFrame:
    image, mask = render(config)
    return SynthFrame(LabeledFrame(frame_id, image, mask), config, difficulty)


# ---------------------------------------------------------------- random scenes


def _random_geometry(rng: np.random.Generator, size):
    h, w = size
    s = min(h, w) / 256.0
    tip_x = rng.uniform(0.3, 0.7) * w
    tip_y = rng.uniform(0.35, 0.55) * h
    nozzle = dict(
        tip_x=tip_x,
        tip_y=tip_y,
        width=rng.uniform(20, 34) * s,
        taper_deg=rng.uniform(2, 10),
        tip_length=rng.uniform(8, 16) * s,
        tip_width_ratio=rng.uniform(0.35, 0.6),
    )
    # serpentine print path starting under the needle and sweeping across the bed
    n_turns = int(rng.integers(2, 5))
    direction = rng.choice([-1.0, 1.0])
    pts = [(tip_x, tip_y)]
    y = tip_y + rng.uniform(10, 25) * s
    pts.append((tip_x + direction * rng.uniform(0, 10) * s, y))
    for _ in range(n_turns):
        x_end = w * (0.9 if direction > 0 else 0.1) + rng.uniform(-8, 8) * s
        pts.append((float(np.clip(x_end, 4, w - 4)), y + rng.uniform(-6, 6) * s))
        y = min(y + rng.uniform(18, 32) * s, h - 6)
        pts.append((float(np.clip(x_end + direction * rng.uniform(0, 6) * s, 4, w - 4)), y))
        direction = -direction
    ink = dict(
        points=[(float(np.clip(x, 0, w)), float(np.clip(yy, 0, h))) for x, yy in pts],
        thickness=max(1.0, rng.uniform(5, 9) * s),
    )
    return nozzle, ink


def _random_photometrics(rng: np.random.Generator, difficulty: str):
    # draw a fixed set of numbers regardless of tier so geometry streams never shift
    base = rng.uniform(35, 85)
    tint = rng.uniform(-8, 8, size=3)
    hue = rng.uniform(0, 1)
    gray = rng.uniform(175, 225)
    gx, gy = rng.uniform(-1, 1, size=2)
    opacity = rng.uniform(0.75, 0.95)
    inks = np.array([[70, 200, 90], [60, 120, 230], [230, 80, 160], [200, 190, 60]], dtype=np.float64)
    ink_color = inks[int(hue * len(inks)) % len(inks)]
    bg = base + tint
    if difficulty == "easy":
        return dict(background=BackgroundSpec(tuple(bg)), ink_color=tuple(ink_color), ink_opacity=1.0, gray=gray)
    if difficulty == "medium":
        return dict(
            background=BackgroundSpec(tuple(bg), noise_amplitude=6.0, gradient=(40 * gx, 40 * gy)),
            ink_color=tuple(ink_color),
            ink_opacity=opacity,
            gray=gray,
        )
    if difficulty == "hard":
        # ink barely separable from the background, nozzle dimmer
        faint = bg + 0.3 * (ink_color - bg)
        return dict(
            background=BackgroundSpec(tuple(bg + 20), noise_amplitude=10.0, gradient=(60 * gx, 60 * gy)),
            ink_color=tuple(faint + 20),
            ink_opacity=opacity,
            gray=gray * 0.75,
        )
    raise ValueError(f"unknown difficulty {difficulty!r}; expected one of {DIFFICULTIES}")


def random_scene(seed: int, index: int, difficulty: str = "easy", size=(256, 256)) -> SceneConfig:
    geo_rng = make_rng(seed, "geometry", index)
    photo_rng = make_rng(seed, "photometric", index)
    nozzle, ink = _random_geometry(geo_rng, size)
    photo = _random_photometrics(photo_rng, difficulty)
    return SceneConfig(
        image_size=tuple(size),
        nozzle=NozzleSpec(gray=photo["gray"], **nozzle),
        ink=InkSpec(color=photo["ink_color"], opacity=photo["ink_opacity"], **ink),
        background=photo["background"],
        seed=int(make_rng(seed, "noise", index).integers(2**31)),
    )


def generate_dataset(n: int, difficulty: str = "easy", seed: int = 0, size=(256, 256)) -> list[SynthFrame]:
    if n < 1:
        raise ValueError("n must be at least 1")
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}; expected one of {DIFFICULTIES}")
    width = max(4, len(str(n - 1)))
    return [
        generate(random_scene(seed, i, difficulty, size), f"synth_{i:0{width}d}", difficulty)
        for i in range(n)
    ]
