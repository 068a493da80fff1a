"""Procedural sprite videos with three rendered pose-condition channels.

A coloured sprite follows a piecewise-linear path over a low-contrast grey
background. Per frame we render:

* ``pose_keypoints``: a plus-shaped dot at the sprite centre,
* ``pose_silhouette``: the filled sprite mask,
* ``pose_markers``: single-pixel dots at the shape's vertices/extremes.

Pose masks are exact binary (pixel-centre test); RGB frames use 4x4
supersampled coverage. Pixel ``(r, c)`` has its centre at coordinate ``(r, c)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle")

# Saturated colours, all > 0.5 RGB distance from any grey in [0.3, 0.6].
PALETTE = (
    (0.9, 0.1, 0.1),
    (0.1, 0.85, 0.15),
    (0.15, 0.2, 0.95),
    (0.95, 0.9, 0.1),
    (0.9, 0.1, 0.9),
    (0.1, 0.9, 0.9),
)
NUM_BACKGROUNDS = 8

SAMPLE_MAGIC = b"DITLABSM"
SAMPLE_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    sprite_shape: str
    sprite_color: tuple[float, float, float]
    trajectory: tuple[tuple[float, float], ...]
    background_id: int
    frames: int = 8
    height: int = 32
    width: int = 48
    radius: float = 3.0

    def validate(self) -> None:
        if self.sprite_shape not in SHAPES:
            raise ValueError(f"unknown sprite shape {self.sprite_shape!r}")
        if not self.trajectory:
            raise ValueError("trajectory needs at least one waypoint")
        r = self.radius
        for y, x in self.trajectory:
            if not (r <= y <= self.height - 1 - r and r <= x <= self.width - 1 - r):
                raise ValueError(
                    f"waypoint ({y}, {x}) leaves the {self.height}x{self.width} frame "
                    f"for sprite radius {r}"
                )

    def position(self, f: int) -> tuple[float, float]:
        """Sprite centre at frame ``f``; waypoints are evenly spaced in time."""
        pts = np.asarray(self.trajectory, dtype=np.float64)
        if len(pts) == 1 or self.frames == 1:
            return float(pts[0, 0]), float(pts[0, 1])
        s = f / (self.frames - 1) * (len(pts) - 1)
        j = min(int(np.floor(s)), len(pts) - 2)
        a = s - j
        y, x = (1 - a) * pts[j] + a * pts[j + 1]
        return float(y), float(x)

    def positions(self) -> np.ndarray:
        return np.array([self.position(f) for f in range(self.frames)])


@dataclass
class VideoSample:
    spec: SceneSpec
    seed: int
    frames: np.ndarray  # [3, F, H, W]
    pose_keypoints: np.ndarray  # [1, F, H, W]
    pose_silhouette: np.ndarray
    pose_markers: np.ndarray
    reference: np.ndarray  # [3, H, W]

    @property
    def poses(self) -> np.ndarray:
        """The three pose streams stacked on the channel axis, ``[3, F, H, W]``."""
        return np.concatenate([self.pose_keypoints, self.pose_silhouette, self.pose_markers])


@dataclass
class Dataset:
    train: list[VideoSample] = field(default_factory=list)
    val: list[VideoSample] = field(default_factory=list)


def _vertices(shape: str, cy: float, cx: float, r: float) -> np.ndarray:
    if shape == "square":
        return np.array([[cy - r, cx - r], [cy - r, cx + r], [cy + r, cx + r], [cy + r, cx - r]])
    if shape == "triangle":
        angles = np.deg2rad([-90.0, 30.0, 150.0])
        return np.stack([cy + r * np.sin(angles), cx + r * np.cos(angles)], axis=1)
    return np.array([[cy - r, cx], [cy, cx + r], [cy + r, cx], [cy, cx - r]])


def _inside(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    v = _vertices(shape, cy, cx, r)
    inside = np.ones(yy.shape, dtype=bool)
    for k in range(3):
        (y0, x0), (y1, x1) = v[k], v[(k + 1) % 3]
        # vertices are clockwise on screen, so interior has nonnegative cross product
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside


def background(background_id: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Grey gradient plus a faint checkerboard, values inside [0.3, 0.6]."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    lo, hi = 0.35 + 0.01 * (background_id % 4), 0.5 + 0.01 * (background_id // 4)
    if background_id % 2:
        ramp = yy / max(height - 1, 1)
    else:
        ramp = xx / max(width - 1, 1)
    cell = 2 + background_id % 3
    phase = int(rng.integers(0, cell))
    checker = (((yy.astype(int) + phase) // cell + (xx.astype(int) + phase) // cell) % 2) * 0.04
    tint = rng.uniform(-0.02, 0.02, size=3)
    base = lo + (hi - lo) * ramp + checker
    img = base[None] + tint[:, None, None]
    return np.clip(img, 0.3, 0.6)


def _render_rgb(spec: SceneSpec, bg: np.ndarray, cy: float, cx: float) -> np.ndarray:
    h, w = spec.height, spec.width
    sub = (np.arange(4) + 0.5) / 4 - 0.5
    yy = np.arange(h)[:, None, None, None] + sub[None, None, :, None]
    xx = np.arange(w)[None, :, None, None] + sub[None, None, None, :]
    yy, xx = np.broadcast_arrays(yy, xx)
    coverage = _inside(spec.sprite_shape, yy, xx, cy, cx, spec.radius).mean(axis=(2, 3))
    color = np.asarray(spec.sprite_color)[:, None, None]
    return bg * (1 - coverage) + color * coverage


def _render_pose(spec: SceneSpec, cy: float, cx: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    silhouette = _inside(spec.sprite_shape, yy, xx, cy, cx, spec.radius).astype(np.float64)
    keypoints = np.zeros((h, w))
    ky, kx = int(np.floor(cy + 0.5)), int(np.floor(cx + 0.5))
    for dy, dx in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
        if 0 <= ky + dy < h and 0 <= kx + dx < w:
            keypoints[ky + dy, kx + dx] = 1.0
    markers = np.zeros((h, w))
    for vy, vx in _vertices(spec.sprite_shape, cy, cx, spec.radius):
        my = min(max(int(np.floor(vy + 0.5)), 0), h - 1)
        mx = min(max(int(np.floor(vx + 0.5)), 0), w - 1)
        markers[my, mx] = 1.0
    return keypoints, silhouette, markers


def generate(spec: SceneSpec, rng: np.random.Generator, seed: int = 0) -> VideoSample:
    spec.validate()
    f, h, w = spec.frames, spec.height, spec.width
    bg = background(spec.background_id, h, w, rng)
    frames = np.empty((3, f, h, w))
    kp, sil, mk = (np.empty((1, f, h, w)) for _ in range(3))
    for k in range(f):
        cy, cx = spec.position(k)
        frames[:, k] = _render_rgb(spec, bg, cy, cx)
        kp[0, k], sil[0, k], mk[0, k] = _render_pose(spec, cy, cx)
    reference = _render_rgb(spec, bg, (h - 1) / 2, (w - 1) / 2)
    return VideoSample(spec, seed, frames, kp, sil, mk, reference)


def random_spec(
    rng: np.random.Generator,
    frames: int = 8,
    height: int = 32,
    width: int = 48,
    radius: float = 3.0,
    waypoints: int = 3,
) -> SceneSpec:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = PALETTE[int(rng.integers(len(PALETTE)))]
    pts = tuple(
        (
            float(rng.uniform(radius, height - 1 - radius)),
            float(rng.uniform(radius, width - 1 - radius)),
        )
        for _ in range(waypoints)
    )
    return SceneSpec(shape, color, pts, int(rng.integers(NUM_BACKGROUNDS)), frames, height, width, radius)


def sample_from_seed(seed: int, frames: int = 8, height: int = 32, width: int = 48,
                     radius: float = 3.0) -> VideoSample:
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, frames, height, width, radius)
    return generate(spec, rng, seed)


def dataset_seeds(count: int, seed: int) -> tuple[list[int], list[int]]:
    """Per-sample seeds and the fixed 90/10 train/val split."""
    if count < 2:
        raise ValueError(f"dataset needs at least 2 samples, got {count}")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]
    n_val = max(1, round(0.1 * count))
    return seeds[: count - n_val], seeds[count - n_val:]


def make_dataset(count: int, seed: int, frames: int = 8, height: int = 32, width: int = 48,
                 radius: float = 3.0) -> Dataset:
    train_seeds, val_seeds = dataset_seeds(count, seed)
    return Dataset(
        [sample_from_seed(s, frames, height, width, radius) for s in train_seeds],
        [sample_from_seed(s, frames, height, width, radius) for s in val_seeds],
    )


# ---------------------------------------------------------------------------
# on-disk sample format
#
#   8 bytes   magic "DITLABSM"
#   uint32    format version
#   uint32    header length in bytes
#   header    UTF-8 key=value lines (dimensions, seed, scene spec)
#   float32   frames [3,F,H,W], keypoints, silhouette, markers [F,H,W] each,
#             reference [3,H,W]; all little-endian, C order


def _spec_header(sample: VideoSample) -> str:
    s = sample.spec
    lines = {
        "frames": s.frames,
        "height": s.height,
        "width": s.width,
        "channels": 3,
        "seed": sample.seed,
        "sprite_shape": s.sprite_shape,
        "sprite_color": ",".join(repr(float(c)) for c in s.sprite_color),
        "trajectory": ";".join(f"{y!r},{x!r}" for y, x in s.trajectory),
        "background_id": s.background_id,
        "radius": repr(float(s.radius)),
    }
    return "".join(f"{k}={v}\n" for k, v in lines.items())


def write_sample(path: str | Path, sample: VideoSample) -> None:
    header = _spec_header(sample).encode()
    planes = [sample.frames, sample.pose_keypoints, sample.pose_silhouette,
              sample.pose_markers, sample.reference]
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<II", SAMPLE_VERSION, len(header)))
        fh.write(header)
        for plane in planes:
            fh.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def read_sample(path: str | Path) -> VideoSample:
    raw = Path(path).read_bytes()
    if raw[:8] != SAMPLE_MAGIC:
        raise ValueError(f"{path}: not a sample file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != SAMPLE_VERSION:
        raise ValueError(f"{path}: sample format version {version}, expected {SAMPLE_VERSION}")
    kv = dict(line.split("=", 1) for line in raw[16:16 + hlen].decode().splitlines() if line)
    f, h, w = int(kv["frames"]), int(kv["height"]), int(kv["width"])
    spec = SceneSpec(
        kv["sprite_shape"],
        tuple(float(c) for c in kv["sprite_color"].split(",")),
        tuple(tuple(float(v) for v in p.split(",")) for p in kv["trajectory"].split(";")),
        int(kv["background_id"]),
        f,
        h,
        w,
        float(kv["radius"]),
    )
    data = np.frombuffer(raw, dtype="<f4", offset=16 + hlen).astype(np.float64)
    sizes = [3 * f * h * w, f * h * w, f * h * w, f * h * w, 3 * h * w]
    if data.size != sum(sizes):
        raise ValueError(f"{path}: payload has {data.size} floats, expected {sum(sizes)}")
    parts = np.split(data, np.cumsum(sizes)[:-1])
    return VideoSample(
        spec,
        int(kv["seed"]),
        parts[0].reshape(3, f, h, w),
        parts[1].reshape(1, f, h, w),
        parts[2].reshape(1, f, h, w),
        parts[3].reshape(1, f, h, w),
        parts[4].reshape(3, h, w),
    )
