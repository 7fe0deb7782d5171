"""Deterministic synthetic videos of moving shapes with exact labels and
known per-shape motion."""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .datamodel import ValidationError, VideoClip, atomic_write_json, write_clip

# base RGB per class; class 0 is the textured background
PALETTE = np.array(
    [[120, 120, 120], [210, 60, 60], [60, 180, 80], [60, 90, 210], [215, 200, 60],
     [180, 70, 200], [60, 200, 200], [240, 140, 40]],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Shape:
    kind: str  # "rect" or "ellipse"
    class_id: int
    center: tuple  # (cx, cy) at frame 0, pixels
    radius: tuple  # (rx, ry) half extents, pixels
    velocity: tuple = (0.0, 0.0)  # px / frame
    accel: tuple = (0.0, 0.0)  # px / frame^2

    def center_at(self, t: float) -> tuple[float, float]:
        cx = self.center[0] + self.velocity[0] * t + 0.5 * self.accel[0] * t * t
        cy = self.center[1] + self.velocity[1] * t + 0.5 * self.accel[1] * t * t
        return cx, cy

    def mask(self, t: int, h: int, w: int) -> np.ndarray:
        cx, cy = self.center_at(t)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        rx, ry = self.radius
        if self.kind == "rect":
            return (np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_frames: int = 15
    num_classes: int = 5
    shapes: tuple = ()
    seed: int = 0
    noise: float = 6.0

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ValidationError(f"canvas {self.height}x{self.width} must be divisible by 32")
        if self.num_classes > len(PALETTE):
            raise ValidationError(f"at most {len(PALETTE)} classes supported")
        for i, s in enumerate(self.shapes):
            if s.kind not in ("rect", "ellipse"):
                raise ValidationError(f"shape {i}: unknown kind {s.kind!r}")
            if not 1 <= s.class_id < self.num_classes:
                raise ValidationError(f"shape {i}: class {s.class_id} not in [1, {self.num_classes})")
            rx, ry = s.radius
            for t in range(self.num_frames):
                cx, cy = s.center_at(t)
                if cx - rx < 1 or cy - ry < 1 or cx + rx > self.width - 2 or cy + ry > self.height - 2:
                    raise ValidationError(f"shape {i} leaves the canvas at frame {t}")


@dataclass(frozen=True)
class ShapeTracks:
    """Per-shape centre positions, T x S x 2 (x, y)."""

    centers: np.ndarray

    def displacement(self, k: int, j: int) -> np.ndarray:
        """S x 2 motion of every shape from frame k to frame j."""
        return self.centers[j] - self.centers[k]


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros((h, w))
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.05, 0.25)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(freq * (np.cos(theta) * xs + np.sin(theta) * ys) + phase)
    tint = rng.uniform(-15, 15, size=3)
    return PALETTE[0] + tint + 12.0 * tex[..., None]


def render_clip(spec: SceneSpec, clip_id: str = "clip") -> tuple[VideoClip, ShapeTracks]:
    rng = np.random.default_rng(spec.seed)
    h, w, t_total = spec.height, spec.width, spec.num_frames
    bg = _background(spec, rng)
    colors = [PALETTE[s.class_id] + rng.uniform(-20, 20, size=3) for s in spec.shapes]
    frames = np.empty((t_total, h, w, 3), np.uint8)
    labels = np.zeros((t_total, h, w), np.uint8)
    centers = np.zeros((t_total, len(spec.shapes), 2))
    for t in range(t_total):
        img = bg.copy()
        for i, (shape, color) in enumerate(zip(spec.shapes, colors)):
            m = shape.mask(t, h, w)
            img[m] = color
            labels[t][m] = shape.class_id
            centers[t, i] = shape.center_at(t)
        img += rng.normal(0.0, spec.noise, size=img.shape)
        frames[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    clip = VideoClip(frames=frames, labels=labels, num_classes=spec.num_classes, clip_id=clip_id)
    return clip, ShapeTracks(centers)


@dataclass(frozen=True)
class CorpusParams:
    size: int = 64
    frames: int = 15
    num_classes: int = 5
    min_shapes: int = 1
    max_shapes: int = 3
    radius_range: tuple = (5, 12)
    max_speed: int = 2
    fractional_fraction: float = 0.2
    val_clips: int = 10

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radius_range"] = list(self.radius_range)
        return d


def sample_scene(params: CorpusParams, rng: np.random.Generator) -> SceneSpec:
    """Draw a valid scene; velocities are shrunk until every shape fits."""
    size, t_last = params.size, params.frames - 1
    shapes = []
    for _ in range(int(rng.integers(params.min_shapes, params.max_shapes + 1))):
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        cls = int(rng.integers(1, params.num_classes))
        lo, hi = params.radius_range
        radius = (float(rng.integers(lo, hi + 1)), float(rng.integers(lo, hi + 1)))
        if rng.random() < params.fractional_fraction:
            vel = np.round(rng.uniform(-params.max_speed, params.max_speed, size=2) * 4) / 4
        else:
            vel = rng.integers(-params.max_speed, params.max_speed + 1, size=2).astype(np.float64)
        center = []
        for axis in range(2):
            r = radius[axis]
            while True:
                travel = vel[axis] * t_last
                lo_c = max(r + 1, r + 1 - travel)
                hi_c = min(size - 2 - r, size - 2 - r - travel)
                if lo_c <= hi_c:
                    break
                vel[axis] = np.trunc(vel[axis] / 2 * 4) / 4
            center.append(float(np.floor(rng.uniform(lo_c, hi_c + 1e-9))) if hi_c - lo_c >= 1 else float(lo_c))
        shapes.append(Shape(kind, cls, tuple(center), radius, (float(vel[0]), float(vel[1]))))
    return SceneSpec(height=size, width=size, num_frames=params.frames, num_classes=params.num_classes,
                     shapes=tuple(shapes), seed=int(rng.integers(2**31)))


def clip_seeds(seed: int, n_clips: int) -> list[np.random.Generator]:
    """Independent per-clip generators from one seed (SeedSequence spawning)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_clips)]


def generate_corpus(out, n_clips: int, params: CorpusParams | None = None, seed: int = 0) -> dict:
    """Write ``n_clips`` clips plus ``manifest.json``; returns the manifest."""
    params = params or CorpusParams()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, rng in enumerate(clip_seeds(seed, n_clips)):
        spec = sample_scene(params, rng)
        name = f"clip_{i:04d}"
        clip, tracks = render_clip(spec, clip_id=name)
        write_clip(clip, out / name)
        atomic_write_json(out / name / "tracks.json", {"centers": tracks.centers.tolist()})
        names.append(name)
    n_val = min(params.val_clips, n_clips)
    manifest = {
        "seed": seed,
        "n_clips": n_clips,
        "split": {"train": names[: n_clips - n_val], "val": names[n_clips - n_val :]},
        "params": params.to_dict(),
    }
    atomic_write_json(out / "manifest.json", manifest)
    return manifest


def load_manifest(corpus) -> dict:
    path = Path(corpus) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"{corpus}: no manifest.json")
    return json.loads(path.read_text())
