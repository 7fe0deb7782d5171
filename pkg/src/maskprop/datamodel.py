"""Core domain types and the on-disk formats shared by every other module.

All containers validate on construction and are treated as immutable
afterwards.  File formats are documented in ``docs/formats.md``.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

IGNORE_LABEL = 255


class ValidationError(ValueError):
    """Raised when a container or file violates its invariants."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray  # T x H x W x 3, uint8
    num_classes: int
    labels: np.ndarray | None = None  # T x H x W, uint8
    clip_id: str = "clip"

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValidationError(f"frames must be T x H x W x 3, got {frames.shape}")
        if frames.dtype != np.uint8:
            raise ValidationError(f"frames must be uint8, got {frames.dtype}")
        t, h, w, _ = frames.shape
        if t < 1:
            raise ValidationError("clip needs at least one frame")
        if h < 8 or w < 8 or h % 32 or w % 32:
            raise ValidationError(f"frame size {h}x{w} must be >= 8 and divisible by 32")
        if not isinstance(self.num_classes, (int, np.integer)) or self.num_classes < 1:
            raise ValidationError(f"num_classes must be a positive int, got {self.num_classes}")
        object.__setattr__(self, "frames", _frozen(frames))
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (t, h, w):
                raise ValidationError(f"labels shape {labels.shape} != {(t, h, w)}")
            if labels.dtype != np.uint8:
                if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
                    raise ValidationError("labels must fit in 8 bits")
                labels = labels.astype(np.uint8)
            for i in range(t):
                bad = (labels[i] >= self.num_classes) & (labels[i] != IGNORE_LABEL)
                if bad.any():
                    raise ValidationError(
                        f"frame {i}: label {int(labels[i][bad][0])} outside [0, {self.num_classes})"
                    )
            object.__setattr__(self, "labels", _frozen(labels))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class KeyFrameSchedule:
    interval: int
    num_frames: int
    key_indices: tuple = field(init=False)
    governor: dict = field(init=False)

    def __post_init__(self):
        if self.interval < 1:
            raise ValidationError(f"interval must be >= 1, got {self.interval}")
        if self.num_frames < 1:
            raise ValidationError("schedule needs at least one frame")
        keys = tuple(range(0, self.num_frames, self.interval))
        gov = {t: (t // self.interval) * self.interval for t in range(self.num_frames)}
        object.__setattr__(self, "key_indices", keys)
        object.__setattr__(self, "governor", gov)

    def is_key(self, t: int) -> bool:
        return self.governor[t] == t


@dataclass(frozen=True)
class SegmentQuerySet:
    queries: np.ndarray  # N x C

    def __post_init__(self):
        q = np.asarray(self.queries)
        if q.ndim != 2 or q.shape[0] < 1 or q.shape[1] < 1:
            raise ValidationError(f"queries must be N x C with N, C >= 1, got {q.shape}")
        if not np.isfinite(q).all():
            raise ValidationError("queries contain non-finite values")
        object.__setattr__(self, "queries", _frozen(q))

    @property
    def n(self) -> int:
        return self.queries.shape[0]


@dataclass(frozen=True)
class MaskPredictionSet:
    mask_logits: np.ndarray  # N x H x W
    class_logits: np.ndarray  # N x (K + 1), last column is "no object"

    def __post_init__(self):
        m = np.asarray(self.mask_logits)
        c = np.asarray(self.class_logits)
        if m.ndim != 3:
            raise ValidationError(f"mask_logits must be N x H x W, got {m.shape}")
        if c.ndim != 2 or c.shape[0] != m.shape[0] or c.shape[1] < 2:
            raise ValidationError(f"class_logits shape {c.shape} inconsistent with {m.shape[0]} masks")
        if not (np.isfinite(m).all() and np.isfinite(c).all()):
            raise ValidationError("mask predictions contain non-finite values")
        object.__setattr__(self, "mask_logits", _frozen(m))
        object.__setattr__(self, "class_logits", _frozen(c))

    @property
    def n(self) -> int:
        return self.mask_logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[1] - 1


@dataclass(frozen=True)
class FlowMapSet:
    flow: np.ndarray  # N x 2 x H x W; channel 0 = dx (columns), channel 1 = dy (rows)

    def __post_init__(self):
        f = np.asarray(self.flow)
        if f.ndim != 4 or f.shape[1] != 2:
            raise ValidationError(f"flow must be N x 2 x H x W, got {f.shape}")
        if not np.isfinite(f).all():
            raise ValidationError("flow contains non-finite values")
        bound = max(f.shape[2], f.shape[3])
        if f.size and np.abs(f).max() > bound:
            raise ValidationError(f"flow magnitude exceeds sanity bound {bound}")
        object.__setattr__(self, "flow", _frozen(f))

    @property
    def n(self) -> int:
        return self.flow.shape[0]


@dataclass(frozen=True)
class MotionFeaturePyramid:
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    b4: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        for name, div in (("b1", 32), ("b2", 16), ("b3", 8), ("b4", 4)):
            arr = getattr(self, name)
            if tuple(arr.shape[-2:]) != (self.height // div, self.width // div):
                raise ValidationError(f"{name} spatial size {arr.shape[-2:]} != 1/{div} of frame")


@dataclass(frozen=True)
class SemanticMap:
    labels: np.ndarray  # H x W
    num_classes: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValidationError(f"semantic map must be H x W, got {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValidationError(f"semantic labels outside [0, {self.num_classes})")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))


@dataclass(frozen=True)
class ModelConfig:
    num_queries: int = 16
    embed_dim: int = 32
    num_classes: int = 5
    stages: int = 3
    blocks_per_stage: int = 3
    key_interval: int = 5
    heads: int = 4
    ffn_dim: int = 64
    backbone_widths: tuple = (48, 96, 160, 256)
    backbone_stem: int = 24
    encoder_widths: tuple = (32, 64, 96, 128)
    encoder_stem: int = 16
    flow_variant: str = "mpvss"
    max_tokens: int = 4096
    seed: int = 0

    VARIANTS = ("mpvss", "pixelflow", "query-random", "query-learned", "query-for-pf")

    def __post_init__(self):
        if self.stages < 1 or self.blocks_per_stage < 1:
            raise ValidationError("stages and blocks_per_stage must be >= 1")
        if self.embed_dim % self.heads:
            raise ValidationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ValidationError("embed_dim must be divisible by 4 for 2-D sine embeddings")
        if self.num_queries < 1 or self.num_classes < 1:
            raise ValidationError("num_queries and num_classes must be >= 1")
        if self.key_interval < 1:
            raise ValidationError("key_interval must be >= 1")
        if self.flow_variant not in self.VARIANTS:
            raise ValidationError(f"unknown flow variant {self.flow_variant!r}")
        object.__setattr__(self, "backbone_widths", tuple(int(v) for v in self.backbone_widths))
        object.__setattr__(self, "encoder_widths", tuple(int(v) for v in self.encoder_widths))
        if len(self.backbone_widths) != 4 or len(self.encoder_widths) != 4:
            raise ValidationError("backbone and encoder need exactly 4 widths (1/4 .. 1/32)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        d.update(kw)
        return ModelConfig.from_dict(d)


def load_config(path) -> ModelConfig:
    """Read a flat JSON object of ModelConfig fields."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise ValidationError("config must be a flat JSON object")
    return ModelConfig.from_dict(data)


# ---------------------------------------------------------------------------
# atomic file helpers


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------
# PPM / PGM


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValidationError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + img.tobytes()


def decode_pnm(data: bytes, where: str = "") -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{where}: truncated PNM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValidationError(f"{where}: unsupported PNM variant {magic!r} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    payload = data[pos:]
    if len(payload) != w * h * channels:
        raise ValidationError(f"{where}: expected {w * h * channels} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_pgm(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(img))


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), str(path))


def write_clip(clip: VideoClip, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for t in range(clip.num_frames):
        atomic_write_bytes(root / "frames" / f"{t:05d}.ppm", encode_pnm(clip.frames[t]))
        if clip.labels is not None:
            atomic_write_bytes(root / "labels" / f"{t:05d}.pgm", encode_pnm(clip.labels[t]))
    meta = {
        "clip_id": clip.clip_id,
        "num_frames": clip.num_frames,
        "height": clip.height,
        "width": clip.width,
        "num_classes": int(clip.num_classes),
        "labels": clip.labels is not None,
    }
    atomic_write_json(root / "meta.json", meta)


def read_clip(path) -> VideoClip:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise ValidationError(f"{root}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    t, h, w, k = meta["num_frames"], meta["height"], meta["width"], meta["num_classes"]
    frames = np.empty((t, h, w, 3), np.uint8)
    has_labels = meta.get("labels", True)
    labels = np.empty((t, h, w), np.uint8) if has_labels else None
    for i in range(t):
        fp = root / "frames" / f"{i:05d}.ppm"
        if not fp.exists():
            raise ValidationError(f"{root}: missing frame {i:05d}")
        img = read_pnm(fp)
        if img.shape != (h, w, 3):
            raise ValidationError(f"frame {i}: shape {img.shape} != meta {(h, w, 3)}")
        frames[i] = img
        if has_labels:
            lp = root / "labels" / f"{i:05d}.pgm"
            if not lp.exists():
                raise ValidationError(f"{root}: missing labels for frame {i:05d}")
            lab = read_pnm(lp)
            if lab.shape != (h, w):
                raise ValidationError(f"frame {i}: label shape {lab.shape} != meta {(h, w)}")
            labels[i] = lab
    return VideoClip(frames=frames, labels=labels, num_classes=k, clip_id=meta["clip_id"])


# ---------------------------------------------------------------------------
# flow dumps


def write_flow(flows: FlowMapSet, path) -> None:
    path = Path(path)
    n, _, h, w = flows.flow.shape
    atomic_write_bytes(path, flows.flow.astype("<f4").tobytes())
    sidecar = {"n": n, "h": h, "w": w, "channel_order": ["dx", "dy"], "dtype": "float32-le"}
    atomic_write_json(path.with_name(path.name + ".json"), sidecar)


def read_flow(path) -> FlowMapSet:
    path = Path(path)
    side = json.loads(path.with_name(path.name + ".json").read_text())
    n, h, w = side["n"], side["h"], side["w"]
    data = path.read_bytes()
    expected = n * 2 * h * w * 4
    if len(data) != expected:
        raise ValidationError(f"{path}: payload has {len(data)} bytes, sidecar implies {expected}")
    arr = np.frombuffer(data, dtype="<f4").reshape(n, 2, h, w).astype(np.float32)
    return FlowMapSet(arr)


# ---------------------------------------------------------------------------
# checkpoints: [u32 LE manifest length][manifest JSON][float32 LE payload]

CHECKPOINT_MAGIC = "maskprop-ckpt-v1"


def write_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": CHECKPOINT_MAGIC, "tensors": entries, "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode()
    blob = len(head).to_bytes(4, "little") + head + b"".join(chunks)
    atomic_write_bytes(path, blob)


def read_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValidationError(f"{path}: truncated checkpoint")
    hlen = int.from_bytes(data[:4], "little")
    manifest = json.loads(data[4 : 4 + hlen])
    if manifest.get("format") != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a maskprop checkpoint")
    payload = data[4 + hlen :]
    tensors = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValidationError(f"{path}: tensor {e['name']} truncated")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return tensors, manifest["meta"]
