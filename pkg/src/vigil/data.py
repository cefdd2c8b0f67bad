"""Synthetic labeled video generation, clip container format, manifests.

Real driver-monitoring footage is access-restricted, so training and
verification run on synthetic clips: a bright patch moving along a
class-specific trajectory (direction, speed, blink period) over a
class-specific texture, plus clamped Gaussian pixel noise. Classes are
separable by construction, which is what makes desk-scale accuracy
criteria meaningful.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataFormatError, VigilError
from .util import derive_rng

# rng derivation tags (see util.derive_rng)
_TAG_CLIP = 101
_TAG_TEXTURE = 102

SVC_MAGIC = b"SVC1"
SVC_VERSION = 1
DTYPE_U8 = 0
DTYPE_F64 = 1

_MIN_EXTENT = 16


@dataclass
class VideoClip:
    """A [T,H,W,C] pixel block in [0,1] plus its class label."""

    frames: np.ndarray
    label: int
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise VigilError(f"clip frames must be [T,H,W,3], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise VigilError("clip contains non-finite pixels")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise VigilError("clip pixels must lie in [0,1]")
        if self.label < 0:
            raise VigilError(f"negative label {self.label}")

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class MotionFamily:
    """Per-class trajectory parameters for the synthetic generator."""

    direction: float  # radians
    speed: float  # pixels per frame
    blink_period: int  # frames per brightness cycle; 0 = steady
    texture_seed: int


@dataclass
class SyntheticSpec:
    num_classes: int
    clips_per_class: int
    seq_len: int = 30
    height: int = 64
    width: int = 64
    noise_sigma: float = 0.05
    families: list[MotionFamily] = field(default_factory=list)

    def __post_init__(self):
        if self.height < _MIN_EXTENT or self.width < _MIN_EXTENT:
            raise ValueError(f"synthetic frames must be at least {_MIN_EXTENT}x{_MIN_EXTENT}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.families:
            self.families = default_families(self.num_classes)
        if len(self.families) != self.num_classes:
            raise ValueError(
                f"{len(self.families)} motion families for {self.num_classes} classes"
            )
        seen = set()
        for fam in self.families:
            key = (round(fam.direction, 9), round(fam.speed, 9), fam.blink_period, fam.texture_seed)
            if key in seen:
                raise ValueError("motion families must be pairwise distinct")
            seen.add(key)


def default_families(num_classes):
    """Distinct trajectories: spread directions, alternating blink, own texture.

    For the two-class case this reads as steady-vs-blinking (alert vs
    drowsy-like); larger class counts fan out around the circle.
    """
    fams = []
    for k in range(num_classes):
        fams.append(
            MotionFamily(
                direction=2.0 * math.pi * k / num_classes,
                speed=1.25 + 0.25 * (k % 3),
                blink_period=0 if k % 2 == 0 else 8 + 2 * (k % 4),
                texture_seed=1000 + k,
            )
        )
    return fams


def _texture(seed, height, width):
    """Smooth per-class background: coarse noise upsampled bilinearly."""
    rng = derive_rng(seed, _TAG_TEXTURE)
    coarse = rng.uniform(0.1, 0.45, size=(5, 5, 3))
    ys = np.linspace(0, 4, height)
    xs = np.linspace(0, 4, width)
    y0 = np.clip(ys.astype(int), 0, 3)
    x0 = np.clip(xs.astype(int), 0, 3)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def _render_clip(spec, family, rng):
    h, w, t = spec.height, spec.width, spec.seq_len
    bg = _texture(family.texture_seed, h, w)
    radius = max(3.0, min(h, w) / 8.0)
    cy = h / 2.0 + rng.uniform(-3, 3)
    cx = w / 2.0 + rng.uniform(-3, 3)
    vy = math.sin(family.direction) * family.speed
    vx = math.cos(family.direction) * family.speed

    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    frames = np.empty((t, h, w, 3))
    for ti in range(t):
        py = (cy + vy * ti) % h
        px = (cx + vx * ti) % w
        # toroidal distance so the patch wraps cleanly
        dy = np.minimum(np.abs(yy - py), h - np.abs(yy - py))
        dx = np.minimum(np.abs(xx - px), w - np.abs(xx - px))
        blob = np.exp(-(dy * dy + dx * dx) / (2.0 * radius * radius))
        if family.blink_period > 0:
            brightness = 0.5 * (1.0 + math.cos(2.0 * math.pi * ti / family.blink_period))
        else:
            brightness = 1.0
        frame = bg + 0.55 * brightness * blob[:, :, None]
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, size=frame.shape)
        frames[ti] = frame
    return np.clip(frames, 0.0, 1.0)


def generate_synthetic(spec, seed):
    """Deterministic, exactly class-balanced clip list.

    Per-clip streams are derived as hash(seed, class, index), so the output
    is reproducible regardless of generation order.
    """
    clips = []
    for k, family in enumerate(spec.families):
        for i in range(spec.clips_per_class):
            rng = derive_rng(seed, _TAG_CLIP, k, i)
            frames = _render_clip(spec, family, rng)
            clips.append(VideoClip(frames=frames, label=k, source_id=f"synth-c{k}-i{i}"))
    return clips


def clip_sample(frames, seq_len=30, stride=30, label=0, source_id="video"):
    """Slide fixed-length windows over a long frame sequence.

    Windows start at 0, stride, 2*stride, ...; a final partial window is
    dropped. The input must be at least seq_len frames long.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    if n < seq_len:
        raise ValueError(f"video has {n} frames, need at least {seq_len}")
    if stride < 1:
        raise ValueError("stride must be positive")
    clips = []
    for start in range(0, n - seq_len + 1, stride):
        clips.append(
            VideoClip(
                frames=frames[start : start + seq_len],
                label=label,
                source_id=f"{source_id}@{start}",
            )
        )
    return clips


# ---------------------------------------------------------------------------
# SVC1 container


def write_clip(path, clip, dtype=DTYPE_U8):
    """Serialize one clip. dtype 0 stores u8 pixels scaled by 255 (lossy by
    at most 1/510 per pixel); dtype 1 stores raw f64, bitwise lossless."""
    if dtype not in (DTYPE_U8, DTYPE_F64):
        raise ValueError(f"unknown dtype tag {dtype}")
    t, h, w, c = clip.frames.shape
    header = SVC_MAGIC + struct.pack(
        "<HIIIIBI", SVC_VERSION, t, h, w, c, dtype, clip.label
    )
    if dtype == DTYPE_U8:
        payload = np.round(clip.frames * 255.0).astype(np.uint8).tobytes()
    else:
        payload = clip.frames.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise DataFormatError(f"truncated clip file while reading {what}", offset=fh.tell() - len(data))
    return data


def read_clip(path):
    """Parse an SVC1 container back into a VideoClip."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != SVC_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}, expected {SVC_MAGIC!r}", offset=0)
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != SVC_VERSION:
            raise DataFormatError(f"unsupported container version {version}", offset=4)
        t, h, w, c = struct.unpack("<IIII", _read_exact(fh, 16, "extents"))
        (dtype,) = struct.unpack("<B", _read_exact(fh, 1, "dtype tag"))
        (label,) = struct.unpack("<I", _read_exact(fh, 4, "label"))
        count = t * h * w * c
        if dtype == DTYPE_U8:
            raw = _read_exact(fh, count, "u8 payload")
            frames = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
        elif dtype == DTYPE_F64:
            raw = _read_exact(fh, count * 8, "f64 payload")
            frames = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        else:
            raise DataFormatError(f"unknown dtype tag {dtype}", offset=26)
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError("trailing bytes after payload", offset=fh.tell() - 1)
    return VideoClip(frames=frames.reshape(t, h, w, c), label=label, source_id=os.path.basename(str(path)))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRow:
    path: str
    label: int
    split: str | None = None


def write_manifest(path, rows):
    seen = set()
    lines = []
    for row in rows:
        if row.path in seen:
            raise VigilError(f"duplicate manifest path {row.path!r}")
        seen.add(row.path)
        if row.split:
            lines.append(f"{row.path},{row.label},{row.split}\n")
        else:
            lines.append(f"{row.path},{row.label}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_manifest(path):
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) not in (2, 3):
                raise DataFormatError(f"manifest line {lineno}: expected path,label[,split]")
            rel, label_str = parts[0], parts[1]
            try:
                label = int(label_str)
            except ValueError:
                raise DataFormatError(f"manifest line {lineno}: bad label {label_str!r}") from None
            if label < 0:
                raise DataFormatError(f"manifest line {lineno}: negative label")
            if rel in seen:
                raise DataFormatError(f"manifest line {lineno}: duplicate path {rel!r}")
            seen.add(rel)
            rows.append(ManifestRow(path=rel, label=label, split=parts[2] if len(parts) == 3 else None))
    return rows


def load_dataset(data_dir, manifest_name="manifest.csv"):
    """Read every clip referenced by a directory's manifest, in manifest order."""
    manifest_path = os.path.join(data_dir, manifest_name)
    rows = read_manifest(manifest_path)
    clips = []
    for row in rows:
        clip = read_clip(os.path.join(data_dir, row.path))
        if clip.label != row.label:
            raise DataFormatError(
                f"label mismatch for {row.path}: manifest says {row.label}, file says {clip.label}"
            )
        clips.append(clip)
    return clips
