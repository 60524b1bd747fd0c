"""Video clips: temporal sampling, resizing, augmentation, synthetic corpora and file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from math import ceil
from pathlib import Path

import numpy as np
from scipy import ndimage

CORNERS = ("none", "TL", "TR", "BL", "BR")
TRANSLATE_PX = 25
MAX_ROTATION = 30.0
MAX_BRIGHTNESS = 0.3

CLIP_MAGIC = b"VCLP"
CLIP_VERSION = 1
_CLIP_HEADER = struct.Struct("<4sHIIIII")


@dataclass
class VideoClip:
    frames: np.ndarray
    label: int
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"clip frames must be [t>=1, h, w, c], got {self.frames.shape}")
        self.label = int(self.label)
        if self.label < 0:
            raise ValueError("label must be non-negative")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# -- temporal sampling ---------------------------------------------------------


def sample_indices(t: int, target_t: int = 32, jitter: bool = False, rng=None) -> np.ndarray:
    """Frame indices that bring a ``t``-frame clip to ``target_t`` frames.

    Long clips are split into ``target_t`` equal intervals and contribute one
    frame each: the floor of the interval midpoint, or a uniformly drawn frame
    inside the interval when ``jitter`` is set.  Short clips keep every frame
    and repeat the last one.
    """
    if t < 1:
        raise ValueError("cannot sample from an empty clip")
    if target_t < 1:
        raise ValueError("target_t must be >= 1")
    if t < target_t:
        return np.concatenate([np.arange(t), np.full(target_t - t, t - 1)])
    i = np.arange(target_t)
    if not jitter:
        return ((2 * i + 1) * t) // (2 * target_t)
    if rng is None:
        raise ValueError("jittered sampling needs an rng")
    # integer frames inside [i*t/T, (i+1)*t/T)
    lo = -((-i * t) // target_t)
    hi = -((-(i + 1) * t) // target_t)
    return rng.integers(lo, hi)


def uniform_sample(clip: VideoClip, target_t: int = 32, jitter: bool = False, rng=None) -> VideoClip:
    idx = sample_indices(clip.num_frames, target_t, jitter, rng)
    return replace(clip, frames=clip.frames[idx])


# -- spatial transforms -------------------------------------------------------


def _axis_coords(n_src: int, n_dst: int) -> np.ndarray:
    if n_dst == 1:
        return np.zeros(1)
    return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))


def resize_frames(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of ``frames[t, h, w, c]``."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    t, h, w, c = frames.shape
    ys, xs = _axis_coords(h, out_h), _axis_coords(w, out_w)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None, None]
    wx = (xs - x0)[None, None, :, None]
    f = frames.astype(np.float64)
    rows = f[:, y0] * (1 - wy) + f[:, y1] * wy
    out = rows[:, :, x0] * (1 - wx) + rows[:, :, x1] * wx
    return out.astype(np.float32)


def resize(clip: VideoClip, out_h: int = 112, out_w: int = 112) -> VideoClip:
    return replace(clip, frames=resize_frames(clip.frames, out_h, out_w))


@dataclass
class AugmentSpec:
    translate_corner: str = "none"
    rotate_deg: float = 0.0
    gaussian_sigma: float = 0.0
    brightness_delta: float = 0.0
    rng_seed: int = 0

    def validate(self) -> "AugmentSpec":
        if self.translate_corner not in CORNERS:
            raise ValueError(f"translate_corner must be one of {CORNERS}")
        if not -MAX_ROTATION <= self.rotate_deg <= MAX_ROTATION:
            raise ValueError(f"rotation must lie in [-{MAX_ROTATION}, {MAX_ROTATION}] degrees")
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if not -MAX_BRIGHTNESS <= self.brightness_delta <= MAX_BRIGHTNESS:
            raise ValueError(f"brightness delta must lie in [-{MAX_BRIGHTNESS}, {MAX_BRIGHTNESS}]")
        return self

    @classmethod
    def random(cls, rng: np.random.Generator, max_sigma: float = 1.5) -> "AugmentSpec":
        return cls(
            translate_corner=CORNERS[int(rng.integers(len(CORNERS)))],
            rotate_deg=float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)),
            gaussian_sigma=float(rng.uniform(0, max_sigma)),
            brightness_delta=float(rng.uniform(-MAX_BRIGHTNESS, MAX_BRIGHTNESS)),
            rng_seed=int(rng.integers(2**31)),
        )


def translate_frames(frames: np.ndarray, corner: str, amount: int = TRANSLATE_PX) -> np.ndarray:
    """Shift content ``amount`` pixels toward ``corner``, zero-filling the vacated band."""
    if corner == "none":
        return frames.copy()
    dy = -amount if corner[0] == "T" else amount
    dx = -amount if corner[1] == "L" else amount
    t, h, w, c = frames.shape
    out = np.zeros_like(frames)
    ny, nx = h - abs(dy), w - abs(dx)
    if ny <= 0 or nx <= 0:
        return out
    sy, sx = max(0, -dy), max(0, -dx)
    ty, tx = max(0, dy), max(0, dx)
    out[:, ty:ty + ny, tx:tx + nx] = frames[:, sy:sy + ny, sx:sx + nx]
    return out


def rotation_coords(h: int, w: int, degrees: float) -> np.ndarray:
    """Source coordinates ``[2, h, w]`` for rotating the displayed image
    counter-clockwise (row 0 on top) by ``degrees`` about the frame center."""
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    # snap so right angles map pixels onto pixels exactly
    cos, sin = np.round(cos, 12), np.round(sin, 12)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: destination -> source
    src_y = cos * yy + sin * xx + cy
    src_x = -sin * yy + cos * xx + cx
    return np.stack([src_y, src_x])


def rotate_frames(frames: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return frames.copy()
    t, h, w, c = frames.shape
    coords = rotation_coords(h, w, degrees)
    out = np.empty_like(frames)
    for i in range(t):
        for ch in range(c):
            out[i, :, :, ch] = ndimage.map_coordinates(
                frames[i, :, :, ch], coords, order=1, mode="grid-constant", cval=0.0)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_frames(frames: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return frames.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.convolve1d(frames.astype(np.float64), k, axis=1, mode="reflect")
    out = ndimage.convolve1d(out, k, axis=2, mode="reflect")
    return out.astype(np.float32)


def augment(clip: VideoClip, spec: AugmentSpec) -> VideoClip:
    """Translate, rotate, blur, then shift brightness; the same transform for every frame."""
    spec.validate()
    f = translate_frames(clip.frames, spec.translate_corner)
    f = rotate_frames(f, spec.rotate_deg)
    f = blur_frames(f, spec.gaussian_sigma)
    f = np.clip(f + np.float32(spec.brightness_delta), 0.0, 1.0)
    return replace(clip, frames=f.astype(np.float32))


def augment_corpus(clips: list[VideoClip], copies: int, rng: np.random.Generator) -> list[VideoClip]:
    """Originals plus ``copies`` random augmentations of each; source ids are kept."""
    out = []
    for clip in clips:
        out.append(clip)
        for _ in range(copies):
            out.append(augment(clip, AugmentSpec.random(rng)))
    return out


# -- synthetic corpus ----------------------------------------------------------


def synth_clip(label: int, num_classes: int, t: int, h: int, w: int, rng: np.random.Generator,
               channels: int = 3) -> np.ndarray:
    """A bright elongated blob drifting along the class direction ``2*pi*label/K``.

    Start point, travel length, blob size, orientation jitter, colour and
    background noise are nuisance variables drawn from ``rng``.  Opposite
    directions trace the same streak, so only the temporal order separates
    them.
    """
    size = min(h, w)
    theta = 2 * np.pi * label / num_classes
    direction = np.array([np.sin(theta), np.cos(theta)])
    travel = rng.uniform(0.35, 0.55) * size
    center = np.array([(h - 1) / 2, (w - 1) / 2]) + rng.uniform(-0.12, 0.12, 2) * size
    phase = rng.uniform(-0.15, 0.15)
    sig_along = rng.uniform(0.07, 0.11) * size
    sig_across = rng.uniform(0.04, 0.07) * size
    axis_angle = theta + rng.uniform(-0.3, 0.3)
    ca, sa = np.cos(axis_angle), np.sin(axis_angle)
    colour = rng.uniform(0.7, 1.0, channels)
    noise = rng.uniform(0.0, 0.08)

    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    frames = np.empty((t, h, w, channels), np.float32)
    for k in range(t):
        s = (k / max(t - 1, 1) - 0.5 + phase) * travel
        cy, cx = center + s * direction
        dy, dx = yy - cy, xx - cx
        along = dy * sa + dx * ca
        across = -dy * ca + dx * sa
        blob = np.exp(-0.5 * ((along / sig_along) ** 2 + (across / sig_across) ** 2))
        frame = blob[..., None] * colour + noise * rng.random((h, w, channels))
        frames[k] = np.clip(frame, 0.0, 1.0)
    return frames


def synth_dataset(n_clips: int, num_classes: int, t: int, h: int, w: int, seed: int = 0,
                  channels: int = 3) -> list[VideoClip]:
    """Deterministic corpus; labels assigned round-robin, clip ``i`` seeded by ``seed ^ i``."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    clips = []
    for i in range(n_clips):
        label = i % num_classes
        rng = np.random.default_rng(seed ^ i)
        frames = synth_clip(label, num_classes, t, h, w, rng, channels)
        clips.append(VideoClip(frames, label, f"synth-{seed}-{i:05d}"))
    return clips


# -- train/validation split ---------------------------------------------------


def train_val_split(clips: list[VideoClip], val_fraction: float = 0.2, seed: int = 0,
                    grouped: bool = True) -> tuple[list[VideoClip], list[VideoClip]]:
    """Stratified split by class.

    With ``grouped`` every clip sharing a ``source_id`` lands on the same
    side; without it each clip is its own group, which lets augmented copies
    of one source leak across the split.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    groups: dict[int, dict[str, list[int]]] = {}
    for i, clip in enumerate(clips):
        key = clip.source_id if grouped else f"#{i}"
        groups.setdefault(clip.label, {}).setdefault(key, []).append(i)
    val_idx = set()
    for label in sorted(groups):
        keys = sorted(groups[label])
        if len(keys) < 2:
            raise ValueError(f"class {label} has fewer than 2 source clips")
        n_val = int(np.floor(val_fraction * len(keys) + 0.5))
        n_val = min(n_val, len(keys) - 1)
        for j in rng.permutation(len(keys))[:n_val]:
            val_idx.update(groups[label][keys[j]])
    train = [c for i, c in enumerate(clips) if i not in val_idx]
    val = [c for i, c in enumerate(clips) if i in val_idx]
    return train, val


# -- file formats ---------------------------------------------------------------


def write_clip(path, clip: VideoClip) -> None:
    t, h, w, c = clip.frames.shape
    header = _CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, t, h, w, c, clip.label)
    payload = np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_clip(path, source_id: str = "") -> VideoClip:
    data = Path(path).read_bytes()
    if len(data) < _CLIP_HEADER.size:
        raise ValueError(f"{path}: truncated clip header")
    magic, version, t, h, w, c, label = _CLIP_HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip file")
    if version != CLIP_VERSION:
        raise ValueError(f"{path}: unsupported clip version {version}")
    n = t * h * w * c
    body = data[_CLIP_HEADER.size:]
    if len(body) != 4 * n:
        raise ValueError(f"{path}: expected {4 * n} payload bytes, found {len(body)}")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, h, w, c).astype(np.float32)
    return VideoClip(frames, label, source_id)


MANIFEST = "manifest.tsv"


def write_corpus(directory, clips: list[VideoClip]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:05d}.vclp"
        write_clip(directory / name, clip)
        lines.append(f"{name}\t{clip.label}\t{clip.source_id}")
    manifest = directory / MANIFEST
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[tuple[str, int, str]]:
    entries = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected path<TAB>label<TAB>source_id")
        entries.append((parts[0], int(parts[1]), parts[2]))
    return entries


def read_corpus(directory) -> list[VideoClip]:
    directory = Path(directory)
    clips = []
    for rel, label, source in read_manifest(directory / MANIFEST):
        clip = read_clip(directory / rel, source)
        if clip.label != label:
            raise ValueError(f"{rel}: manifest label {label} != file label {clip.label}")
        clips.append(clip)
    return clips
