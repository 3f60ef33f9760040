"""Synthetic bouncing-shape videos, block windows and the binary video container.

Videos are float32 numpy arrays of shape ``(frames, H, W, C)`` with values in
[0, 1].
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .masking import BlockLayout

SHAPE_KINDS = ("square", "circle", "cross")

MAGIC = b"MCVDVID1"
VERSION = 1
_HEADER = struct.Struct("<8sB4I")
MAX_DIM = 1 << 16


class VideoFormatError(IOError):
    pass


class BadMagicError(VideoFormatError):
    pass


class TruncatedVideoError(VideoFormatError):
    pass


class DimensionOverflowError(VideoFormatError):
    pass


@dataclass
class SyntheticSpec:
    frame_size: int = 16
    num_shapes: int = 1
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    shape_size: int = 5
    speed_range: tuple[float, float] = (0.5, 1.5)
    bounce_randomness: float = 0.2
    length: int = 20
    channels: int = 1
    seed: int = 0
    # optional per-shape overrides, (x, y) pairs in pixels
    initial_positions: tuple[tuple[float, float], ...] | None = None
    initial_velocities: tuple[tuple[float, float], ...] | None = None

    def validate(self):
        if self.shape_size < 1 or self.shape_size > self.frame_size:
            raise ValueError(f"shape of size {self.shape_size} does not fit a {self.frame_size}px frame")
        if self.num_shapes < 1 or self.length < 1 or self.channels < 1:
            raise ValueError("num_shapes, length and channels must be positive")
        bad = set(self.shape_kinds) - set(SHAPE_KINDS)
        if bad or not self.shape_kinds:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        lo, hi = self.speed_range
        if not 0.0 <= lo <= hi:
            raise ValueError("speed_range must satisfy 0 <= lo <= hi")
        if not 0.0 <= self.bounce_randomness <= 1.0:
            raise ValueError("bounce_randomness is a probability")
        for name in ("initial_positions", "initial_velocities"):
            v = getattr(self, name)
            if v is not None and len(v) != self.num_shapes:
                raise ValueError(f"{name} needs one entry per shape")

    def to_dict(self) -> dict:
        return asdict(self)


def _stamp(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if kind == "square":
        return np.ones((size, size), np.float32)
    if kind == "circle":
        return ((yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2).astype(np.float32)
    bar = max(1, size // 3)
    lo = (size - bar) // 2
    m = np.zeros((size, size), np.float32)
    m[lo:lo + bar, :] = 1.0
    m[:, lo:lo + bar] = 1.0
    return m


def _reflect(pos: float, vel: float, hi: float) -> tuple[float, float, bool]:
    """Advance one frame inside [0, hi] with mirror reflection at the walls."""
    pos += vel
    hit = False
    while pos < 0.0 or pos > hi:
        hit = True
        if pos < 0.0:
            pos = -pos
        else:
            pos = 2.0 * hi - pos
        vel = -vel
    if hi == 0.0:
        pos = 0.0
    return pos, vel, hit


def gen_moving_shapes(spec: SyntheticSpec, return_positions: bool = False):
    """Render one video of shapes moving at constant velocity between reflecting walls.

    On each wall contact the velocity component normal to that wall is, with
    probability ``bounce_randomness``, redrawn from ``speed_range`` (keeping
    the outgoing direction). Positions are top-left corners in pixels; shapes
    are drawn at the rounded position so their pixel mass never changes.
    With ``return_positions`` the float trajectories ``(frames, shapes, 2)``
    are returned alongside the video.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    S, n = spec.frame_size, spec.num_shapes
    hi = float(S - spec.shape_size)
    lo_v, hi_v = spec.speed_range

    kinds = [spec.shape_kinds[i] for i in rng.integers(0, len(spec.shape_kinds), n)]
    if spec.initial_positions is not None:
        pos = np.array(spec.initial_positions, dtype=np.float64)
    else:
        pos = rng.uniform(0.0, hi, size=(n, 2))
    if spec.initial_velocities is not None:
        vel = np.array(spec.initial_velocities, dtype=np.float64)
    else:
        angle = rng.uniform(0.0, 2 * np.pi, n)
        speed = rng.uniform(lo_v, hi_v, n)
        vel = np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1)
    if np.any(pos < 0.0) or np.any(pos > hi):
        raise ValueError("initial positions must keep shapes inside the frame")

    stamps = [_stamp(k, spec.shape_size) for k in kinds]
    video = np.zeros((spec.length, S, S, spec.channels), np.float32)
    track = np.zeros((spec.length, n, 2))
    for t in range(spec.length):
        track[t] = pos
        for i in range(n):
            x, y = (int(round(v)) for v in pos[i])
            region = video[t, y:y + spec.shape_size, x:x + spec.shape_size, :]
            np.maximum(region, stamps[i][:, :, None], out=region)
        for i in range(n):
            for axis in range(2):
                p, v, hit = _reflect(pos[i, axis], vel[i, axis], hi)
                if hit and spec.bounce_randomness > 0.0 and rng.random() < spec.bounce_randomness:
                    v = np.sign(v) * rng.uniform(lo_v, hi_v) if v != 0 else v
                pos[i, axis], vel[i, axis] = p, v
    return (video, track) if return_positions else video


def gen_dataset(spec: SyntheticSpec, count: int) -> list[np.ndarray]:
    """``count`` videos with seeds ``spec.seed, spec.seed + 1, ...``."""
    out = []
    for i in range(count):
        s = SyntheticSpec(**{**asdict(spec), "seed": spec.seed + i})
        out.append(gen_moving_shapes(s))
    return out


@dataclass
class VideoBlock:
    past: np.ndarray
    current: np.ndarray
    future: np.ndarray
    start: int = 0
    source: int = field(default=0, compare=False)

    def window(self) -> np.ndarray:
        return np.concatenate([self.past, self.current, self.future], axis=0)


def extract_blocks(video: np.ndarray, layout: BlockLayout, stride: int = 1, source: int = 0) -> list[VideoBlock]:
    if stride < 1:
        raise ValueError("stride must be positive")
    need = layout.window
    if video.shape[0] < need:
        raise ValueError(f"video has {video.shape[0]} frames; need at least {need} (p + k + f)")
    p, k = layout.p, layout.k
    blocks = []
    for s in range(0, video.shape[0] - need + 1, stride):
        w = video[s:s + need]
        blocks.append(VideoBlock(w[:p].copy(), w[p:p + k].copy(), w[p + k:].copy(), s, source))
    return blocks


def stack_blocks(blocks: list[VideoBlock]) -> dict[str, np.ndarray]:
    """Batch blocks into ``(B, frames, C, H, W)`` arrays keyed past/current/future."""
    return {name: np.stack([getattr(b, name) for b in blocks]).transpose(0, 1, 4, 2, 3)
            for name in ("past", "current", "future")}


def to_video(frames: np.ndarray) -> np.ndarray:
    """``(frames, C, H, W)`` -> ``(frames, H, W, C)``."""
    return np.ascontiguousarray(np.asarray(frames, dtype=np.float32).transpose(0, 2, 3, 1))


def from_video(video: np.ndarray) -> np.ndarray:
    """``(frames, H, W, C)`` -> ``(frames, C, H, W)``."""
    return np.ascontiguousarray(np.asarray(video, dtype=np.float32).transpose(0, 3, 1, 2))


def encode_video(video: np.ndarray) -> bytes:
    video = np.asarray(video)
    if video.ndim != 4:
        raise ValueError(f"expected (frames, H, W, C), got shape {video.shape}")
    if any(d > MAX_DIM for d in video.shape):
        raise DimensionOverflowError(f"shape {video.shape} exceeds the {MAX_DIM} per-axis limit")
    payload = np.ascontiguousarray(video, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, *video.shape) + payload


def decode_video(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        if not MAGIC.startswith(data[:len(MAGIC)]):
            raise BadMagicError("bad magic: not an MCVD video file")
        raise TruncatedVideoError(f"header truncated: {len(data)} of {_HEADER.size} bytes")
    magic, version, *dims = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VideoFormatError(f"unsupported container version {version}")
    if any(d > MAX_DIM for d in dims):
        raise DimensionOverflowError(f"header dims {dims} exceed the {MAX_DIM} per-axis limit")
    n = int(np.prod(dims, dtype=np.uint64))
    payload = len(data) - _HEADER.size
    if n * 4 != payload:
        raise TruncatedVideoError(f"header dims {dims} need {n * 4} payload bytes, found {payload}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32).reshape(dims)


def write_video(path, video: np.ndarray) -> None:
    data = encode_video(video)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def read_video(path) -> np.ndarray:
    return decode_video(Path(path).read_bytes())


def export_strip(video: np.ndarray, path, scale: int = 4, gap: int = 1) -> None:
    """Save frames side by side as a PNG, nearest-neighbour upscaled."""
    v = np.clip(np.asarray(video, dtype=np.float32), 0.0, 1.0)
    F, H, W, C = v.shape
    strip = np.ones((H, F * (W + gap) - gap, C), np.float32)
    for i in range(F):
        strip[:, i * (W + gap):i * (W + gap) + W] = v[i]
    img = (strip * 255.0 + 0.5).astype(np.uint8)
    img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    if C not in (1, 3):
        raise ValueError(f"cannot export {C}-channel frames")
    Image.fromarray(img[..., 0] if C == 1 else img).save(path)
