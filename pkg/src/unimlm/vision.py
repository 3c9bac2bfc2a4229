"""Frame sampling, patch decomposition and spatio-temporal patch embedding.

Patch layout: patches are ordered by frame, then grid row, then grid column.
Inside a patch, values are flattened row-major as (pixel row, pixel column,
channel).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import DimensionError, Tensor, add, matmul, reshape, take

STORED_FRAMES = 32
_CLIP_MAGIC = b"VCLP1"


@dataclass
class VideoClip:
    clip_id: str
    frames: np.ndarray  # (F, H, W, 3) float32 in [0, 1]

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[-1] != 3:
            raise DimensionError(f"clip frames must be (F, H, W, 3), got {f.shape}")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise ValueError(f"clip {self.clip_id}: intensities outside [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@dataclass
class PatchGrid:
    patches: np.ndarray  # (T, S, h*w*3)
    grid: tuple[int, int]  # (H/h, W/w)
    patch_size: tuple[int, int]
    frame_indices: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.patches.shape[0]


def sample_frames(n_stored: int, T: int, mode: str = "even",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick ``T`` strictly increasing frame indices out of ``n_stored``.

    ``even`` takes the centre of each of ``T`` equal segments,
    ``floor((i + 1/2) * n_stored / T)``; ``random`` draws a sorted subset
    without replacement.
    """
    if not 1 <= T <= n_stored:
        raise ConfigError(f"T={T} outside [1, {n_stored}]")
    if mode == "even":
        return np.floor((np.arange(T) + 0.5) * n_stored / T).astype(np.int64)
    if mode == "random":
        if rng is None:
            raise ConfigError("random frame sampling needs an rng")
        return np.sort(rng.choice(n_stored, size=T, replace=False)).astype(np.int64)
    raise ConfigError(f"unknown sampling mode {mode!r}")


def center_crop(frames: np.ndarray, size: tuple[int, int] | None = None) -> np.ndarray:
    if size is None or frames.shape[1:3] == tuple(size):
        return frames
    h, w = size
    top = (frames.shape[1] - h) // 2
    left = (frames.shape[2] - w) // 2
    return frames[:, top:top + h, left:left + w]


def patchify(frames: np.ndarray, h: int, w: int,
             frame_indices: np.ndarray | None = None) -> PatchGrid:
    T, H, W, C = frames.shape
    if H % h or W % w:
        raise DimensionError(f"frame {H}x{W} not divisible into {h}x{w} patches")
    gh, gw = H // h, W // w
    p = frames.reshape(T, gh, h, gw, w, C).transpose(0, 1, 3, 2, 4, 5)
    p = p.reshape(T, gh * gw, h * w * C)
    idx = np.arange(T) if frame_indices is None else np.asarray(frame_indices)
    return PatchGrid(p, (gh, gw), (h, w), idx)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    T = grid.num_frames
    gh, gw = grid.grid
    h, w = grid.patch_size
    C = grid.patches.shape[-1] // (h * w)
    x = grid.patches.reshape(T, gh, gw, h, w, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(T, gh * h, gw * w, C)


def patchify_clip(clip: VideoClip, h: int, w: int) -> np.ndarray:
    """All stored frames of a clip as a (F, S, h*w*3) float64 array."""
    return patchify(clip.frames.astype(np.float64), h, w).patches


def embed_patches(patches, proj_w: Tensor, proj_b: Tensor, spatial_pos: Tensor,
                  temporal_pos: Tensor) -> Tensor:
    """Project patches to width d and add spatial and temporal embeddings.

    ``patches`` is (T, S, P) or batched (B, T, S, P); rows of the temporal
    table beyond T are unused. The result is flattened to (…, T*S, d).
    Positional embeddings are added after the full affine projection.
    """
    arr = patches.patches if isinstance(patches, PatchGrid) else np.asarray(patches)
    *lead, T, S, P = arr.shape
    d = proj_w.shape[1]
    if proj_w.shape[0] != P:
        raise DimensionError(f"projection expects patch length {proj_w.shape[0]}, got {P}")
    if spatial_pos.shape != (S, d):
        raise DimensionError(f"spatial table {spatial_pos.shape} vs grid ({S}, {d})")
    if temporal_pos.ndim != 2 or temporal_pos.shape[1] != d or temporal_pos.shape[0] < T:
        raise DimensionError(f"temporal table {temporal_pos.shape} too small for T={T}")
    x = add(matmul(Tensor(arr.reshape(*lead, T * S, P)), proj_w), proj_b)
    t_rows = temporal_pos if temporal_pos.shape[0] == T else take(temporal_pos, slice(0, T))
    pos = add(reshape(t_rows, (T, 1, d)), reshape(spatial_pos, (1, S, d)))
    return add(x, reshape(pos, (T * S, d)))


def save_clip(clip: VideoClip, path) -> None:
    F, H, W, _ = clip.frames.shape
    payload = np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(_CLIP_MAGIC + struct.pack("<III", H, W, F) + payload)


def load_clip(path, clip_id: str | None = None) -> VideoClip:
    raw = Path(path).read_bytes()
    if raw[:5] != _CLIP_MAGIC:
        raise ValueError(f"{path}: bad clip header")
    H, W, F = struct.unpack_from("<III", raw, 5)
    data = np.frombuffer(raw, dtype="<f4", offset=17)
    if data.size != F * H * W * 3:
        raise ValueError(f"{path}: payload size mismatch")
    frames = data.reshape(F, H, W, 3).astype(np.float32)
    return VideoClip(clip_id or Path(path).stem, frames)
