"""Temporal-causal 3D autoencoder with fixed seeded maps.

Compression contract: a pixel video of shape (T+1, 3, H, W) becomes a
latent grid (T/4 + 1, 16, H/8, W/8).  Latent frame 0 sees only pixel
frame 0; latent frame j >= 1 sees exactly pixel frames 4(j-1)+1 .. 4j.
The maps are untrained (seeded linear lifts over 8x8 average pools), so
every downstream test is deterministic while the shape and causality
contracts - including first-frame-only decoding - are real.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError
from .rng import Rng
from .tensor import Tensor, as_tensor, clamp01, concat, matmul, reshape, upsample_nearest

C_T = 4
C_S = 8
CHANNELS = 16

CVPX_MAGIC = b"CVPX"


def latent_shape(t: int, h: int, w: int) -> tuple[int, int, int, int]:
    """Latent extents for a pixel video with T=t motion frames."""
    return (t // C_T + 1, CHANNELS, h // C_S, w // C_S)


def pixel_frame_count(latent_frames: int) -> int:
    return (latent_frames - 1) * C_T + 1


@dataclass
class PixelVideo:
    """Raw frame grid [T+1, 3, H, W] with values in [0,1]."""

    frames: Tensor

    def __post_init__(self):
        self.frames = as_tensor(self.frames)
        shape = self.frames.shape
        if len(shape) != 4 or shape[1] != 3:
            raise ShapeError(f"PixelVideo expects [T+1, 3, H, W], got {shape}")
        t = shape[0] - 1
        if t % C_T != 0:
            raise ShapeError(f"frame count {shape[0]}: T={t} must be divisible by {C_T}")
        if shape[2] % C_S != 0:
            raise ShapeError(f"height {shape[2]} must be divisible by {C_S}")
        if shape[3] % C_S != 0:
            raise ShapeError(f"width {shape[3]} must be divisible by {C_S}")
        v = self.frames.values
        if v.min() < -1e-9 or v.max() > 1.0 + 1e-9:
            raise ContractError(f"pixel values must lie in [0,1], got [{v.min()}, {v.max()}]")


@dataclass
class LatentVideo:
    """Compressed grid [T/4+1, 16, H/8, W/8]."""

    latent: Tensor

    def __post_init__(self):
        self.latent = as_tensor(self.latent)
        shape = self.latent.shape
        if len(shape) != 4 or shape[1] != CHANNELS:
            raise ShapeError(f"LatentVideo expects [T', {CHANNELS}, H', W'], got {shape}")


class CausalVae3d:
    """Stateless fixed-map encoder/decoder pair; safe for concurrent use."""

    def __init__(self, seed: int = 0):
        rng = Rng(seed, ("vae3d",))
        self.seed = seed
        # channel lifts: full-column-rank, so pinv is an exact left inverse
        self.map_first = rng.stream("first").normal((CHANNELS, 3)) / np.sqrt(3.0)
        self.map_group = rng.stream("group").normal((CHANNELS, 3 * C_T)) / np.sqrt(3.0 * C_T)
        self.unmap_first = np.linalg.pinv(self.map_first)
        self.unmap_group = np.linalg.pinv(self.map_group)
        self.stats = {"latent_frames_read": 0}

    # encoding (data path, not differentiable) ------------------------------
    def encode(self, video: PixelVideo) -> LatentVideo:
        frames = video.frames.values
        t = frames.shape[0] - 1
        h, w = frames.shape[2], frames.shape[3]
        hp, wp = h // C_S, w // C_S
        pooled = frames.reshape(t + 1, 3, hp, C_S, wp, C_S).mean(axis=(3, 5))
        n_lat = t // C_T + 1
        latent = np.empty((n_lat, CHANNELS, hp, wp))
        latent[0] = np.einsum("ck,khw->chw", self.map_first, pooled[0])
        for j in range(1, n_lat):
            window = pooled[C_T * (j - 1) + 1: C_T * j + 1]  # causal block of 4
            latent[j] = np.einsum("ck,khw->chw", self.map_group,
                                  window.reshape(3 * C_T, hp, wp))
        return LatentVideo(Tensor(latent))

    # decoding (differentiable) ----------------------------------------------
    def _decode_first(self, latent: Tensor) -> Tensor:
        hp, wp = latent.shape[2], latent.shape[3]
        flat = reshape(latent[0], (CHANNELS, hp * wp))
        rgb = reshape(matmul(Tensor(self.unmap_first), flat), (1, 3, hp, wp))
        return clamp01(upsample_nearest(rgb, C_S, C_S))

    def decode(self, latent: LatentVideo) -> PixelVideo:
        lt = latent.latent
        n_lat = lt.shape[0]
        hp, wp = lt.shape[2], lt.shape[3]
        pieces = [self._decode_first(lt)]
        for j in range(1, n_lat):
            flat = reshape(lt[j], (CHANNELS, hp * wp))
            group = reshape(matmul(Tensor(self.unmap_group), flat), (C_T, 3, hp, wp))
            pieces.append(clamp01(upsample_nearest(group, C_S, C_S)))
        self.stats["latent_frames_read"] = n_lat
        return PixelVideo(concat(pieces, axis=0))

    def decode_first_frame(self, latent: LatentVideo) -> Tensor:
        """First pixel frame, reading latent frame 0 only (causal shortcut)."""
        out = self._decode_first(latent.latent)
        self.stats["latent_frames_read"] = 1
        return reshape(out, out.shape[1:])

    def measure_reconstruction_error(self, rng: Rng, trials: int = 4,
                                     t: int = 8, h: int = 16, w: int = 16) -> float:
        """Max abs decode(encode(v)) - v over seeded probe videos."""
        worst = 0.0
        for i in range(trials):
            frames = rng.stream("probe", i).uniform((t + 1, 3, h, w))
            video = PixelVideo(Tensor(frames))
            recon = self.decode(self.encode(video)).frames.values
            worst = max(worst, float(np.abs(recon - frames).max()))
        return worst


# raw video exchange format ---------------------------------------------------

def write_cvpx(path, frames: np.ndarray):
    """Write [N, 3, H, W] frames as CVPX: magic, u32 dims, f32 LE payload."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"CVPX expects [N, 3, H, W], got {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(CVPX_MAGIC)
        fh.write(struct.pack("<4I", *frames.shape))
        fh.write(frames.astype("<f4").tobytes())


def read_cvpx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CVPX_MAGIC:
            raise ContractError(f"{path}: bad magic {magic!r}")
        dims = struct.unpack("<4I", fh.read(16))
        payload = fh.read(int(np.prod(dims)) * 4)
        if len(payload) != int(np.prod(dims)) * 4:
            raise ContractError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)


def write_sidecar(video_path, clip_id: str, fps: float):
    Path(video_path).with_suffix(".json").write_text(
        json.dumps({"id": clip_id, "fps": fps}, sort_keys=True))


def read_sidecar(video_path) -> dict:
    return json.loads(Path(video_path).with_suffix(".json").read_text())
