"""Procedural toy data: 2D mixtures for distribution-level experiments and
synthetic videos (pans, moving shapes, crossfades) for curation and the
video model's shape paths.  Everything is a pure function of its Rng."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..rng import Rng
from ..vae3d import write_cvpx, write_sidecar


# 2D distributions ------------------------------------------------------------

def two_gaussian_mixture(rng: Rng, n: int, centers=((-3.0, -3.0), (3.0, 3.0)),
                         sigma: float = 0.5) -> np.ndarray:
    """Equal-weight two-mode Gaussian mixture in the plane."""
    centers = np.asarray(centers)
    which = rng.stream("mode").integers(0, len(centers), size=n)
    return centers[which] + sigma * rng.stream("noise").normal((n, 2))


def color_mixture_images(rng: Rng, n: int, h: int = 8, w: int = 8,
                         palette=((0.2, 0.3, 0.8), (0.8, 0.6, 0.2)),
                         sigma: float = 0.04) -> np.ndarray:
    """Near-constant-color images whose mean colors form a mixture; [n,1,3,h,w]."""
    palette = np.asarray(palette)
    which = rng.stream("mode").integers(0, len(palette), size=n)
    colors = palette[which] + sigma * rng.stream("noise").normal((n, 3))
    colors = np.clip(colors, 0.02, 0.98)
    return np.broadcast_to(colors[:, None, :, None, None], (n, 1, 3, h, w)).copy()


# synthetic video builders ------------------------------------------------------

def smooth_texture(rng: Rng, h: int, w: int, scale: int = 4,
                   lo: float = 0.2, hi: float = 0.8) -> np.ndarray:
    """Band-limited noise: coarse uniform grid, bilinearly upsampled."""
    ch = h // scale + 2
    cw = w // scale + 2
    coarse = rng.uniform((ch, cw), lo, hi)
    ys = np.linspace(0, ch - 1.001, h)
    xs = np.linspace(0, cw - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = ys - y0, xs - x0
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x0 + 1] * fx
    bot = coarse[y0 + 1][:, x0] * (1 - fx) + coarse[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def texture_rgb(rng: Rng, h: int, w: int, scale: int = 4,
                lo: float = 0.2, hi: float = 0.8) -> np.ndarray:
    return np.stack([smooth_texture(rng.stream(c), h, w, scale, lo, hi)
                     for c in range(3)])


def constant_video(n: int, h: int, w: int, color=(0.5, 0.5, 0.5)) -> np.ndarray:
    out = np.empty((n, 3, h, w))
    out[:] = np.asarray(color)[None, :, None, None]
    return out


def panning_video(rng: Rng, n: int, h: int, w: int, speed: int = 2,
                  scale: int = 4, lo: float = 0.2, hi: float = 0.8) -> np.ndarray:
    """Camera pan over a wide texture: all content translates by -speed px/frame."""
    wide = texture_rgb(rng, h, w + n * speed, scale, lo, hi)
    return np.stack([wide[:, :, i * speed:i * speed + w] for i in range(n)])


def moving_square_video(rng: Rng, n: int, h: int, w: int, speed: int = 1,
                        size: int | None = None, contrast: float = 0.95) -> np.ndarray:
    """Static low-contrast background with a bright square moving right."""
    size = size if size is not None else max(2, h // 4)
    bg = texture_rgb(rng, h, w, scale=8) * 0.3 + 0.2
    frames = np.empty((n, 3, h, w))
    y0 = (h - size) // 2
    travel = max(1, w - size)
    for i in range(n):
        frames[i] = bg
        x0 = (i * speed) % travel
        frames[i, :, y0:y0 + size, x0:x0 + size] = contrast
    return frames


def crossfade(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """Linear blend of the last frame of a into the first frame of b."""
    alphas = np.linspace(0.0, 1.0, n + 2)[1:-1]
    mids = np.stack([(1 - al) * a[-1] + al * b[0] for al in alphas])
    return np.concatenate([a, mids, b])


def checkerboard(h: int, w: int, cell: int = 2) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    board = ((ys // cell + xs // cell) % 2).astype(np.float64)
    return np.stack([board] * 3)


def gaussian_blur_frame(frame: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    radius = max(1, int(3 * sigma))
    xs = np.arange(-radius, radius + 1)
    kernel = np.exp(-xs ** 2 / (2 * sigma ** 2))
    kernel /= kernel.sum()

    def conv_axis(img, axis):
        padded = np.pad(img, [(0, 0) if ax != axis else (radius, radius)
                              for ax in range(img.ndim)], mode="reflect")
        return np.apply_along_axis(
            lambda row: np.convolve(row, kernel, mode="valid"), axis, padded)

    out = conv_axis(frame, frame.ndim - 2)
    return conv_axis(out, frame.ndim - 1)


# curation fixture corpus ---------------------------------------------------------

def build_curation_corpus(out_dir, seed: int = 0, fps: float = 8.0) -> list[str]:
    """Write the fixture corpus: hard cuts, crossfade, blur, duplicates, statics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed, ("corpus",))
    h = w = 24
    written = []

    # alpha: pan | moving square | static texture, separated by hard cuts;
    # contrasting luminance bands keep the seams well above pan motion
    pan = panning_video(rng.stream("alpha-pan"), 48, h, w, speed=1,
                        scale=3, lo=0.55, hi=0.95)
    square = moving_square_video(rng.stream("alpha-sq"), 40, h, w, speed=1)
    static = np.repeat(
        texture_rgb(rng.stream("alpha-static"), h, w, lo=0.6, hi=0.95)[None],
        32, axis=0)
    alpha = np.concatenate([pan, square, static])
    write_cvpx(out / "alpha.cvpx", alpha)
    write_sidecar(out / "alpha.cvpx", "alpha", fps)
    written.append("alpha")

    # beta: slow pans joined by a 20-frame crossfade (no cut should fire)
    beta_a = panning_video(rng.stream("beta-a"), 28, h, w, speed=1,
                           scale=3, lo=0.1, hi=0.5)
    beta_b = panning_video(rng.stream("beta-b"), 28, h, w, speed=1,
                           scale=3, lo=0.5, hi=0.9)
    write_cvpx(out / "beta.cvpx", crossfade(beta_a, beta_b, 20))
    write_sidecar(out / "beta.cvpx", "beta", fps)
    written.append("beta")

    # gamma: heavily blurred moving square (blur filter target)
    sharp = moving_square_video(rng.stream("gamma"), 32, h, w, speed=1)
    blurred = np.stack([gaussian_blur_frame(f, 3.0) for f in sharp])
    write_cvpx(out / "gamma.cvpx", blurred)
    write_sidecar(out / "gamma.cvpx", "gamma", fps)
    written.append("gamma")

    # delta: the same pan repeated -> pairwise dedup target; the loop seam
    # lands on content far across a high-contrast texture, so it registers
    loop = panning_video(rng.stream("delta"), 32, h, w, speed=1,
                         scale=6, lo=0.05, hi=0.95)
    write_cvpx(out / "delta.cvpx", np.concatenate([loop, loop]))
    write_sidecar(out / "delta.cvpx", "delta", fps)
    written.append("delta")
    return written


# video training corpus -------------------------------------------------------------

@dataclass
class ToyVideoItem:
    item_id: str
    frames: np.ndarray  # [T+1, 3, H, W]
    caption: str


_CAPTION_COLORS = ["red", "green", "blue", "yellow"]


def toy_video_dataset(seed: int, n_items: int, n_frames: int, h: int, w: int,
                      image_fraction: float = 0.0) -> list[ToyVideoItem]:
    """Moving squares with varied colors/speeds; optionally single-frame items."""
    rng = Rng(seed, ("toy-videos",))
    items = []
    for i in range(n_items):
        r = rng.stream("item", i)
        is_image = float(r.uniform()) < image_fraction
        frames_n = 1 if is_image else n_frames
        speed = int(r.integers(1, 3))
        color_idx = int(r.integers(0, len(_CAPTION_COLORS)))
        video = moving_square_video(r.stream("v"), frames_n, h, w, speed=speed)
        tint = np.zeros(3)
        tint[color_idx % 3] = 0.2
        video = np.clip(video + tint[None, :, None, None] * 0.5, 0.0, 1.0)
        kind = "image of" if is_image else "video of"
        caption = f"{kind} a {_CAPTION_COLORS[color_idx]} square moving speed {speed}"
        items.append(ToyVideoItem(item_id=f"toy-{i:04d}", frames=video, caption=caption))
    return items
