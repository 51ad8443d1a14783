"""Content-aware clip filtering: scene cuts, blur and motion scoring,
embedding dedup, bucketization, and dual top-percentile selection.

Neural scorers are replaced by deterministic stand-ins (block-matching
flow, seeded random-projection embeddings, a contrast+sharpness aesthetic
stub behind a pluggable interface), so every stage is fixture-testable
while the pipeline topology stays intact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .rng import Rng
from .vae3d import read_cvpx, read_sidecar

MANIFEST_SCHEMA = "vidflow-manifest v1"

ASPECT_BUCKETS = (
    ("16:9", 16 / 9),
    ("3:2", 3 / 2),
    ("4:3", 4 / 3),
    ("1:1", 1.0),
    ("3:4", 3 / 4),
    ("2:3", 2 / 3),
    ("9:16", 9 / 16),
)


@dataclass
class Bucket:
    aspect_id: str
    duration_s: int
    max_batch: int


@dataclass
class FlowField:
    """Per-pixel displacement: [0]=dx, [1]=dy."""

    displacement: np.ndarray

    def __post_init__(self):
        if self.displacement.ndim != 3 or self.displacement.shape[0] != 2:
            raise ShapeError(f"FlowField expects [2, H, W], got {self.displacement.shape}")
        if not np.isfinite(self.displacement).all():
            raise ContractError("FlowField requires finite values")


@dataclass
class ClipRecord:
    source_id: str
    clip_id: str
    start: int
    end: int
    fps: float
    width: int
    height: int
    blur: float = 0.0
    motion_fg: float = 0.0
    motion_bg: float = 0.0
    motion_pretrain: float = 0.0
    motion_post: float = 0.0
    aesthetic: float = 0.0
    feature: np.ndarray | None = None
    bucket_aspect: str = ""
    bucket_duration: int = 0
    truncate_s: float = 0.0
    kept: bool = True
    drop_reason: str = ""
    post_selected: bool = False

    @property
    def duration_s(self) -> float:
        return (self.end - self.start) / self.fps


def _gray(frame: np.ndarray) -> np.ndarray:
    if frame.ndim == 2:
        return frame
    return 0.299 * frame[0] + 0.587 * frame[1] + 0.114 * frame[2]


# scene segmentation -----------------------------------------------------------

def detect_scene_cuts(frames: np.ndarray, threshold: float = 0.3) -> list[int]:
    """Indices of hard scene changes.

    A cut at frame i requires the per-pixel color distance between frames
    i-1 and i to exceed both the threshold and 3x the median difference in
    its 5-frame neighborhood; gradual transitions spread their change over
    many frames and never reach the 3x margin.
    """
    if frames.shape[0] < 2:
        raise ContractError("need at least 2 frames")
    deltas = np.sqrt(((frames[1:] - frames[:-1]) ** 2).sum(axis=1)).mean(axis=(1, 2))
    cuts = []
    for m in range(len(deltas)):
        window = deltas[max(0, m - 2): m + 3]
        if deltas[m] > threshold and deltas[m] > 3.0 * np.median(window):
            cuts.append(m + 1)
    return cuts


def split_clips(n_frames: int, cuts: list[int], fps: float,
                min_s: float = 3.0, max_s: float = 6.0) -> list[tuple[int, int]]:
    """Greedy partition of each shot into max_s spans; remainder kept iff >= min_s."""
    bounds = [0] + sorted(cuts) + [n_frames]
    span = int(round(max_s * fps))
    min_len = int(np.ceil(min_s * fps))
    clips = []
    for a, b in zip(bounds, bounds[1:]):
        pos = a
        while b - pos >= span:
            clips.append((pos, pos + span))
            pos += span
        if b - pos >= min_len:
            clips.append((pos, b))
    return clips


# frame-quality scores ---------------------------------------------------------

def laplacian_blur_score(frame: np.ndarray) -> float:
    """Variance of the 3x3 discrete Laplacian over interior pixels."""
    g = _gray(np.asarray(frame, dtype=np.float64))
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ContractError(f"frame {g.shape} smaller than the 3x3 kernel")
    lap = (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:]
           - 4.0 * g[1:-1, 1:-1])
    return float(lap.var())


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray,
                  block: int = 8, radius: int = 4) -> FlowField:
    """Block-matching flow: per-block integer displacement minimizing SAD.

    Candidates are scanned nearest-first, so ties resolve to the smallest
    displacement and identical frames give an exactly zero field.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[-2], a.shape[-1]
    if h % block or w % block:
        raise ShapeError(f"dims {h}x{w} not divisible by block {block}")
    candidates = sorted(
        ((dy, dx) for dy in range(-radius, radius + 1)
         for dx in range(-radius, radius + 1)),
        key=lambda d: (abs(d[0]) + abs(d[1]), d[0], d[1]))
    disp = np.zeros((2, h, w))
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            patch = a[..., y0:y0 + block, x0:x0 + block]
            best, best_d = np.inf, (0, 0)
            for dy, dx in candidates:
                yy, xx = y0 + dy, x0 + dx
                if yy < 0 or xx < 0 or yy + block > h or xx + block > w:
                    continue
                sad = float(np.abs(patch - b[..., yy:yy + block, xx:xx + block]).sum())
                if sad < best - 1e-12:
                    best, best_d = sad, (dy, dx)
            disp[0, y0:y0 + block, x0:x0 + block] = best_d[1]
            disp[1, y0:y0 + block, x0:x0 + block] = best_d[0]
    return FlowField(disp)


@dataclass
class BackgroundFit:
    """Affine global-motion fit: [dx;dy] = params @ [x, y, 1]."""

    params: np.ndarray  # [2, 3]
    inlier_mask: np.ndarray  # over the coarse sample grid
    foreground_mask: np.ndarray  # per pixel, from refit residuals
    singular: bool
    sample_points: np.ndarray  # [n, 2] (x, y)

    def predict(self, h: int, w: int) -> np.ndarray:
        ys, xs = np.mgrid[0:h, 0:w]
        design = np.stack([xs, ys, np.ones_like(xs)], axis=0).astype(np.float64)
        return np.einsum("cp,phw->chw", self.params, design)


def fit_background_transform(flow: FlowField, sample_step: int = 4) -> BackgroundFit:
    """Robust least-squares affine motion: fit, drop worst 20%, refit.

    The returned foreground mask marks pixels whose refit residual exceeds
    max(1e-6, 3 * median residual); a degenerate system is flagged singular
    with a zero-motion fallback.
    """
    disp = flow.displacement
    h, w = disp.shape[1], disp.shape[2]
    ys, xs = np.mgrid[0:h:sample_step, 0:w:sample_step]
    xs, ys = xs.ravel(), ys.ravel()
    if xs.size < 4:
        return BackgroundFit(np.zeros((2, 3)), np.zeros(0, dtype=bool),
                             np.zeros((h, w), dtype=bool), True,
                             np.stack([xs, ys], axis=1))
    design = np.stack([xs, ys, np.ones_like(xs)], axis=1).astype(np.float64)
    target = np.stack([disp[0, ys, xs], disp[1, ys, xs]], axis=1)

    def solve(rows: np.ndarray):
        sol, _, rank, _ = np.linalg.lstsq(design[rows], target[rows], rcond=None)
        return sol.T, rank

    all_rows = np.arange(xs.size)
    params, rank = solve(all_rows)
    if rank < 3:
        return BackgroundFit(np.zeros((2, 3)), np.zeros(xs.size, dtype=bool),
                             np.zeros((h, w), dtype=bool), True,
                             np.stack([xs, ys], axis=1))
    resid = np.linalg.norm(design @ params.T - target, axis=1)
    cutoff = np.quantile(resid, 0.8)
    inliers = resid <= cutoff
    params2, rank2 = solve(np.where(inliers)[0])
    if rank2 == 3:
        params = params2
    pred = np.einsum("cp,phw->chw", params,
                     np.stack(np.broadcast_arrays(
                         np.arange(w)[None, :], np.arange(h)[:, None],
                         np.ones((h, w))), axis=0).astype(np.float64))
    pixel_resid = np.linalg.norm(disp - pred, axis=0)
    fg_cut = max(1e-6, 3.0 * float(np.median(pixel_resid)))
    return BackgroundFit(params, inliers, pixel_resid > fg_cut, False,
                         np.stack([xs, ys], axis=1))


@dataclass
class MotionScores:
    fg: float
    bg: float
    pretrain: float
    post: float


def motion_scores(flow: FlowField, fit: BackgroundFit, w_fg: float = 0.7) -> MotionScores:
    """Foreground/background dynamics and their pretrain/post-training blends."""
    disp = flow.displacement
    h, w = disp.shape[1], disp.shape[2]
    pred = fit.predict(h, w)
    bg = float(np.linalg.norm(pred, axis=0).mean())
    resid_mag = np.linalg.norm(disp - pred, axis=0)
    fg = float(resid_mag[fit.foreground_mask].mean()) if fit.foreground_mask.any() else 0.0
    return MotionScores(fg=fg, bg=bg, pretrain=(fg + bg) / 2.0,
                        post=w_fg * fg + (1.0 - w_fg) * bg)


# embeddings and deduplication --------------------------------------------------

def _bin_mean(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    yb = (np.arange(out_h + 1) * h) // out_h
    xb = (np.arange(out_w + 1) * w) // out_w
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            out[i, j] = img[yb[i]:yb[i + 1], xb[j]:xb[j + 1]].mean()
    return out


class ClipEmbedder:
    """Seeded random projection of 8x8 luminance grids, mean-pooled over frames."""

    def __init__(self, dim: int = 32, seed: int = 0, grid: int = 8):
        self.dim = dim
        self.grid = grid
        self.proj = Rng(seed, ("clip-embed",)).normal((grid * grid, dim)) / grid

    def embed(self, frames: np.ndarray) -> np.ndarray:
        feats = np.stack([
            _bin_mean(_gray(f), self.grid, self.grid).ravel() for f in frames])
        pooled = feats.mean(axis=0)
        pooled = pooled - pooled.mean()  # drop the shared luminance DC term
        emb = pooled @ self.proj
        norm = np.linalg.norm(emb)
        return emb / norm if norm > 0 else emb


def _rank_normalized(values: np.ndarray) -> np.ndarray:
    """Average ranks scaled to [0, 1]; equal values share a rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    ranks[order] = np.arange(len(values), dtype=np.float64)
    for v in np.unique(values):
        mask = values == v
        ranks[mask] = ranks[mask].mean()
    return ranks / max(1, len(values) - 1)


@dataclass
class DedupResult:
    kept: list
    labels: np.ndarray
    taus: np.ndarray  # per-cluster effective threshold


def kmeans_dedup(features: np.ndarray, k: int, base_threshold: float,
                 rng: Rng, gamma: float = 0.1, max_iters: int = 100) -> DedupResult:
    """Lloyd's k-means, then per-cluster greedy dedup with density-adaptive
    cosine ceilings: denser clusters get strictly lower thresholds."""
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if not (1 <= k <= n):
        raise ConfigError(f"k={k} out of range for {n} vectors")
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.where(norms > 0, norms, 1.0)

    centroids = feats[np.sort(rng.choice(n, size=k, replace=False))].copy()
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iters):
        sims = feats @ centroids.T
        labels = sims.argmax(axis=1)
        shift = 0.0
        for c in range(k):
            members = feats[labels == c]
            if len(members) == 0:
                continue
            new = members.mean(axis=0)
            norm = np.linalg.norm(new)
            if norm > 0:
                new = new / norm
            shift = max(shift, float(np.abs(new - centroids[c]).max()))
            centroids[c] = new
        if shift < 1e-6:
            break

    density = np.array([(labels == c).sum() for c in range(k)], dtype=np.float64)
    taus = base_threshold - gamma * _rank_normalized(density)

    kept: list[int] = []
    kept_by_cluster: dict[int, list[int]] = {c: [] for c in range(k)}
    for i in range(n):
        c = int(labels[i])
        prior = kept_by_cluster[c]
        if all(float(feats[i] @ feats[j]) < taus[c] for j in prior):
            kept.append(i)
            prior.append(i)
    return DedupResult(kept=kept, labels=labels, taus=taus)


def pairwise_dedup(features: np.ndarray, threshold: float) -> list[int]:
    """Scan in order; keep a clip iff its max cosine to all kept is below threshold."""
    feats = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.where(norms > 0, norms, 1.0)
    kept: list[int] = []
    for i in range(feats.shape[0]):
        if all(float(feats[i] @ feats[j]) < threshold for j in kept):
            kept.append(i)
    return kept


# bucketization and selection ----------------------------------------------------

def assign_bucket(width: int, height: int, duration_s: float,
                  batch_cap: int = 8, duration_range: tuple = (0, 8)) -> Bucket:
    """Nearest aspect bucket by |log ratio| distance; whole-second durations."""
    if width <= 0 or height <= 0 or duration_s < 0:
        raise ContractError("positive dims and nonnegative duration required")
    log_ratio = np.log(width / height)
    dists = [abs(log_ratio - np.log(r)) for _, r in ASPECT_BUCKETS]
    aspect_id = ASPECT_BUCKETS[int(np.argmin(dists))][0]
    dur = int(np.clip(np.floor(duration_s), duration_range[0], duration_range[1]))
    return Bucket(aspect_id=aspect_id, duration_s=dur,
                  max_batch=max(1, batch_cap // max(1, dur)))


def select_top_percentile(records: list[ClipRecord], p: float = 0.10) -> list[ClipRecord]:
    """Intersection of the top-p fractions by aesthetic and by post motion score."""
    if not (0.0 < p <= 1.0):
        raise ConfigError(f"p must lie in (0,1], got {p}")
    n = len(records)
    count = int(np.floor(p * n)) if p < 1.0 else n
    by_aesthetic = sorted(records, key=lambda r: (-r.aesthetic, r.clip_id))[:count]
    by_motion = sorted(records, key=lambda r: (-r.motion_post, r.clip_id))[:count]
    chosen = {id(r) for r in by_aesthetic} & {id(r) for r in by_motion}
    return [r for r in records if id(r) in chosen]


# aesthetic interface -------------------------------------------------------------

class StubAestheticScorer:
    """Deterministic contrast+sharpness composite standing in for a model."""

    def score(self, frames: np.ndarray) -> float:
        sampled = frames[:: max(1, len(frames) // 4)]
        vals = []
        for f in sampled:
            g = _gray(f)
            vals.append(float(g.std()) + float(np.tanh(10.0 * laplacian_blur_score(f))))
        return float(np.mean(vals))


# pipeline -------------------------------------------------------------------------

@dataclass
class CurationConfig:
    cut_threshold: float = 0.3
    min_clip_s: float = 3.0
    max_clip_s: float = 6.0
    blur_min: float = 5e-4
    motion_min: float = 0.05
    pairwise_threshold: float = 0.98
    kmeans_k: int = 4
    kmeans_base_threshold: float = 0.98
    kmeans_gamma: float = 0.1
    w_fg: float = 0.7
    top_p: float = 0.10
    flow_block: int = 8
    flow_radius: int = 4
    embed_dim: int = 32
    seed: int = 0
    batch_cap: int = 8


def score_clip(frames: np.ndarray, rec: ClipRecord, cfg: CurationConfig,
               embedder: ClipEmbedder, aesthetic) -> ClipRecord:
    """Fill blur/motion/aesthetic/feature fields for one clip."""
    mid = len(frames) // 2
    rec.blur = laplacian_blur_score(frames[mid])
    flows = []
    if len(frames) > 1:
        # adjacent-frame pairs so displacements stay inside the search radius
        for i in np.unique(np.linspace(0, len(frames) - 2, 4).astype(int)):
            flows.append(estimate_flow(frames[i], frames[i + 1],
                                       cfg.flow_block, cfg.flow_radius))
    if flows:
        scored = [motion_scores(fl, fit_background_transform(fl), cfg.w_fg)
                  for fl in flows]
        rec.motion_fg = float(np.mean([s.fg for s in scored]))
        rec.motion_bg = float(np.mean([s.bg for s in scored]))
        rec.motion_pretrain = float(np.mean([s.pretrain for s in scored]))
        rec.motion_post = float(np.mean([s.post for s in scored]))
    rec.aesthetic = aesthetic.score(frames)
    rec.feature = embedder.embed(frames)
    bucket = assign_bucket(rec.width, rec.height, rec.duration_s, cfg.batch_cap)
    rec.bucket_aspect = bucket.aspect_id
    rec.bucket_duration = bucket.duration_s
    rec.truncate_s = float(min(rec.duration_s, bucket.duration_s))
    return rec


def run_curation(input_dir, cfg: CurationConfig, aesthetic=None) -> list[ClipRecord]:
    """Curate a directory of CVPX videos with sidecar (id, fps) metadata."""
    aesthetic = aesthetic if aesthetic is not None else StubAestheticScorer()
    embedder = ClipEmbedder(cfg.embed_dim, cfg.seed)
    records: list[ClipRecord] = []
    clips_by_source: dict[str, list[int]] = {}
    for path in sorted(Path(input_dir).glob("*.cvpx")):
        frames = read_cvpx(path)
        meta = read_sidecar(path)
        source, fps = meta["id"], float(meta["fps"])
        cuts = detect_scene_cuts(frames, cfg.cut_threshold)
        spans = split_clips(len(frames), cuts, fps, cfg.min_clip_s, cfg.max_clip_s)
        for start, end in spans:
            rec = ClipRecord(
                source_id=source, clip_id=f"{source}/{start:06d}-{end:06d}",
                start=start, end=end, fps=fps,
                width=frames.shape[3], height=frames.shape[2])
            score_clip(frames[start:end], rec, cfg, embedder, aesthetic)
            clips_by_source.setdefault(source, []).append(len(records))
            records.append(rec)

    # pairwise dedup within each source, in span order
    for source, idxs in sorted(clips_by_source.items()):
        feats = np.stack([records[i].feature for i in idxs])
        kept_local = set(pairwise_dedup(feats, cfg.pairwise_threshold))
        for pos, i in enumerate(idxs):
            if pos not in kept_local:
                records[i].kept = False
                records[i].drop_reason = "dup-pairwise"

    # k-means dedup across sources on the survivors
    alive = [i for i, r in enumerate(records) if r.kept]
    if len(alive) >= max(2, cfg.kmeans_k):
        feats = np.stack([records[i].feature for i in alive])
        result = kmeans_dedup(feats, cfg.kmeans_k, cfg.kmeans_base_threshold,
                              Rng(cfg.seed, ("kmeans",)), cfg.kmeans_gamma)
        kept_set = set(result.kept)
        for pos, i in enumerate(alive):
            if pos not in kept_set:
                records[i].kept = False
                records[i].drop_reason = "dup-kmeans"

    # quality thresholds
    for rec in records:
        if not rec.kept:
            continue
        if rec.blur < cfg.blur_min:
            rec.kept = False
            rec.drop_reason = "blur"
        elif rec.motion_pretrain < cfg.motion_min:
            rec.kept = False
            rec.drop_reason = "low-motion"

    kept_records = [r for r in records if r.kept]
    if kept_records:
        for r in select_top_percentile(kept_records, cfg.top_p):
            r.post_selected = True
    return records


MANIFEST_FIELDS = [
    "clip_id", "source_id", "start", "end", "fps", "width", "height",
    "blur", "motion_fg", "motion_bg", "motion_pretrain", "motion_post",
    "aesthetic", "bucket_aspect", "bucket_duration", "truncate_s",
    "kept", "drop_reason", "post_selected",
]


def write_manifest(records: list[ClipRecord], path):
    """Line-delimited curation report with a schema-version header."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {MANIFEST_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for r in records:
            row = {name: getattr(r, name) for name in MANIFEST_FIELDS}
            for key in ("blur", "motion_fg", "motion_bg", "motion_pretrain",
                        "motion_post", "aesthetic", "truncate_s", "fps"):
                row[key] = f"{row[key]:.6g}"
            row["kept"] = int(r.kept)
            row["post_selected"] = int(r.post_selected)
            writer.writerow(row)


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != f"# {MANIFEST_SCHEMA}":
            raise ContractError(f"unexpected manifest schema line: {header!r}")
        return list(csv.DictReader(fh))
