"""Miniature 3D diffusion transformer over flattened latent patch tokens.

Pipeline: 3D patchify -> linear projection -> additive position embedding
(or rotary rotation inside attention) -> N blocks of QK-RMSNorm attention
and gelu FFN with residuals, modulated by adaptive scale/shift derived from
the timestep embedding plus a pooled text embedding -> projection back to
patches.  Output shape always equals the input latent shape, so images
(one latent frame) and videos share a single code path.

The model accepts t anywhere in the closed interval [0,1]; sampling starts
at exactly t=0.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .errors import ConfigError, ContractError, ShapeError
from .nn import Linear, Mlp
from .rng import Rng
from .tensor import (
    GradTape,
    Tensor,
    as_tensor,
    concat,
    gelu,
    matmul,
    reshape,
    rms_norm,
    softmax,
    stack,
    transpose,
)

ROPE_BASE = 10000.0
TIME_FREQS = 16


@dataclass(frozen=True)
class ModelConfig:
    """Scaled-down transformer configuration; ratios follow the full model."""

    patch: tuple = (1, 2, 2)
    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 256
    pe_mode: str = "APE"
    latent_channels: int = 16
    cond_dim: int = 32
    learned_ape: bool = False
    max_grid: tuple = (8, 16, 16)

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(self.patch))
        object.__setattr__(self, "max_grid", tuple(self.max_grid))
        if self.pe_mode not in ("APE", "RoPE"):
            raise ConfigError(f"pe_mode must be APE or RoPE, got {self.pe_mode!r}")
        if len(self.patch) != 3 or any(p < 1 for p in self.patch):
            raise ConfigError(f"patch must be three positive ints, got {self.patch}")
        if self.hidden % 2 != 0:
            raise ConfigError("hidden size (heads*head_dim) must be even")
        if min(self.layers, self.heads, self.head_dim, self.ffn_dim,
               self.latent_channels) < 1:
            raise ConfigError("layers/heads/head_dim/ffn_dim/latent_channels must be >= 1")

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    @property
    def token_dim(self) -> int:
        return self.latent_channels * self.patch[0] * self.patch[1] * self.patch[2]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenGrid:
    """Flattened tokens plus the (t, h, w) grid extents for unflattening."""

    tokens: Tensor
    grid: tuple

    def __post_init__(self):
        if int(np.prod(self.grid)) != self.tokens.shape[0]:
            raise ShapeError(
                f"token count {self.tokens.shape[0]} inconsistent with grid {self.grid}")


def patchify(latent, patch: tuple) -> TokenGrid:
    """Fold [T',C,H',W'] into [(T'/pt)(H'/ph)(W'/pw), C*pt*ph*pw] tokens.

    Token order is time-major then row-major spatial; each token is
    channel-major over its patch offsets.
    """
    lt = latent.latent if hasattr(latent, "latent") else as_tensor(latent)
    pt, ph, pw = patch
    t, c, h, w = lt.shape
    for name, extent, p in (("T'", t, pt), ("H'", h, ph), ("W'", w, pw)):
        if extent % p != 0:
            raise ShapeError(f"patchify: axis {name}={extent} not divisible by {p}")
    gt, gh, gw = t // pt, h // ph, w // pw
    x = reshape(lt, (gt, pt, c, gh, ph, gw, pw))
    x = transpose(x, (0, 3, 5, 2, 1, 4, 6))
    return TokenGrid(reshape(x, (gt * gh * gw, c * pt * ph * pw)), (gt, gh, gw))


def unpatchify(tg: TokenGrid, patch: tuple, channels: int) -> Tensor:
    """Exact inverse of patchify's layout."""
    pt, ph, pw = patch
    gt, gh, gw = tg.grid
    expected = channels * pt * ph * pw
    if tg.tokens.shape[1] != expected:
        raise ShapeError(f"unpatchify: token dim {tg.tokens.shape[1]} != {expected}")
    x = reshape(tg.tokens, (gt, gh, gw, channels, pt, ph, pw))
    x = transpose(x, (0, 4, 3, 1, 5, 2, 6))
    return reshape(x, (gt * pt, channels, gh * ph, gw * pw))


def sincos_table(positions: np.ndarray, dim: int) -> np.ndarray:
    """Sin/cos embedding table of any dim >= 1; geometric frequencies."""
    positions = np.asarray(positions, dtype=np.float64)
    n_sin = (dim + 1) // 2
    n_cos = dim // 2
    freqs = ROPE_BASE ** (-np.arange(n_sin) / max(1, n_sin))
    ang = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang[:, :n_cos])], axis=1)


def sin_table(positions: np.ndarray, dim: int) -> np.ndarray:
    """Sin-only table; exactly zero at position 0."""
    positions = np.asarray(positions, dtype=np.float64)
    freqs = ROPE_BASE ** (-np.arange(dim) / max(1, dim))
    return np.sin(positions[:, None] * freqs[None, :])


def grid_positions(grid: tuple, offsets: tuple = (0, 0, 0)) -> np.ndarray:
    """Per-token (t, h, w) coordinates in patchify's flattening order."""
    gt, gh, gw = grid
    tt, hh, ww = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw),
                             indexing="ij")
    pos = np.stack([tt.ravel(), hh.ravel(), ww.ravel()], axis=1).astype(np.float64)
    return pos + np.asarray(offsets, dtype=np.float64)


def spatial_ape_2d(gh: int, gw: int, hidden: int) -> np.ndarray:
    """Image-style 2D table: concat of per-axis sin/cos halves, [gh*gw, hidden]."""
    half = hidden // 2
    eh = sincos_table(np.arange(gh), half)
    ew = sincos_table(np.arange(gw), hidden - half)
    out = np.concatenate([
        np.repeat(eh, gw, axis=0),
        np.tile(ew, (gh, 1)),
    ], axis=1)
    return out


def build_ape(grid: tuple, hidden: int, offsets: tuple = (0, 0, 0)) -> Tensor:
    """Additive embedding: 2D spatial table plus a per-frame temporal term.

    The temporal term is sin-only so frame 0 contributes exactly zero and a
    one-frame grid reproduces the pure-image table.
    """
    if hidden % 2 != 0:
        raise ConfigError("build_ape: hidden must be even")
    gt, gh, gw = grid
    ot, oh, ow = offsets
    half = hidden // 2
    eh = sincos_table(np.arange(gh) + oh, half)
    ew = sincos_table(np.arange(gw) + ow, hidden - half)
    spatial = np.concatenate([np.repeat(eh, gw, axis=0), np.tile(ew, (gh, 1))], axis=1)
    temporal = sin_table(np.arange(gt) + ot, hidden)
    table = np.repeat(temporal, gh * gw, axis=0) + np.tile(spatial, (gt, 1))
    return Tensor(table)


def rope_blocks(head_dim: int) -> tuple[int, int, int]:
    """Split head_dim into three even axis blocks (t, h, w)."""
    if head_dim % 2 != 0:
        raise ConfigError(f"RoPE head_dim must be even, got {head_dim}")
    pairs = head_dim // 2
    q, r = divmod(pairs, 3)
    # leftovers favor the spatial axes
    return 2 * q, 2 * (q + (1 if r >= 1 else 0)), 2 * (q + (1 if r >= 2 else 0))


def _rope_tables(positions: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    cos_parts, sin_parts = [], []
    for axis, block in enumerate(rope_blocks(head_dim)):
        m = block // 2
        if m == 0:
            continue
        freqs = ROPE_BASE ** (-np.arange(m) / m)
        ang = positions[:, axis][:, None] * freqs[None, :]
        cos_parts.append(np.cos(ang))
        sin_parts.append(np.sin(ang))
    return np.concatenate(cos_parts, axis=1), np.concatenate(sin_parts, axis=1)


def apply_rope(q: Tensor, k: Tensor, positions: np.ndarray) -> tuple[Tensor, Tensor]:
    """Rotate adjacent feature pairs of q and k by per-axis angles.

    positions: [L, 3] integer (t, h, w) coordinates.  Rotations are
    isometries, so norms are preserved and attention scores depend only on
    coordinate differences.
    """
    head_dim = q.shape[-1]
    cos, sin = _rope_tables(np.asarray(positions, dtype=np.float64), head_dim)
    tcos, tsin = Tensor(cos), Tensor(sin)

    def rotate(x: Tensor) -> Tensor:
        heads, length, d = x.shape
        xp = reshape(x, (heads, length, d // 2, 2))
        x0 = xp[..., 0]
        x1 = xp[..., 1]
        y0 = x0 * tcos - x1 * tsin
        y1 = x0 * tsin + x1 * tcos
        return reshape(stack([y0, y1], axis=-1), (heads, length, d))

    return rotate(q), rotate(k)


def attention(q: Tensor, k: Tensor, v: Tensor, qk_norm_gain=None,
              eps: float = 0.0) -> Tensor:
    """Full (non-causal) attention over [heads, L, head_dim] with QK-RMSNorm.

    qk_norm_gain: (gain_q, gain_k) pair, a single shared gain, or None to
    skip normalization.  eps defaults to 0 so normalization is exactly
    scale-invariant; all-zero feature rows are mapped to zero.
    """
    if (q.shape[0] != k.shape[0] or k.shape[0] != v.shape[0]
            or q.shape[2] != k.shape[2] or k.shape[1] != v.shape[1]):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if qk_norm_gain is not None:
        gq, gk = (qk_norm_gain if isinstance(qk_norm_gain, (tuple, list))
                  else (qk_norm_gain, qk_norm_gain))
        q = rms_norm(q, gq, eps=eps)
        k = rms_norm(k, gk, eps=eps)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, (0, 2, 1))) * scale
    return matmul(softmax(scores, axis=-1), v)


class TextEncoder:
    """Deterministic stub: tokens hashed into a frozen random table, mean-pooled."""

    def __init__(self, cond_dim: int = 32, vocab: int = 4096, seed: int = 0):
        self.cond_dim = cond_dim
        self.vocab = vocab
        self.table = Rng(seed, ("text-stub",)).normal((vocab, cond_dim))

    def encode(self, prompt: str) -> np.ndarray:
        tokens = prompt.lower().split()
        if not tokens:
            return np.zeros(self.cond_dim)
        rows = [int.from_bytes(hashlib.sha256(t.encode()).digest()[:8], "little")
                % self.vocab for t in tokens]
        return self.table[rows].mean(axis=0)


class _Block:
    def __init__(self, cfg: ModelConfig, rng: Rng):
        h = cfg.hidden
        self.qkv = Linear(h, 3 * h, rng.stream("qkv"))
        self.out = Linear(h, h, rng.stream("out"))
        self.ffn1 = Linear(h, cfg.ffn_dim, rng.stream("ffn1"))
        self.ffn2 = Linear(cfg.ffn_dim, h, rng.stream("ffn2"))
        self.mod = Linear(h, 4 * h, rng.stream("mod"), zero_init=True)
        self.gain_q = Tensor(np.ones(cfg.head_dim), requires_grad=True)
        self.gain_k = Tensor(np.ones(cfg.head_dim), requires_grad=True)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name, comp in (("qkv", self.qkv), ("out", self.out),
                           ("ffn1", self.ffn1), ("ffn2", self.ffn2),
                           ("mod", self.mod)):
            out.update(comp.params(f"{prefix}.{name}"))
        out[f"{prefix}.gain_q"] = self.gain_q
        out[f"{prefix}.gain_k"] = self.gain_k
        return out


class VideoDit:
    """Latent-video velocity model; deterministic given (weights, inputs)."""

    def __init__(self, config: ModelConfig, rng: Rng | None = None, seed: int = 0):
        rng = rng if rng is not None else Rng(seed, ("dit-init",))
        self.config = config
        h = config.hidden
        self.proj_in = Linear(config.token_dim, h, rng.stream("proj_in"))
        self.t_mlp = Mlp([2 * TIME_FREQS, h, h], rng.stream("t_mlp"))
        self.cond_proj = Linear(config.cond_dim, h, rng.stream("cond_proj"))
        self.blocks = [_Block(config, rng.stream("block", i))
                       for i in range(config.layers)]
        self.gain_out = Tensor(np.ones(h), requires_grad=True)
        self.proj_out = Linear(h, config.token_dim, rng.stream("proj_out"),
                               zero_init=True)
        self._one = Tensor(1.0)
        self._ape_cache: dict[tuple, Tensor] = {}
        if config.learned_ape and config.pe_mode == "APE":
            mt, mh, mw = config.max_grid
            init = rng.stream("ape")
            self.ape_t = Tensor(init.stream("t").normal((mt, h), scale=0.02),
                                requires_grad=True)
            self.ape_h = Tensor(init.stream("h").normal((mh, h), scale=0.02),
                                requires_grad=True)
            self.ape_w = Tensor(init.stream("w").normal((mw, h), scale=0.02),
                                requires_grad=True)

    # --- embeddings ---------------------------------------------------------
    def _ape(self, grid: tuple) -> Tensor:
        if self.config.learned_ape:
            gt, gh, gw = grid
            mt, mh, mw = self.config.max_grid
            if gt > mt or gh > mh or gw > mw:
                raise ShapeError(f"grid {grid} exceeds learned APE table {self.config.max_grid}")
            et = self.ape_t[:gt]
            eh = self.ape_h[:gh]
            ew = self.ape_w[:gw]
            pos = grid_positions(grid).astype(int)
            return et[pos[:, 0]] + eh[pos[:, 1]] + ew[pos[:, 2]]
        if grid not in self._ape_cache:
            self._ape_cache[grid] = build_ape(grid, self.config.hidden)
        return self._ape_cache[grid]

    def _time_embedding(self, t: float, cond) -> Tensor:
        freqs = 2.0 ** np.arange(TIME_FREQS)
        ang = 2.0 * np.pi * t * freqs
        feats = Tensor(np.concatenate([np.sin(ang), np.cos(ang)])[None, :])
        c = self.t_mlp(feats)
        if cond is not None:
            cond = as_tensor(cond)
            if cond.shape != (self.config.cond_dim,):
                raise ShapeError(
                    f"cond shape {cond.shape} != ({self.config.cond_dim},)")
            c = c + self.cond_proj(reshape(cond, (1, self.config.cond_dim)))
        return c  # [1, hidden]

    # --- forward --------------------------------------------------------------
    def forward(self, latent, t: float, cond=None) -> Tensor:
        lt = latent.latent if hasattr(latent, "latent") else as_tensor(latent)
        cfg = self.config
        if lt.ndim != 4 or lt.shape[1] != cfg.latent_channels:
            raise ShapeError(f"latent shape {lt.shape} incompatible with "
                             f"{cfg.latent_channels} channels")
        t = float(t)
        if not (0.0 <= t <= 1.0):
            raise ContractError(f"t must lie in [0,1], got {t}")
        tg = patchify(lt, cfg.patch)
        x = self.proj_in(tg.tokens)
        if cfg.pe_mode == "APE":
            x = x + self._ape(tg.grid)
        positions = grid_positions(tg.grid) if cfg.pe_mode == "RoPE" else None
        c = self._time_embedding(t, cond)
        heads, hd = cfg.heads, cfg.head_dim
        length = x.shape[0]
        for i, blk in enumerate(self.blocks):
            try:
                mods = blk.mod(c)  # [1, 4*hidden]
                scale1 = mods[0, 0 * cfg.hidden:1 * cfg.hidden]
                shift1 = mods[0, 1 * cfg.hidden:2 * cfg.hidden]
                scale2 = mods[0, 2 * cfg.hidden:3 * cfg.hidden]
                shift2 = mods[0, 3 * cfg.hidden:4 * cfg.hidden]
                a = rms_norm(x, self._one, eps=1e-6) * (scale1 + 1.0) + shift1
                qkv = blk.qkv(a)  # [L, 3*hidden]
                qkv = transpose(reshape(qkv, (length, 3, heads, hd)), (1, 2, 0, 3))
                q, k, v = qkv[0], qkv[1], qkv[2]
                if positions is not None:
                    q, k = apply_rope(q, k, positions)
                att = attention(q, k, v, (blk.gain_q, blk.gain_k))
                att = reshape(transpose(att, (1, 0, 2)), (length, cfg.hidden))
                x = x + blk.out(att)
                f = rms_norm(x, self._one, eps=1e-6) * (scale2 + 1.0) + shift2
                x = x + blk.ffn2(gelu(blk.ffn1(f)))
            except ShapeError as exc:
                raise ShapeError(f"block {i}: {exc}") from exc
        x = rms_norm(x, self.gain_out, eps=1e-6)
        out = self.proj_out(x)
        return unpatchify(TokenGrid(out, tg.grid), cfg.patch, cfg.latent_channels)

    def velocity(self, x, t, cond=None) -> Tensor:
        """Batched interface: x [B, T', C, H', W'], per-sample t and cond."""
        x = as_tensor(x)
        batch = x.shape[0]
        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)),
                                (batch,))
        outs = []
        for b in range(batch):
            cb = cond[b] if cond is not None else None
            outs.append(self.forward(x[b], float(t_arr[b]), cb))
        return stack(outs, axis=0)

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.proj_in.params("proj_in"))
        out.update(self.t_mlp.params("t_mlp"))
        out.update(self.cond_proj.params("cond_proj"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"blocks.{i}"))
        out["gain_out"] = self.gain_out
        out.update(self.proj_out.params("proj_out"))
        if self.config.learned_ape and self.config.pe_mode == "APE":
            out["ape_t"] = self.ape_t
            out["ape_h"] = self.ape_h
            out["ape_w"] = self.ape_w
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    # --- checkpointing ----------------------------------------------------------
    def save(self, path):
        checkpoint.save_weights(
            path, "video-dit", self.config.to_dict(),
            {name: p.values for name, p in self.params().items()})

    @classmethod
    def load(cls, path) -> "VideoDit":
        kind, config, tensors = checkpoint.load_weights(path)
        if kind != "video-dit":
            raise ContractError(f"checkpoint kind {kind!r} is not video-dit")
        model = cls(ModelConfig.from_dict(config))
        params = model.params()
        if set(params) != set(tensors):
            raise ContractError("checkpoint parameter names do not match model")
        for name, p in params.items():
            if p.values.shape != tensors[name].shape:
                raise ContractError(f"checkpoint shape mismatch for {name}")
            p.values[...] = tensors[name]
        return model
