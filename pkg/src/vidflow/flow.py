"""Flow-matching objective, timestep distributions, and the shift transform.

Convention: t=0 is pure noise, t=1 is data.  The training path is the
straight interpolation x_t = (1-t) x0 + t x1 and the regression target is
the constant velocity x1 - x0.  Shifting with s > 1 pushes timestep mass
toward the high-noise end t=0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericalError
from .nn import Linear, Mlp, zero_grads
from .rng import Rng
from .tensor import GradTape, Tensor, as_tensor, backward, concat, no_grad, tmean

T_CLAMP = 1e-5


@dataclass(frozen=True)
class TimestepSampler:
    """Training-time t distribution: uniform or logit-normal, then shifted."""

    kind: str = "logit-normal"
    logit_mean: float = 0.0
    logit_std: float = 1.0
    train_shift: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "logit-normal"):
            raise ConfigError(f"unknown timestep sampler kind {self.kind!r}")
        if self.kind == "logit-normal" and self.logit_std <= 0:
            raise ConfigError("logit-normal sampler needs logit_std > 0")
        if self.train_shift < 1.0:
            raise ConfigError("train_shift must be >= 1")


@dataclass
class FlowBatch:
    """One training batch: noise, data, per-sample times, conditioning."""

    x0: Tensor
    x1: Tensor
    t: np.ndarray
    cond: Tensor | None = None

    def __post_init__(self):
        if self.x0.shape != self.x1.shape:
            raise ContractError(f"x0/x1 shapes differ: {self.x0.shape} vs {self.x1.shape}")


def shift_transform(t, s: float):
    """Monotone bijection of [0,1]: t' = t / (s - (s-1) t).

    s > 1 compresses toward t=0 (the high-noise end).  Any s > 0 is
    accepted so that s -> 1/s acts as the exact inverse map.
    """
    if s <= 0:
        raise ConfigError(f"shift must be positive, got {s}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ContractError(f"shift_transform: t must lie in [0,1], got range "
                            f"[{t_arr.min()}, {t_arr.max()}]")
    out = t_arr / (s - (s - 1.0) * t_arr)
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def sample_timestep(sampler: TimestepSampler, rng: Rng, n: int | None = None):
    """Draw t from the configured base distribution, then apply the shift.

    Samples are clamped to [1e-5, 1-1e-5] so downstream conditioning never
    sees the exact endpoints.
    """
    size = 1 if n is None else n
    if sampler.kind == "uniform":
        t = rng.uniform((size,))
    else:
        z = rng.normal((size,))
        t = 1.0 / (1.0 + np.exp(-(sampler.logit_mean + sampler.logit_std * z)))
    t = shift_transform(np.clip(t, 0.0, 1.0), sampler.train_shift)
    t = np.clip(t, T_CLAMP, 1.0 - T_CLAMP)
    return float(t[0]) if n is None else t


def _align_t(t, ndim: int) -> np.ndarray:
    """Reshape per-sample t to broadcast over [B, ...] sample axes."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ContractError(f"t must lie in [0,1], got range [{t_arr.min()}, {t_arr.max()}]")
    if t_arr.ndim == 0:
        return t_arr
    return t_arr.reshape(t_arr.shape + (1,) * (ndim - 1))


def interpolate(x0, x1, t) -> Tensor:
    """Affine path point x_t = (1-t) x0 + t x1."""
    x0, x1 = as_tensor(x0), as_tensor(x1)
    if x0.shape != x1.shape:
        raise ContractError(f"interpolate: shapes differ {x0.shape} vs {x1.shape}")
    ta = _align_t(t, x0.ndim)
    return x0 * Tensor(1.0 - ta) + x1 * Tensor(ta)


def velocity_target(x0, x1) -> Tensor:
    """Path velocity x1 - x0; constant in t."""
    x0, x1 = as_tensor(x0), as_tensor(x1)
    if x0.shape != x1.shape:
        raise ContractError(f"velocity_target: shapes differ {x0.shape} vs {x1.shape}")
    return x1 - x0


def fm_loss(v_pred: Tensor, v_target: Tensor) -> Tensor:
    """Mean squared error over all elements and batch."""
    v_pred, v_target = as_tensor(v_pred), as_tensor(v_target)
    if v_pred.shape != v_target.shape:
        raise ContractError(f"fm_loss: shapes differ {v_pred.shape} vs {v_target.shape}")
    d = v_pred - v_target
    return tmean(d * d)


def time_features(t, n_freqs: int = 8) -> np.ndarray:
    """Sinusoidal features of t at geometric frequencies; shape [B, 2*n_freqs]."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 2.0 ** np.arange(n_freqs)
    ang = 2.0 * np.pi * t_arr[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class VelocityMlp:
    """Velocity model for low-dimensional states: MLP over [x, t-features, cond]."""

    def __init__(self, dim: int, rng: Rng, hidden: int = 64, depth: int = 3,
                 n_freqs: int = 8, cond_dim: int = 0):
        self.dim = dim
        self.cond_dim = cond_dim
        self.n_freqs = n_freqs
        d_in = dim + 2 * n_freqs + cond_dim
        dims = [d_in] + [hidden] * depth + [dim]
        self.net = Mlp(dims, rng.stream("mlp"))

    def velocity(self, x: Tensor, t, cond: Tensor | None = None) -> Tensor:
        x = as_tensor(x)
        batch = x.shape[0]
        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (batch,))
        feats = [x, Tensor(time_features(t_arr, self.n_freqs))]
        if self.cond_dim:
            feats.append(as_tensor(cond))
        return self.net(concat(feats, axis=1))

    def params(self) -> dict[str, Tensor]:
        return self.net.params("net")


class ConstantVelocity:
    """Zero-capacity model that predicts one learnable constant everywhere."""

    def __init__(self, dim: int, value: float = 0.0):
        self.c = Tensor(np.full(dim, value), requires_grad=True)

    def velocity(self, x: Tensor, t, cond=None) -> Tensor:
        x = as_tensor(x)
        return Tensor(np.zeros(x.shape)) + self.c

    def params(self) -> dict[str, Tensor]:
        return {"c": self.c}


def train_step(model, batch: FlowBatch, opt, anchor_model=None,
               anchor_weight: float = 0.0) -> float:
    """One gradient step on the flow-matching loss; returns the loss value.

    With an anchor model (fine-tuning regime) the loss gains
    anchor_weight * mean((v - v_anchor)^2) pulling predictions toward the
    frozen reference.
    """
    x_t = interpolate(batch.x0, batch.x1, batch.t)
    v_tgt = velocity_target(batch.x0, batch.x1)
    with GradTape():
        v = model.velocity(x_t, batch.t, batch.cond)
        loss = fm_loss(v, v_tgt)
        if anchor_model is not None and anchor_weight > 0.0:
            with no_grad():
                v_ref = anchor_model.velocity(x_t, batch.t, batch.cond)
            d = v - Tensor(v_ref.values)
            loss = loss + anchor_weight * tmean(d * d)
        if not np.isfinite(loss.values).all():
            raise NumericalError(
                "train_step: non-finite loss; "
                f"|x_t|max={np.abs(x_t.values).max():.3e} "
                f"|v|max={np.abs(v.values).max():.3e} "
                f"t range=[{np.min(batch.t):.4f},{np.max(batch.t):.4f}]")
        backward(loss)
    params = model.params()
    opt.step(params)
    zero_grads(params)
    return float(loss.values)
