"""First-order Euler sampling over shifted step grids, with optional CFG.

The step grid maps the uniform partition i/N through the shift transform,
so s_infer > 1 concentrates small steps in the high-noise region near t=0.
Guidance combines an unconditional and a conditional velocity; scale 1
degenerates to a single conditional model call per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError
from .flow import shift_transform
from .tensor import Tensor, as_tensor, no_grad


@dataclass(frozen=True)
class SampleSchedule:
    """Strictly increasing timesteps t_0=0 < ... < t_N=1."""

    n_steps: int
    s_infer: float
    timesteps: np.ndarray

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.timesteps)


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance: scale and the empty-prompt embedding."""

    cfg_scale: float
    uncond: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


def make_schedule(n_steps: int, s_infer: float) -> SampleSchedule:
    """Shift-mapped uniform grid; endpoints are exactly 0 and 1."""
    if n_steps < 1:
        raise ConfigError(f"schedule needs n_steps >= 1, got {n_steps}")
    if s_infer < 1.0:
        raise ConfigError(f"s_infer must be >= 1, got {s_infer}")
    grid = np.arange(n_steps + 1) / n_steps
    ts = shift_transform(grid, s_infer)
    ts[0], ts[-1] = 0.0, 1.0
    if np.any(np.diff(ts) <= 0):
        raise ConfigError(f"degenerate schedule for N={n_steps}, s={s_infer}")
    return SampleSchedule(n_steps=n_steps, s_infer=s_infer, timesteps=ts)


def cfg_combine(v_uncond, v_cond, scale: float) -> Tensor:
    """v_uncond + scale * (v_cond - v_uncond)."""
    v_uncond, v_cond = as_tensor(v_uncond), as_tensor(v_cond)
    return v_uncond + scale * (v_cond - v_uncond)


def _broadcast_uncond(guidance: GuidanceConfig, cond, batch: int) -> Tensor:
    unc = np.asarray(guidance.uncond, dtype=np.float64)
    if unc.ndim == 1:
        unc = np.broadcast_to(unc, (batch, unc.shape[0]))
    return Tensor(unc)


def euler_sample(model, x0, schedule: SampleSchedule, guidance: GuidanceConfig | None = None,
                 cond=None, trace: list | None = None) -> Tensor:
    """Integrate x' = v(x, t) from t=0 to t=1 with per-step sizes from the grid.

    With a uniform schedule this is exactly x0 + (1/N) * sum of the N model
    velocities.  Two model calls per step under guidance, one when the scale
    is 1 or no guidance is given.
    """
    x = as_tensor(x0)
    ts, deltas = schedule.timesteps, schedule.deltas
    use_cfg = guidance is not None and guidance.cfg_scale != 1.0
    with no_grad():
        for i in range(schedule.n_steps):
            t_i = float(ts[i])
            v_c = model.velocity(x, t_i, cond)
            if use_cfg:
                uncond = _broadcast_uncond(guidance, cond, x.shape[0])
                v_u = model.velocity(x, t_i, uncond)
                v = cfg_combine(v_u, v_c, guidance.cfg_scale)
            else:
                v = v_c
            x = x + float(deltas[i]) * v
            if not np.isfinite(x.values).all():
                raise NumericalError(f"euler_sample: non-finite state at step {i} "
                                     f"(t={t_i:.5f})")
            if trace is not None:
                trace.append({"step": i, "t": t_i, "dt": float(deltas[i]),
                              "state_norm": float(np.linalg.norm(x.values))})
    return x
