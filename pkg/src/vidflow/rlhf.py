"""Reward ascent through the sampler with randomly selected gradient steps.

Sampling iterates x <- x + dt * v(stop_gradient(x), t): severing the state
input means no step needs second-order terms, and enabling recording on
only k of the N steps bounds memory while leaving sample values bit-equal
to plain Euler sampling.  The KL term of the fine-tuning objective is
omitted (beta fixed to 0); a reference model is never evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericalError
from .nn import Sgd, zero_grads
from .rng import Rng
from .sampler import SampleSchedule, make_schedule
from .tensor import (
    GradTape,
    Tensor,
    as_tensor,
    backward,
    matmul,
    no_grad,
    reshape,
    stack,
    stop_gradient,
    tabs,
    tmean,
    tsum,
    ttanh,
)
from .vae3d import LatentVideo

FRAMES_SHORT = 29


@dataclass(frozen=True)
class RewardSpec:
    """Differentiable scalar score of a generated sample."""

    name: str
    target: str  # "full-sample" | "first-frame"
    fn: object  # callable(Tensor) -> scalar Tensor

    def __post_init__(self):
        if self.target not in ("full-sample", "first-frame"):
            raise ConfigError(f"unknown reward target {self.target!r}")


@dataclass(frozen=True)
class RlhfConfig:
    """Toy-scale defaults: k=4 of N=20 steps, lr 1e-4, beta pinned to 0."""

    reward: RewardSpec
    sample_shape: tuple
    k: int = 4
    n_steps: int = 20
    lr: float = 1e-4
    beta: float = 0.0
    s_infer: float = 1.0
    frames_short: int = FRAMES_SHORT
    batch: int = 4

    def __post_init__(self):
        if not (1 <= self.k <= self.n_steps):
            raise ConfigError(f"k={self.k} must satisfy 1 <= k <= N={self.n_steps}")
        if self.beta != 0.0:
            raise ConfigError("KL regularization is omitted; beta must be 0")


def select_grad_steps(n_steps: int, k: int, rng: Rng) -> tuple[int, ...]:
    """Uniform sample of k distinct step indices from {0..N-1}."""
    if not (1 <= k <= n_steps):
        raise ConfigError(f"k={k} out of range for N={n_steps}")
    picked = rng.choice(n_steps, size=k, replace=False)
    return tuple(sorted(int(i) for i in picked))


def sample_with_selected_grads(model, x0, schedule: SampleSchedule, grad_steps,
                               cond=None) -> Tensor:
    """Euler sampling whose values ignore grad_steps entirely.

    Steps in grad_steps record on the ambient tape; the rest run without
    recording.  The state is stop-gradiented before every model call.
    """
    grad_set = set(int(i) for i in grad_steps)
    if grad_set and not grad_set <= set(range(schedule.n_steps)):
        raise ContractError(f"grad steps {sorted(grad_set)} outside 0..{schedule.n_steps - 1}")
    x = as_tensor(x0)
    ts, deltas = schedule.timesteps, schedule.deltas
    for i in range(schedule.n_steps):
        xi = stop_gradient(x)
        t_i = float(ts[i])
        if i in grad_set:
            v = model.velocity(xi, t_i, cond)
        else:
            with no_grad():
                v = model.velocity(xi, t_i, cond)
        x = x + float(deltas[i]) * v
        if not np.isfinite(x.values).all():
            raise NumericalError(f"sample_with_selected_grads: non-finite state at step {i}")
    return x


# shipped toy rewards ---------------------------------------------------------

def reward_target_mean(mu: float) -> RewardSpec:
    """r = -(mean(x) - mu)^2: pulls the global sample mean toward mu."""

    def fn(x: Tensor) -> Tensor:
        d = tmean(x) - mu
        return -(d * d)

    return RewardSpec(name="target-mean", target="full-sample", fn=fn)


def reward_smoothness() -> RewardSpec:
    """Negative total variation along the leading axis."""

    def fn(x: Tensor) -> Tensor:
        if x.shape[0] < 2:
            return tsum(x * 0.0)
        diff = x[1:] - x[:-1]
        return -tsum(tabs(diff))

    return RewardSpec(name="smoothness", target="full-sample", fn=fn)


class _FrozenMlpScorer:
    def __init__(self, seed: int, width: int = 32):
        self.seed = seed
        self.width = width
        self._maps: dict[int, tuple[Tensor, Tensor, Tensor]] = {}

    def __call__(self, x: Tensor) -> Tensor:
        d = x.size
        if d not in self._maps:
            rng = Rng(self.seed, ("frozen-scorer", d))
            w1 = Tensor(rng.stream("w1").normal((d, self.width)) / np.sqrt(d))
            b1 = Tensor(rng.stream("b1").normal((self.width,)) * 0.1)
            w2 = Tensor(rng.stream("w2").normal((self.width, 1)) / np.sqrt(self.width))
            self._maps[d] = (w1, b1, w2)
        w1, b1, w2 = self._maps[d]
        h = ttanh(matmul(reshape(x, (1, d)), w1) + b1)
        return tmean(matmul(h, w2))


def reward_random_mlp(seed: int = 0) -> RewardSpec:
    """Frozen random-MLP scorer; stands in for an external preference model."""
    return RewardSpec(name="random-mlp", target="full-sample", fn=_FrozenMlpScorer(seed))


def make_reward(kind: str, **kwargs) -> RewardSpec:
    if kind == "target-mean":
        return reward_target_mean(kwargs.get("mu", 1.0))
    if kind == "smoothness":
        return reward_smoothness()
    if kind == "random-mlp":
        return reward_random_mlp(kwargs.get("seed", 0))
    raise ConfigError(f"unknown reward kind {kind!r}")


def evaluate_reward(spec: RewardSpec, sample: Tensor, vae=None) -> Tensor:
    """Score one generated sample, decoding only the first frame if asked."""
    if spec.target == "first-frame":
        if vae is None:
            raise ContractError("first-frame reward needs a decoder")
        frame = vae.decode_first_frame(LatentVideo(sample))
        return spec.fn(frame)
    return spec.fn(sample)


def rlhf_step(model, prompts, cfg: RlhfConfig, rng: Rng, opt=None, vae=None,
              ref_model=None) -> float:
    """One ascent step on the mean reward of freshly sampled outputs.

    Returns the pre-step reward.  With beta=0 the reference model is never
    evaluated; passing opt=None applies the plain ascent update
    theta += lr * grad.
    """
    del ref_model  # beta == 0: KL term omitted, reference never consulted
    schedule = make_schedule(cfg.n_steps, cfg.s_infer)
    grad_steps = select_grad_steps(cfg.n_steps, cfg.k, rng.stream("grad-steps"))
    batch = len(prompts) if prompts is not None else cfg.batch
    x0 = rng.stream("noise").normal((batch,) + tuple(cfg.sample_shape))
    cond = None
    if prompts is not None:
        cond = Tensor(np.stack([np.asarray(p, dtype=np.float64) for p in prompts]))
    with GradTape():
        x1 = sample_with_selected_grads(model, Tensor(x0), schedule, grad_steps, cond)
        scores = [evaluate_reward(cfg.reward, x1[b], vae) for b in range(batch)]
        reward = tmean(stack(scores))
        if not np.isfinite(reward.values).all():
            raise NumericalError(
                f"rlhf_step: non-finite reward {reward.values!r}; "
                f"|x1|max={np.abs(x1.values).max():.3e}")
        backward(reward)
    params = model.params()
    if opt is None:
        opt = Sgd(cfg.lr, maximize=True)
    opt.step(params)
    zero_grads(params)
    return float(reward.values)
