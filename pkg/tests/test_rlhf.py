import dataclasses

import numpy as np
import pytest

from vidflow.errors import ConfigError
from vidflow.flow import VelocityMlp
from vidflow.nn import Adam
from vidflow.rlhf import (
    RlhfConfig,
    evaluate_reward,
    make_reward,
    reward_random_mlp,
    reward_smoothness,
    reward_target_mean,
    rlhf_step,
    sample_with_selected_grads,
    select_grad_steps,
)
from vidflow.rng import Rng
from vidflow.sampler import euler_sample, make_schedule
from vidflow.tensor import GradTape, Tensor, backward, tsum
from vidflow.vae3d import CausalVae3d, LatentVideo


class ScalarVelocity:
    """v(x, t) = theta everywhere; the telescoped gradient is sum of deltas."""

    def __init__(self, theta: float = 0.5):
        self.theta = Tensor(np.array([theta]), requires_grad=True)

    def velocity(self, x, t, cond=None):
        return Tensor(np.zeros(x.shape)) + self.theta

    def params(self):
        return {"theta": self.theta}


class TestSelectGradSteps:
    def test_full_selection(self):
        assert select_grad_steps(8, 8, Rng(0)) == tuple(range(8))

    def test_uniform_frequencies(self):
        n, draws = 10, 10_000
        counts = np.zeros(n)
        rng = Rng(1)
        for i in range(draws):
            (idx,) = select_grad_steps(n, 1, rng.stream(i))
            counts[idx] += 1
        p = 1.0 / n
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) < 3.5 * sigma)

    def test_deterministic_for_fixed_seed(self):
        a = select_grad_steps(20, 4, Rng(7, ("s",)))
        b = select_grad_steps(20, 4, Rng(7, ("s",)))
        assert a == b

    def test_out_of_range_k(self):
        with pytest.raises(ConfigError):
            select_grad_steps(5, 0, Rng(2))
        with pytest.raises(ConfigError):
            select_grad_steps(5, 6, Rng(2))


class TestSelectedGradSampling:
    def test_empty_selection_has_no_gradient_path(self):
        model = ScalarVelocity()
        sched = make_schedule(6, 1.0)
        x0 = Tensor(Rng(3).normal((1, 2)))
        with GradTape():
            x1 = sample_with_selected_grads(model, x0, sched, ())
        assert x1.node is None  # nothing recorded => d x1 / d theta = 0

    def test_values_invariant_across_selections(self):
        rng = Rng(4)
        model = VelocityMlp(2, rng.stream("m"), hidden=16, depth=2)
        sched = make_schedule(10, 1.0)
        x0 = Tensor(rng.stream("x").normal((3, 2)))
        plain = euler_sample(model, x0, sched)
        for steps in [(0,), (9,), (0, 5, 9), tuple(range(10))]:
            with GradTape():
                x1 = sample_with_selected_grads(model, x0, sched, steps)
            assert np.array_equal(x1.values, plain.values), steps

    def test_linear_model_closed_form(self):
        sched = make_schedule(8, 3.0)
        deltas = sched.deltas
        for steps in [(0,), (2, 5), tuple(range(8))]:
            model = ScalarVelocity(0.3)
            x0 = Tensor(np.zeros((1, 1)))
            with GradTape():
                x1 = sample_with_selected_grads(model, x0, sched, steps)
                backward(tsum(x1))
            expected = sum(deltas[list(steps)])
            assert abs(model.theta.grad[0] - expected) < 1e-10
        # k = N: the gradient telescopes to exactly 1
        model = ScalarVelocity(0.3)
        with GradTape():
            x1 = sample_with_selected_grads(model, Tensor(np.zeros((1, 1))),
                                            sched, tuple(range(8)))
            backward(tsum(x1))
        assert abs(model.theta.grad[0] - 1.0) < 1e-10

    def test_gradient_additivity_over_disjoint_selections(self):
        rng = Rng(5)
        model = VelocityMlp(2, rng.stream("m"), hidden=8, depth=1)
        sched = make_schedule(8, 1.0)
        x0 = Tensor(rng.stream("x").normal((2, 2)))
        a, b = (0, 3), (5, 6)

        def grads_for(steps):
            params = model.params()
            for p in params.values():
                p.zero_grad()
            with GradTape():
                x1 = sample_with_selected_grads(model, x0, sched, steps)
                backward(tsum(x1 * x1))
            return {n: (p.grad.copy() if p.grad is not None else 0.0)
                    for n, p in params.items()}

        ga = grads_for(a)
        gb = grads_for(b)
        gab = grads_for(a + b)
        for name in gab:
            assert np.max(np.abs(gab[name] - (ga[name] + gb[name]))) < 1e-10, name


class TestRewards:
    def test_target_mean_zero_at_target(self):
        spec = reward_target_mean(2.0)
        assert spec.fn(Tensor(np.full(4, 2.0))).values == 0.0
        assert spec.fn(Tensor(np.full(4, 3.0))).values == -1.0

    def test_smoothness_prefers_constant(self):
        spec = reward_smoothness()
        rough = spec.fn(Tensor(np.array([0.0, 1.0, 0.0, 1.0])))
        flat = spec.fn(Tensor(np.array([0.5, 0.5, 0.5, 0.5])))
        assert flat.values == 0.0
        assert rough.values < flat.values

    def test_random_mlp_deterministic_and_differentiable(self):
        spec = reward_random_mlp(seed=9)
        x = Tensor(Rng(6).normal((5,)), requires_grad=True)
        with GradTape():
            r = spec.fn(x)
            backward(r)
        assert np.isfinite(r.values)
        assert x.grad is not None and np.abs(x.grad).max() > 0
        r2 = reward_random_mlp(seed=9).fn(Tensor(x.values)).values
        assert np.array_equal(r.values, r2)

    def test_make_reward_factory(self):
        assert make_reward("target-mean", mu=0.5).name == "target-mean"
        assert make_reward("smoothness").name == "smoothness"
        with pytest.raises(ConfigError):
            make_reward("vlm")


def first_frame_reward(mu: float = 0.5):
    base = make_reward("target-mean", mu=mu)
    return dataclasses.replace(base, target="first-frame")


class TestFirstFrameReward:
    def test_gradient_zero_beyond_first_latent_frame(self):
        vae = CausalVae3d(0)
        latent = Tensor(Rng(7).normal((8, 16, 2, 2)) * 0.1, requires_grad=True)
        with GradTape():
            r = evaluate_reward(first_frame_reward(), latent, vae)
            backward(r)
        assert np.array_equal(latent.grad[1:], np.zeros_like(latent.grad[1:]))
        assert np.abs(latent.grad[0]).max() > 0

    def test_missing_decoder_rejected(self):
        with pytest.raises(Exception, match="decoder"):
            evaluate_reward(first_frame_reward(), Tensor(np.zeros((2, 16, 1, 1))))

    def test_rlhf_step_video_path(self):
        # 29-frame short preset: 8 latent frames through the real decoder
        vae = CausalVae3d(0)
        rng = Rng(12)
        model = ScalarVelocity(0.1)
        cfg = RlhfConfig(reward=first_frame_reward(), sample_shape=(8, 16, 2, 2),
                         k=2, n_steps=4, lr=1e-3, batch=2)
        assert (cfg.frames_short - 1) // 4 + 1 == cfg.sample_shape[0]
        r = rlhf_step(model, None, cfg, rng.stream("s"), vae=vae)
        assert np.isfinite(r)


class CountingModel:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def velocity(self, x, t, cond=None):
        self.calls += 1
        return self.inner.velocity(x, t, cond)

    def params(self):
        return self.inner.params()


class TestRlhfStep:
    def _cfg(self, **kw):
        base = dict(reward=make_reward("target-mean", mu=1.5),
                    sample_shape=(2,), k=4, n_steps=10, lr=1e-4, batch=4)
        base.update(kw)
        return RlhfConfig(**base)

    def test_lr_zero_leaves_parameters_untouched(self):
        rng = Rng(8)
        model = VelocityMlp(2, rng.stream("m"), hidden=8, depth=1)
        before = {n: p.values.copy() for n, p in model.params().items()}
        rlhf_step(model, None, self._cfg(lr=0.0), rng.stream("step"))
        for n, p in model.params().items():
            assert np.array_equal(p.values, before[n]), n

    def test_reference_model_never_evaluated(self):
        rng = Rng(9)
        model = VelocityMlp(2, rng.stream("m"), hidden=8, depth=1)
        ref = CountingModel(VelocityMlp(2, rng.stream("ref"), hidden=8, depth=1))
        rlhf_step(model, None, self._cfg(), rng.stream("step"), ref_model=ref)
        assert ref.calls == 0

    def test_nonzero_beta_rejected(self):
        with pytest.raises(ConfigError, match="beta"):
            self._cfg(beta=0.1)

    def test_reward_ascends_with_adam(self):
        rng = Rng(10)
        model = VelocityMlp(2, rng.stream("m"), hidden=16, depth=2)
        cfg = self._cfg(lr=3e-3)
        opt = Adam(cfg.lr, maximize=True)
        rewards = [rlhf_step(model, None, cfg, rng.stream("step", i), opt=opt)
                   for i in range(120)]
        assert np.mean(rewards[-20:]) > np.mean(rewards[:20])

    def test_plain_ascent_default(self):
        rng = Rng(11)
        model = ScalarVelocity(0.0)
        cfg = RlhfConfig(reward=make_reward("target-mean", mu=1.0),
                         sample_shape=(1,), k=2, n_steps=4, lr=0.05, batch=2)
        r0 = rlhf_step(model, None, cfg, rng.stream("s", 0))
        # theta moved in the ascent direction chosen by the reward gradient
        assert model.theta.values[0] != 0.0
        assert np.isfinite(r0)
