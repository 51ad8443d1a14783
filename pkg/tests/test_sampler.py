import math

import numpy as np
import pytest

from vidflow.errors import ConfigError, NumericalError
from vidflow.rng import Rng
from vidflow.sampler import GuidanceConfig, SampleSchedule, cfg_combine, euler_sample, make_schedule
from vidflow.tensor import Tensor


class FieldModel:
    """Wraps a plain velocity function as a model, counting calls."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def velocity(self, x, t, cond=None):
        self.calls += 1
        return Tensor(self.fn(x.values, t, cond))


class TestMakeSchedule:
    def test_uniform_grid(self):
        sched = make_schedule(4, 1.0)
        assert np.allclose(sched.timesteps, [0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)

    def test_shifted_two_steps(self):
        sched = make_schedule(2, 17.0)
        assert abs(sched.timesteps[1] - 0.5 / 9) < 1e-15
        assert sched.timesteps[0] == 0.0 and sched.timesteps[-1] == 1.0

    def test_high_noise_concentration(self):
        sched = make_schedule(50, 17.0)
        assert (sched.timesteps < 0.2).sum() > 0.5 * len(sched.timesteps)

    def test_strictly_increasing_endpoints_exact(self):
        for n in (1, 2, 5, 50, 377):
            for s in (1.0, 3.0, 17.0):
                sched = make_schedule(n, s)
                assert sched.timesteps[0] == 0.0
                assert sched.timesteps[-1] == 1.0
                assert np.all(np.diff(sched.timesteps) > 0)

    def test_telescoping_deltas(self):
        for n in (1, 3, 50):
            for s in (1.0, 17.0):
                sched = make_schedule(n, s)
                assert math.fsum(sched.deltas) == pytest.approx(1.0, abs=1e-15)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            make_schedule(0, 1.0)
        with pytest.raises(ConfigError):
            make_schedule(10, 0.5)


class TestCfgCombine:
    def test_scale_one_returns_cond(self):
        v_u, v_c = Tensor([1.0, 2.0]), Tensor([5.0, -3.0])
        assert np.array_equal(cfg_combine(v_u, v_c, 1.0).values, v_c.values)

    def test_scale_zero_returns_uncond(self):
        v_u, v_c = Tensor([1.0, 2.0]), Tensor([5.0, -3.0])
        assert np.array_equal(cfg_combine(v_u, v_c, 0.0).values, v_u.values)

    def test_extrapolation_at_scale_six(self):
        assert cfg_combine(Tensor([0.0]), Tensor([2.0]), 6.0).values.tolist() == [12.0]

    def test_identity_when_equal(self):
        v = Tensor(Rng(0).normal((3,)))
        for scale in (0.0, 1.0, 6.0, 12.0):
            assert np.array_equal(cfg_combine(v, v, scale).values, v.values)


class TestEulerSample:
    def test_single_step(self):
        model = FieldModel(lambda x, t, c: np.full_like(x, 2.0))
        x0 = Tensor(np.array([[1.0, 1.0]]))
        out = euler_sample(model, x0, make_schedule(1, 1.0))
        assert np.allclose(out.values, [[3.0, 3.0]])
        assert model.calls == 1

    def test_constant_field_any_schedule(self):
        c = np.array([[0.5, -1.5]])
        model = FieldModel(lambda x, t, _: np.broadcast_to(c, x.shape))
        x0 = Tensor(Rng(1).normal((1, 2)))
        for n, s in [(1, 1.0), (7, 1.0), (50, 17.0)]:
            out = euler_sample(model, x0, make_schedule(n, s))
            assert np.max(np.abs(out.values - (x0.values + c))) < 1e-12

    def test_contraction_oracle_reaches_target(self):
        target = np.array([[2.0, -1.0]])

        def field(x, t, _):
            return (target - x) / (1.0 - t)

        out = euler_sample(FieldModel(field), Tensor(np.zeros((1, 2))),
                           make_schedule(100, 1.0))
        assert np.max(np.abs(out.values - target)) < 1e-3

    def test_affine_target_field_exact_for_any_n(self):
        # true flow-matching field is constant along the path: exact at N=1
        rng = Rng(2)
        x0 = rng.normal((4, 3))
        x1 = rng.normal((4, 3))
        v = x1 - x0

        def field(x, t, _):
            return v

        for n in (1, 2, 13):
            out = euler_sample(FieldModel(field), Tensor(x0), make_schedule(n, 1.0))
            assert np.max(np.abs(out.values - x1)) < 1e-12

    def test_monotone_convergence_with_n(self):
        # Lipschitz field with curved trajectories: x' = -x + 2t
        def field(x, t, _):
            return -x + 2.0 * t

        x0 = np.array([[1.0]])
        exact = (x0 + 2.0) / np.e + 2.0 - 2.0  # C e^-t + 2t - 2 at t=1
        errs = []
        for n in (5, 10, 20, 40):
            out = euler_sample(FieldModel(field), Tensor(x0), make_schedule(n, 1.0))
            errs.append(abs(float(out.values) - float(exact)))
        assert errs == sorted(errs, reverse=True)
        assert errs[-1] < errs[0] / 4

    def test_two_calls_per_step_with_cfg(self):
        model = FieldModel(lambda x, t, c: np.zeros_like(x))
        guidance = GuidanceConfig(cfg_scale=6.0, uncond=np.zeros(4))
        cond = Tensor(np.ones((1, 4)))
        euler_sample(model, Tensor(np.zeros((1, 2))), make_schedule(5, 1.0),
                     guidance, cond)
        assert model.calls == 10
        model.calls = 0
        euler_sample(model, Tensor(np.zeros((1, 2))), make_schedule(5, 1.0),
                     GuidanceConfig(cfg_scale=1.0, uncond=np.zeros(4)), cond)
        assert model.calls == 5

    def test_guided_combination_value(self):
        # cond field 2, uncond field 0, scale 6 -> effective velocity 12
        def field(x, t, cond):
            c = cond.values if isinstance(cond, Tensor) else cond
            return np.full_like(x, 2.0) if c.any() else np.zeros_like(x)

        model = FieldModel(field)
        out = euler_sample(model, Tensor(np.zeros((1, 2))), make_schedule(4, 1.0),
                           GuidanceConfig(cfg_scale=6.0, uncond=np.zeros(3)),
                           Tensor(np.ones((1, 3))))
        assert np.allclose(out.values, 12.0)

    def test_nonfinite_abort_names_step(self):
        def field(x, t, _):
            return np.full_like(x, np.inf if t >= 0.39 else 0.0)

        with pytest.raises(NumericalError, match="step 2"):
            euler_sample(FieldModel(field), Tensor(np.zeros((1, 2))),
                         make_schedule(5, 1.0))

    def test_trace_rows(self):
        model = FieldModel(lambda x, t, _: np.ones_like(x))
        trace = []
        euler_sample(model, Tensor(np.zeros((1, 2))), make_schedule(3, 1.0),
                     trace=trace)
        assert [r["step"] for r in trace] == [0, 1, 2]
        assert all(set(r) == {"step", "t", "dt", "state_norm"} for r in trace)
