import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from refvdm.diffusion import (
    GuidanceConfig,
    LatentVideo,
    ReferenceLatent,
    cfg_predict,
    ddim_sample,
    ddim_timesteps,
    forward_diffuse,
    make_noise_schedule,
    remind_noise,
    remind_timestep,
)


class TestNoiseSchedule:
    def test_default_schedule_endpoints(self):
        s = make_noise_schedule(1000, 1e-4, 0.02)
        assert s.lambdas[0] == 1.0
        assert np.all(np.diff(s.lambdas) < 0)
        assert s.lambdas[-1] > 0

    def test_single_step_product(self):
        s = make_noise_schedule(1, 0.5, 0.5)
        assert s.lam(1) == pytest.approx(math.sqrt(0.5), abs=1e-15)

    def test_term_by_term_product_oracle(self):
        T = 10
        s = make_noise_schedule(T, 1e-4, 0.02)
        betas = np.linspace(1e-4, 0.02, T)
        acc = 1.0
        for b in betas:
            acc *= math.sqrt(1.0 - b)
        assert s.lam(T) == pytest.approx(acc, rel=1e-14)

    @pytest.mark.parametrize("T", [1, 5, 100, 1000])
    def test_variance_preservation(self, T):
        s = make_noise_schedule(T)
        assert np.max(np.abs(s.lambdas**2 + s.sigmas**2 - 1.0)) < 1e-12

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_steps": 0},
            {"num_steps": 10, "beta_start": 0.0},
            {"num_steps": 10, "beta_start": 0.5, "beta_end": 0.1},
            {"num_steps": 10, "beta_start": 0.1, "beta_end": 1.0},
        ],
    )
    def test_invalid_args(self, kwargs):
        with pytest.raises(ValueError):
            make_noise_schedule(**kwargs)


class TestForwardDiffuse:
    def setup_method(self):
        self.schedule = make_noise_schedule(10, 1e-4, 0.02)
        gen = torch.Generator().manual_seed(0)
        self.z0 = LatentVideo(torch.randn(2, 4, 4, 3, generator=gen))
        self.eps = torch.randn(2, 4, 4, 3, generator=gen)

    def test_identity_at_t0(self):
        out = forward_diffuse(self.z0, 0, self.eps, self.schedule)
        assert torch.equal(out.data, self.z0.data)

    def test_zero_signal_at_T(self):
        z = LatentVideo(torch.zeros(2, 4, 4, 3))
        out = forward_diffuse(z, 10, self.eps, self.schedule)
        assert torch.allclose(out.data, self.schedule.sigma(10) * self.eps)

    def test_product_oracle_midpoint(self):
        betas = np.linspace(1e-4, 0.02, 10)
        lam5 = np.prod(np.sqrt(1 - betas[:5]))
        sig5 = math.sqrt(1 - lam5**2)
        out = forward_diffuse(self.z0, 5, self.eps, self.schedule)
        expected = lam5 * self.z0.data + sig5 * self.eps
        assert torch.allclose(out.data, expected.to(out.data.dtype), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_diffuse(self.z0, 5, torch.zeros(1, 4, 4, 3), self.schedule)

    def test_t_out_of_range(self):
        with pytest.raises(ValueError):
            forward_diffuse(self.z0, 11, self.eps, self.schedule)

    @given(a=st.floats(min_value=-3.0, max_value=3.0, allow_nan=False))
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, a):
        out1 = forward_diffuse(self.z0, 5, self.eps, self.schedule).data
        scaled_in = LatentVideo((a * self.z0.data) if a != 0 else torch.zeros_like(self.z0.data))
        out2 = forward_diffuse(scaled_in, 5, a * self.eps, self.schedule).data
        assert torch.allclose(out2, a * out1, atol=1e-5)


class TestRemindNoise:
    def setup_method(self):
        self.schedule = make_noise_schedule(1000)
        gen = torch.Generator().manual_seed(1)
        self.r = ReferenceLatent(torch.randn(1, 4, 4, 3, generator=gen))
        self.eps = torch.randn(1, 4, 4, 3, generator=gen)

    def test_paper_default_alpha(self):
        # alpha=0.01, t=1000 -> t'=10
        out = remind_noise(self.r, 1000, 0.01, self.schedule, self.eps)
        lam, sig = self.schedule.lam(10), self.schedule.sigma(10)
        assert torch.allclose(out.data, lam * self.r.data + sig * self.eps)
        assert out.noised

    def test_alpha_zero_identity(self):
        out = remind_noise(self.r, 777, 0.0, self.schedule, self.eps)
        assert torch.equal(out.data, self.r.data)

    def test_rounding_to_zero(self):
        # alpha=0.01, t=37 -> round(0.37) = 0 -> unchanged
        out = remind_noise(self.r, 37, 0.01, self.schedule, self.eps)
        assert torch.equal(out.data, self.r.data)

    def test_round_half_up(self):
        assert remind_timestep(50, 0.01) == 1  # 0.5 rounds up
        assert remind_timestep(49, 0.01) == 0
        assert remind_timestep(1000, 0.01) == 10

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            remind_noise(self.r, 10, 1.5, self.schedule, self.eps)


class TestCfgPredict:
    def _model(self, cond_val, uncond_val, calls):
        def model(z, ref, text, t):
            calls.append("uncond" if ref is None and text is None else "cond")
            val = uncond_val if (ref is None and text is None) else cond_val
            return torch.full((z.shape[0] + 1, *z.shape[1:]), val)

        return model

    def test_w1_is_conditional_bitwise(self):
        calls = []
        z = torch.randn(2, 2, 2, 3)
        model = self._model(1.0, 5.0, calls)
        out = cfg_predict(model, z, ReferenceLatent(torch.zeros(1, 2, 2, 3)), torch.zeros(1, 4), 3, 1.0)
        assert torch.all(out == 1.0)
        assert calls == ["cond"]

    def test_w1_never_calls_unconditional(self):
        calls = []
        cfg_predict(self._model(1.0, 5.0, calls), torch.zeros(2, 2, 2, 3), None, torch.zeros(1, 4), 3, 1.0)
        assert calls == ["cond"]

    def test_w0_is_unconditional(self):
        calls = []
        out = cfg_predict(self._model(1.0, 5.0, calls), torch.zeros(2, 2, 2, 3), None, torch.zeros(1, 4), 3, 0.0)
        assert torch.all(out == 5.0)

    def test_scalar_probe_w8(self):
        calls = []
        out = cfg_predict(self._model(1.0, 0.0, calls), torch.zeros(2, 2, 2, 3), None, torch.zeros(1, 4), 3, 8.0)
        assert torch.all(out == 8.0)


class TestDdim:
    def setup_method(self):
        self.T = 10
        self.schedule = make_noise_schedule(self.T, 1e-3, 0.03)
        gen = torch.Generator().manual_seed(2)
        self.z = LatentVideo(torch.randn(2, 4, 4, 3, generator=gen, dtype=torch.float64))
        self.ref = ReferenceLatent(torch.zeros(1, 4, 4, 3, dtype=torch.float64))
        self.text = torch.zeros(1, 4, dtype=torch.float64)

    @staticmethod
    def _zero_model(z, ref, text, t):
        return torch.zeros(z.shape[0] + 1, *z.shape[1:], dtype=z.dtype)

    def test_zero_predictor_closed_form(self):
        out = ddim_sample(
            self._zero_model, self.z, self.ref, self.text, self.T,
            GuidanceConfig(scale=1.0), self.schedule, eta=0.0,
        )
        # with eps_hat = 0 the recursion telescopes to z / lambda_T
        expected = self.z.data / self.schedule.lam(self.T)
        assert torch.allclose(out.data, expected, atol=1e-12)

    def test_zero_predictor_per_step_oracle(self):
        out = ddim_sample(
            self._zero_model, self.z, self.ref, self.text, 5,
            GuidanceConfig(scale=1.0), self.schedule, eta=0.0,
        )
        taus = ddim_timesteps(self.T, 5)
        z = self.z.data.clone()
        for i in range(5, 0, -1):
            z = self.schedule.lam(int(taus[i - 1])) * (z / self.schedule.lam(int(taus[i])))
        assert torch.allclose(out.data, z, atol=1e-12)

    def test_single_jump_identity(self):
        c = 0.37

        def const_model(z, ref, text, t):
            return torch.full((z.shape[0] + 1, *z.shape[1:]), c, dtype=z.dtype)

        out = ddim_sample(
            const_model, self.z, self.ref, self.text, 1,
            GuidanceConfig(scale=1.0), self.schedule, eta=0.0,
        )
        lam_T, sig_T = self.schedule.lam(self.T), self.schedule.sigma(self.T)
        expected = (self.z.data - sig_T * c) / lam_T
        assert torch.allclose(out.data, expected, atol=1e-12)

    def test_deterministic_across_runs(self):
        kwargs = dict(steps=5, guidance=GuidanceConfig(scale=2.0), schedule=self.schedule, eta=0.0)
        a = ddim_sample(self._zero_model, self.z, self.ref, self.text, **kwargs)
        b = ddim_sample(self._zero_model, self.z, self.ref, self.text, **kwargs)
        assert torch.equal(a.data, b.data)

    def test_noised_reference_rejected(self):
        noised = ReferenceLatent(self.ref.data, noised=True)
        with pytest.raises(ValueError):
            ddim_sample(self._zero_model, self.z, noised, self.text, 5, GuidanceConfig(), self.schedule)

    def test_steps_exceeding_T_rejected(self):
        with pytest.raises(ValueError):
            ddim_sample(self._zero_model, self.z, self.ref, self.text, 11, GuidanceConfig(), self.schedule)

    def test_nonfinite_aborts(self):
        def nan_model(z, ref, text, t):
            return torch.full((z.shape[0] + 1, *z.shape[1:]), float("nan"), dtype=z.dtype)

        with pytest.raises(FloatingPointError):
            ddim_sample(nan_model, self.z, self.ref, self.text, 5, GuidanceConfig(scale=1.0), self.schedule)


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(scale=-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(condition_drop_probability=1.5)
