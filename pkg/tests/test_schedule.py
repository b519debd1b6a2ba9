import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffstyle.errors import ScheduleError
from diffstyle.schedule import (NoiseSchedule, ddpm_sigma, dump_params,
                                forward_diffuse, load_params,
                                make_linear_schedule, respace)


def make_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


class TestLinearSchedule:
    def test_endpoints(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        assert s.betas[0] == 1e-4
        assert s.betas[-1] == 0.02
        assert s.T == 1000

    def test_constant_beta_products(self):
        s = make_linear_schedule(2, 0.5, 0.5)
        np.testing.assert_allclose(s.alpha_bars, [0.5, 0.25], rtol=0, atol=0)

    def test_alpha_bar_matches_running_product_oracle(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        run = 1.0
        oracle = np.empty(1000)
        for i, beta in enumerate(s.betas):
            run *= 1.0 - beta
            oracle[i] = run
        np.testing.assert_allclose(s.alpha_bars, oracle, rtol=1e-12)

    def test_alpha_consistency_is_exact(self):
        s = make_linear_schedule(200, 1e-4, 0.02)
        # alphas are derived as 1 - betas, so this must hold bitwise
        assert np.all(s.alphas == 1.0 - s.betas)

    def test_alpha_bar_strictly_decreasing(self):
        s = make_linear_schedule(500, 1e-4, 0.02)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[0] == s.alphas[0]
        assert 0 < s.alpha_bars[-1] < s.alpha_bars[0] <= 1

    @pytest.mark.parametrize("bad", [dict(T=1), dict(T=0), dict(T=-3),
                                     dict(beta_start=0.0), dict(beta_end=1.0),
                                     dict(beta_start=0.5, beta_end=0.1)])
    def test_rejects_invalid_parameters(self, bad):
        kwargs = dict(T=100, beta_start=1e-4, beta_end=0.02)
        kwargs.update(bad)
        with pytest.raises(ScheduleError):
            make_linear_schedule(**kwargs)

    def test_schedule_arrays_are_readonly(self):
        s = make_linear_schedule(10, 1e-4, 0.02)
        with pytest.raises(ValueError):
            s.betas[0] = 0.5


class TestRespace:
    def test_uniform_stride_map(self, base_schedule):
        r = respace(base_schedule, 50)
        np.testing.assert_array_equal(r.index_map, np.arange(0, 1000, 20))
        assert r.T_prime == 50

    def test_identity_respacing(self, base_schedule):
        r = respace(base_schedule, base_schedule.T)
        np.testing.assert_array_equal(r.index_map, np.arange(1000))
        assert np.all(r.betas_prime == base_schedule.betas)

    def test_preserves_cumulative_products(self, base_schedule):
        r = respace(base_schedule, 50)
        recomputed = np.cumprod(1.0 - r.betas_prime)
        mapped = base_schedule.alpha_bars[r.index_map]
        np.testing.assert_allclose(recomputed, mapped, rtol=1e-12)

    @pytest.mark.parametrize("bad_T", [0, -1, 1001])
    def test_rejects_out_of_range(self, base_schedule, bad_T):
        with pytest.raises(ScheduleError):
            respace(base_schedule, bad_T)

    @given(T_prime=st.integers(min_value=1, max_value=200))
    @settings(max_examples=25, deadline=None)
    def test_map_strictly_increasing_any_size(self, T_prime):
        s = make_linear_schedule(200, 1e-4, 0.02)
        r = respace(s, T_prime)
        assert len(r.index_map) == T_prime
        assert np.all(np.diff(r.index_map) > 0) or T_prime == 1
        np.testing.assert_allclose(
            np.cumprod(1.0 - r.betas), s.alpha_bars[r.index_map], rtol=1e-12)

    def test_base_timestep_mapping(self, base_schedule):
        r = respace(base_schedule, 50)
        assert r.base_timestep(0) == 0
        assert r.base_timestep(49) == 980
        assert base_schedule.base_timestep(7) == 7


class TestForwardDiffuse:
    def test_full_signal_retention_returns_x0(self):
        s = make_from_betas([0.0])  # degenerate abar == 1 case
        x0 = torch.tensor([1.0, -0.5])
        eps = torch.tensor([3.0, 3.0])
        out = forward_diffuse(s, x0, 0, eps)
        assert torch.equal(out, x0)

    def test_zero_noise_scales_deterministically(self):
        s = make_from_betas([0.75])  # abar = 0.25
        x0 = torch.tensor([2.0])
        out = forward_diffuse(s, x0, 0, torch.zeros(1))
        np.testing.assert_allclose(out.numpy(), [1.0], rtol=1e-15)

    def test_hand_evaluated_mixture(self):
        s = make_from_betas([0.75])  # abar = 0.25
        out = forward_diffuse(s, torch.tensor([1.0], dtype=torch.float64), 0,
                              torch.tensor([1.0], dtype=torch.float64))
        np.testing.assert_allclose(out.numpy(), [0.5 + np.sqrt(0.75)], rtol=1e-15)

    def test_linearity_in_both_arguments(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        gen = np.random.default_rng(1)
        x0 = torch.from_numpy(gen.standard_normal(8))
        eps = torch.from_numpy(gen.standard_normal(8))
        t = 57
        both = forward_diffuse(s, x0, t, eps)
        split = forward_diffuse(s, x0, t, torch.zeros(8)) \
            + forward_diffuse(s, torch.zeros(8), t, eps)
        np.testing.assert_allclose(both.numpy(), split.numpy(), rtol=1e-12)

    def test_coefficients_preserve_unit_variance(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        coeff = np.sqrt(s.alpha_bars) ** 2 + np.sqrt(1 - s.alpha_bars) ** 2
        np.testing.assert_allclose(coeff, 1.0, atol=1e-15)

    def test_shape_mismatch_rejected(self):
        s = make_linear_schedule(10, 1e-4, 0.02)
        with pytest.raises(ScheduleError):
            forward_diffuse(s, torch.zeros(3), 0, torch.zeros(4))

    def test_timestep_out_of_range(self):
        s = make_linear_schedule(10, 1e-4, 0.02)
        with pytest.raises(ScheduleError):
            forward_diffuse(s, torch.zeros(3), 10, torch.zeros(3))


class TestDdpmSigma:
    def test_flat_alpha_bar_gives_zero(self):
        s = make_from_betas([0.5, 0.0])  # abar stays at 0.5
        assert ddpm_sigma(s, 1) == 0.0

    def test_hand_evaluated_value(self):
        s = make_from_betas([0.5, 0.5])  # abar = [0.5, 0.25]
        np.testing.assert_allclose(ddpm_sigma(s, 1), np.sqrt(1.0 / 3.0), rtol=1e-12)

    def test_zero_at_origin_by_convention(self):
        s = make_linear_schedule(10, 1e-4, 0.02)
        assert ddpm_sigma(s, 0) == 0.0

    def test_radicand_stays_nonnegative(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        for t in range(1, s.T):
            sigma = ddpm_sigma(s, t)
            assert sigma ** 2 <= 1.0 - s.alpha_bars[t - 1] + 1e-15

    def test_out_of_range(self):
        s = make_linear_schedule(10, 1e-4, 0.02)
        with pytest.raises(ScheduleError):
            ddpm_sigma(s, 10)


class TestParamsFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "schedule.txt"
        dump_params(path, T=1000, beta_start=1e-4, beta_end=0.02, T_prime=50)
        params = load_params(path)
        assert params == {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02,
                          "T_prime": 50}
        rebuilt = make_linear_schedule(params["T"], params["beta_start"],
                                       params["beta_end"])
        assert rebuilt.T == 1000

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "schedule.txt"
        path.write_text("T = 10\nwhatever = 3\n")
        with pytest.raises(ScheduleError):
            load_params(path)
