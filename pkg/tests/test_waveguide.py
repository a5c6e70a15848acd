import numpy as np
import pytest
from dataclasses import replace

from conftest import isovelocity_env
from oracles import ideal_waveguide_wavenumbers
from uwaloc import waveguide
from uwaloc.waveguide import ArrayGeometry, NoModesError, SedimentLayer


class TestEnvironment:
    def test_rejects_bad_depths(self):
        with pytest.raises(ValueError):
            isovelocity_env(depth=-1.0)
        env = isovelocity_env()
        with pytest.raises(ValueError):
            replace(env, termination_depth_m=env.water_depth_m)
        with pytest.raises(ValueError):
            replace(env, ssp_depths_m=(0.0, 100.0))  # does not reach the seabed
        with pytest.raises(ValueError):
            replace(env, ssp_speeds_m_s=(1500.0, -1.0))

    def test_rejects_bad_layers(self):
        with pytest.raises(ValueError):
            SedimentLayer(10.0, 0.0, 1600.0, 1600.0)
        with pytest.raises(ValueError):
            SedimentLayer(10.0, 1.5, 1600.0, 1600.0, -0.1)

    def test_profile_layers(self, swellex_env):
        c, rho, alpha = swellex_env.profile(np.array([100.0, 216.5, 217.0, 250.0, 400.0]))
        np.testing.assert_allclose(rho, [1.0, 1.0, 1.76, 2.06, 2.06])
        assert alpha[0] == 0.0 and alpha[2] == 0.2
        # linear gradient inside the first sediment layer
        np.testing.assert_allclose(c[2], 1572.37 + (1593.02 - 1572.37) * 0.5 / 23.5)

    def test_config_round_trip(self, swellex_env, tmp_path):
        p = tmp_path / "env.ini"
        waveguide.save_environment(swellex_env, p)
        assert waveguide.load_environment(p) == swellex_env

    def test_array_validation(self, swellex_env):
        with pytest.raises(ValueError):
            ArrayGeometry((10.0, 5.0))
        with pytest.raises(ValueError):
            ArrayGeometry((10.0, 300.0)).check_within(swellex_env)


class TestPerturbSsp:
    def test_zero_delta_is_identity(self, swellex_env):
        out = waveguide.perturb_ssp(swellex_env)
        assert out.ssp_speeds_m_s == swellex_env.ssp_speeds_m_s

    def test_pivot_at_training_depth(self, swellex_env):
        out = waveguide.perturb_ssp(replace(swellex_env, ssp_gradient_delta=0.7))
        assert out.ssp_speeds_m_s[-1] == pytest.approx(swellex_env.ssp_speeds_m_s[-1], abs=1e-12)
        assert out.ssp_gradient_delta == 0.0

    def test_surface_shift(self, swellex_env):
        out = waveguide.perturb_ssp(replace(swellex_env, ssp_gradient_delta=0.2165))
        assert out.ssp_speeds_m_s[0] == pytest.approx(swellex_env.ssp_speeds_m_s[0] - 0.2165, abs=1e-12)


class TestSolveModes:
    def test_rigid_bottom_oracle(self):
        # a fast bottom keeps the bottom-trapped modes out of the propagating band
        modes = waveguide.solve_modes(isovelocity_env(bottom_c=5000.0), 109.0)
        expected = ideal_waveguide_wavenumbers(1500.0, 216.5, 109.0, 10)
        np.testing.assert_allclose(modes.wavenumbers.real[:10], expected, rtol=1e-3)

    def test_no_modes_in_thin_channel(self):
        env = isovelocity_env(depth=3.0, bottom_density=1.0, below=20.0)
        with pytest.raises(NoModesError):
            waveguide.solve_modes(env, 109.0, grid_points=500)

    def test_grid_convergence(self, swellex_env):
        a = waveguide.solve_modes(swellex_env, 109.0, grid_points=4166)
        b = waveguide.solve_modes(swellex_env, 109.0, grid_points=8331)
        assert abs(b.wavenumbers[0].real / a.wavenumbers[0].real - 1) < 1e-4

    def test_invariants(self, swellex_modes):
        k = swellex_modes.wavenumbers
        assert swellex_modes.mode_count > 5
        assert np.all(np.diff(k.real) < 0)
        assert np.all(k.imag > 0)  # exp(ikr) decays with range
        assert swellex_modes.orthonormality_residual() <= 1e-6

    def test_deterministic(self, swellex_env, swellex_modes):
        again = waveguide.solve_modes(swellex_env, 109.0)
        np.testing.assert_array_equal(again.wavenumbers, swellex_modes.wavenumbers)
        np.testing.assert_array_equal(again.mode_functions, swellex_modes.mode_functions)

    def test_preconditions(self, swellex_env):
        with pytest.raises(ValueError):
            waveguide.solve_modes(swellex_env, 109.0, grid_points=100)
        with pytest.raises(ValueError):
            waveguide.solve_modes(swellex_env, 0.0)

    def test_deepen_shifts_seabed(self, swellex_env):
        env = waveguide.deepen(swellex_env, 4.0)
        assert env.water_depth_m == pytest.approx(220.5)
        assert env.profile(np.array([219.0]))[1][0] == 1.0
        assert waveguide.deepen(swellex_env, 0.0) is swellex_env


class TestPressureField:
    def test_linear_in_excitation(self, swellex_modes, array21):
        ex = waveguide.sample_modes(swellex_modes, [9.0])[:, 0]
        p1 = waveguide.mode_sum(swellex_modes, ex, 1.0, [3000.0], array21)
        p2 = waveguide.mode_sum(swellex_modes, 2 * ex, 1.0, [3000.0], array21)
        np.testing.assert_array_equal(p2, 2 * p1)

    def test_reciprocity(self, swellex_modes):
        a, b = 30.0, 150.0
        pab = waveguide.pressure_field(swellex_modes, b, 2500.0, ArrayGeometry((a,)))
        pba = waveguide.pressure_field(swellex_modes, a, 2500.0, ArrayGeometry((b,)))
        np.testing.assert_allclose(pab, pba, rtol=1e-10)

    def test_decays_with_range(self, swellex_modes, array21):
        near = np.abs(waveguide.pressure_field(swellex_modes, 9.0, 1000.0, array21)).mean()
        far = np.abs(waveguide.pressure_field(swellex_modes, 9.0, 9000.0, array21)).mean()
        assert far < near

    def test_range_must_be_positive(self, swellex_modes, array21):
        with pytest.raises(ValueError):
            waveguide.pressure_field(swellex_modes, 9.0, 0.0, array21)
        with pytest.raises(ValueError):
            waveguide.pressure_field(swellex_modes, 300.0, 100.0, array21)

    def test_matched_calls_bit_identical(self, swellex_modes, array21):
        r = [1000.0, 4321.0]
        np.testing.assert_array_equal(waveguide.pressure_fields(swellex_modes, 9.0, r, array21),
                                      waveguide.pressure_fields(swellex_modes, 9.0, r, array21))
