import numpy as np
import pytest
import scipy.stats

from lagda.simulate import SimConfig
from lagda.topography import (
    layered_truth_coefficients,
    layered_velocity,
    reduced_params,
    regime_noise,
    simulate_topographic,
    topo_drift,
    topo_params,
    topography_coefficients,
)
from lagda.modes import build_layered_modeset
from lagda.torus import TWO_PI


class TestTopographyCoefficients:
    def test_leading_amplitudes(self):
        h = topography_coefficients(4, h1=1.0, h2=0.5)
        assert h[0] == 0.5 - 0.5j
        assert h[1] == 0.25 - 0.25j

    def test_phase_formula(self):
        # theta = pi/2 gives sin = 1, cos = 0: h_3 = 1/12
        h3 = (np.sin(np.pi / 2) - 1j * np.cos(np.pi / 2)) / (4 * 3**1)
        assert np.isclose(h3, 1.0 / 12.0)

    def test_decay_power(self):
        h_fast = topography_coefficients(8, decay_power=2.0, seed=1)
        assert np.all(np.abs(h_fast[2:]) <= 0.25 / np.arange(3, 9) ** 2 + 1e-12)

    def test_seeded_determinism(self):
        a = topography_coefficients(6, seed=3)
        b = topography_coefficients(6, seed=3)
        assert np.array_equal(a, b)


class TestRegimeNoise:
    def test_regime_one_values(self):
        sigma_v, sigma_u = regime_noise("I", 6)
        assert np.isclose(sigma_v[0], 1 / np.sqrt(2))
        assert np.isclose(sigma_v[1], 1 / (2 * np.sqrt(2)))
        assert np.isclose(sigma_v[2], 1 / (np.sqrt(2) * 9))
        assert np.isclose(sigma_u, 1 / (2 * np.sqrt(2)))

    def test_regime_two_values(self):
        sigma_v, sigma_u = regime_noise("II", 6)
        assert np.isclose(sigma_u, 1 / np.sqrt(2))
        assert np.isclose(sigma_v[0], 1 / (4 * np.sqrt(2)))
        assert np.isclose(sigma_v[3], 1 / (2 * np.sqrt(2) * 16))

    def test_unknown_regime(self):
        with pytest.raises(ValueError):
            regime_noise("III", 6)


class TestDrift:
    def test_psi_drift_at_zero_u(self):
        tp = topo_params("I", 6)
        drift = topo_drift(tp)
        psi = np.zeros(6, dtype=complex)
        psi[0] = 1.0
        du, dpsi = drift(0.0, psi)
        expected = -tp.d_k * psi[0] + 1j * tp.beta * psi[0]
        assert np.isclose(dpsi[0], expected)

    def test_u_decay_without_fluctuations(self):
        tp = topo_params("II", 6)
        drift = topo_drift(tp)
        du, _ = drift(1.7, np.zeros(6, dtype=complex))
        assert np.isclose(du, -tp.d_u * 1.7)

    def test_reduction_keeps_full_drift_when_complete(self):
        tp = topo_params("I", 6)
        rtp = reduced_params(tp, 6)
        d_full = topo_drift(tp)
        d_red = topo_drift(rtp)
        rng = np.random.default_rng(0)
        psi = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        a = d_full(0.4, psi)
        b = d_red(0.4, psi)
        assert np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])

    def test_reduction_truncates(self):
        tp = topo_params("I", 6)
        rtp = reduced_params(tp, 2)
        assert rtp.n_modes == 2
        assert np.array_equal(rtp.topography, tp.topography[:2])


class TestSimulation:
    def test_unforced_fixed_point(self):
        tp = topo_params("I", 6)
        tp = reduced_params(tp, 6)
        quiet = topo_params("I", 6)
        quiet = type(quiet)(
            n_modes=6, d_k=quiet.d_k, d_u=quiet.d_u, beta=quiet.beta,
            topography=quiet.topography, sigma_v=np.zeros(6), sigma_u=0.0,
        )
        cfg = SimConfig(dt=0.01, t_final=2.0, seed=0, sigma_x=0.0, n_tracers=0)
        rec = simulate_topographic(quiet, cfg)
        assert np.all(rec.coeffs == 0.0)

    def test_rotation_conserves_mode_amplitude(self):
        # d = beta = sigma = 0 and no topography: each psi_k rotates at -k*u
        tp = topo_params("I", 4)
        frozen = type(tp)(
            n_modes=4, d_k=1e-300, d_u=1e-300, beta=0.0,
            topography=np.zeros(4, dtype=complex), sigma_v=np.zeros(4),
            sigma_u=0.0,
        )
        psi0 = np.array([1.0 + 0.5j, -0.3 + 0.2j, 0.1j, 0.4])
        init = np.concatenate([[0.8], psi0])
        cfg = SimConfig(
            dt=0.001, t_final=1.0, seed=0, sigma_x=0.0, n_tracers=0,
            initial_coeffs=init,
        )
        rec = simulate_topographic(frozen, cfg)
        amp = np.abs(rec.coeffs[:, 1:])
        assert np.abs(amp - np.abs(psi0)).max() < 1e-8
        # oracle: analytic phase rotation psi_k(t) = psi_k(0) exp(-i k u t)
        k = np.arange(1, 5)
        expected = psi0 * np.exp(-1j * k * 0.8 * rec.times[-1])
        assert np.abs(rec.coeffs[-1, 1:] - expected).max() < 1e-8

    def test_seeded_determinism_and_tracer_wrap(self):
        tp = topo_params("II", 6)
        cfg = SimConfig(dt=0.001, t_final=2.0, seed=5, sigma_x=0.25, n_tracers=4)
        a = simulate_topographic(tp, cfg)
        b = simulate_topographic(tp, cfg)
        assert np.array_equal(a.coeffs, b.coeffs)
        assert np.array_equal(a.tracers.positions, b.tracers.positions)
        a.tracers.validate()

    def test_tracers_feel_zonal_flow(self):
        tp = topo_params("I", 6)
        quiet = type(tp)(
            n_modes=6, d_k=1e-300, d_u=1e-300, beta=0.0,
            topography=np.zeros(6, dtype=complex), sigma_v=np.zeros(6),
            sigma_u=0.0,
        )
        init = np.zeros(7, dtype=complex)
        init[0] = 1.0  # pure uniform zonal flow
        cfg = SimConfig(
            dt=0.001, t_final=1.0, seed=0, sigma_x=0.0, n_tracers=2,
            initial_coeffs=init,
            initial_tracers=np.array([[0.0, 1.0], [3.0, 4.0]]),
        )
        rec = simulate_topographic(quiet, cfg)
        drift_x = rec.tracers.increments[:, :, 0].sum(axis=0)
        assert np.allclose(drift_x, 1.0, atol=1e-12)
        assert np.allclose(rec.tracers.increments[:, :, 1], 0.0)


class TestRegimeSignatures:
    @pytest.mark.slow
    def test_kurtosis_separates_regimes(self):
        # fat tails only in the strongly non-Gaussian regime
        cfg = SimConfig(dt=0.001, t_final=400.0, seed=7, sigma_x=0.25, n_tracers=0)
        kurts = {}
        for regime in ("I", "II"):
            rec = simulate_topographic(topo_params(regime, 6), cfg)
            kurts[regime] = scipy.stats.kurtosis(rec.coeffs[:, 1].real)
        assert kurts["II"] > 0.5
        assert kurts["I"] < 0.5


def test_layered_truth_coefficient_mapping():
    tp = topo_params("I", 3)
    cfg = SimConfig(dt=0.01, t_final=1.0, seed=1, sigma_x=0.25, n_tracers=2)
    rec = simulate_topographic(tp, cfg)
    ms = build_layered_modeset(3)
    truth = layered_truth_coefficients(rec, ms)
    # conjugate symmetry and the v_k = i k psi_k identity
    assert ms.conj_symmetry_residual(truth[5]) < 1e-12
    i_v1 = ms.labels.index("vy_1_0")
    assert np.allclose(truth[:, i_v1], 1j * rec.coeffs[:, 1])
    mf = ms.mean_flow_indices
    assert np.allclose(truth[:, mf[0]], rec.coeffs[:, 0].real)
    # velocity synthesis through the mode set matches the direct formula
    from lagda.modes import eval_velocity

    pts = np.array([[0.3, 2.0], [5.0, 1.0]])
    direct = layered_velocity(rec.coeffs[7, 0].real, rec.coeffs[7, 1:], pts)
    via_ms = eval_velocity(truth[7], ms, pts)
    assert np.abs(direct - via_ms).max() < 1e-12
