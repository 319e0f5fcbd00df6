import numpy as np
import pytest

from lagda.filters import (
    FilterConfig,
    PosteriorGaussian,
    build_observation_matrix,
    interaction_matrix,
    run_filter,
    stationary_diag_covariance,
    step_full_filter,
)
from lagda.metrics import equilibrium_prior
from lagda.modes import (
    LsmParams,
    ModeIndex,
    ModeKind,
    ModeSet,
    build_gb_modeset,
    build_velocity_modeset,
)
from lagda.simulate import ObservationSeries, SimConfig, simulate_coupled

from .oracles import DiscreteKalmanOracle, relative_rms


def single_pair_modeset():
    """One GB conjugate pair at k = (0, 1)."""
    modes = (ModeIndex((0, 1), ModeKind.GB), ModeIndex((0, -1), ModeKind.GB))
    eig = np.array([[-1j, 0.0, 0.0], [1j, 0.0, 0.0]])
    return ModeSet(modes, eig, np.array([1, 0]))


def pair_params(ms, d=0.5, omega=0.8, f=0.1 + 0.05j, sigma=0.6):
    prim = np.nonzero(ms.primary_mask)[0]
    dd = np.full(ms.size, d)
    ww = np.zeros(ms.size)
    ff = np.zeros(ms.size, dtype=complex)
    ss = np.full(ms.size, sigma)
    for m in prim:
        p = ms.conj_pair[m]
        ww[m], ww[p] = omega, -omega
        ff[m], ff[p] = f, np.conj(f)
    return LsmParams(d=dd, omega=ww, f=ff, sigma=ss)


def empty_observations(dt, n):
    times = np.arange(n + 1) * dt
    return ObservationSeries(times, np.zeros((n + 1, 0, 2)), np.zeros((n, 0, 2)))


class TestObservationMatrix:
    def test_single_tracer_at_origin(self):
        ms = build_gb_modeset(1)
        A = build_observation_matrix(np.zeros((1, 2)), ms).matrix
        i = ms.labels.index("gb_0_1")
        assert np.allclose(A[:, i], [-1j, 0.0])

    def test_rebuild_is_bit_exact(self):
        ms = build_gb_modeset(2)
        rng = np.random.default_rng(0)
        pos = rng.uniform(0, 2 * np.pi, size=(5, 2))
        a = build_observation_matrix(pos, ms)
        b = build_observation_matrix(a.positions, ms)
        assert np.array_equal(a.matrix, b.matrix)

    def test_mean_flow_columns(self):
        ms = build_velocity_modeset(1)
        pos = np.array([[0.7, 1.1], [2.0, 3.0]])
        A = build_observation_matrix(pos, ms).matrix
        mfx, mfy = ms.mean_flow_indices
        assert np.allclose(A[0::2, mfx], 1.0) and np.allclose(A[1::2, mfx], 0.0)
        assert np.allclose(A[0::2, mfy], 0.0) and np.allclose(A[1::2, mfy], 1.0)

    def test_gram_diagonal_by_direct_summation(self):
        # oracle: explicit double sum over tracers and components
        ms = build_gb_modeset(2)
        rng = np.random.default_rng(1)
        pos = rng.uniform(0, 2 * np.pi, size=(3, 2))
        A = build_observation_matrix(pos, ms).matrix
        P = A.conj().T @ A
        r = ms.velocity_eigenvectors
        norms = np.abs(r[:, 0]) ** 2 + np.abs(r[:, 1]) ** 2
        assert np.allclose(np.diagonal(P).real, 3 * norms)
        assert np.abs(np.diagonal(P).imag).max() < 1e-12


class TestInteractionMatrix:
    def test_matches_gram_product(self):
        ms = build_gb_modeset(2)
        rng = np.random.default_rng(2)
        pos = rng.uniform(0, 2 * np.pi, size=(4, 2))
        P = interaction_matrix(pos, ms)
        A = build_observation_matrix(pos, ms).matrix
        assert np.abs(P - A.conj().T @ A).max() < 1e-12

    def test_single_tracer_rank_two(self):
        ms = build_gb_modeset(2)
        P = interaction_matrix(np.array([[1.0, 2.0]]), ms)
        assert np.linalg.matrix_rank(P, tol=1e-10) <= 2

    def test_uniform_tracers_offdiagonal_decay(self):
        # normalized divergence-free eigenvectors; 500 uniform tracers
        kmax = 2
        ks = [
            (kx, ky)
            for kx in range(-kmax, kmax + 1)
            for ky in range(-kmax, kmax + 1)
            if (kx, ky) != (0, 0)
        ]
        modes = tuple(ModeIndex(k, ModeKind.GB) for k in ks)
        eig = np.array(
            [
                np.array([-1j * ky, 1j * kx, 0.0]) / np.hypot(kx, ky)
                for kx, ky in ks
            ]
        )
        order = {k: i for i, k in enumerate(ks)}
        pair = np.array([order[(-kx, -ky)] for kx, ky in ks])
        ms = ModeSet(modes, eig, pair)
        rng = np.random.default_rng(3)
        pos = rng.uniform(0, 2 * np.pi, size=(500, 2))
        P = interaction_matrix(pos, ms) / 500.0
        off = P - np.diag(np.diagonal(P))
        assert np.abs(off).max() < 0.2


class TestStationaryDiagCovariance:
    def test_unit_norm_example(self):
        # d = 0.3, sigma = 1, sigma_x = 0.25, L = 25, ||r|| = 1:
        # r = 1/(0.3 + sqrt(0.09 + 400)) = 0.0492556
        ms = build_velocity_modeset(1)
        K = ms.size
        params = LsmParams(
            d=np.full(K, 0.3), omega=np.zeros(K), f=np.zeros(K, dtype=complex),
            sigma=np.ones(K), omega0=(0.0, 0.0), sigma0=np.eye(2),
        )
        r = stationary_diag_covariance(params, ms, 25, 0.25)
        expected = 1.0 / (0.3 + np.sqrt(0.09 + 400.0))
        assert np.allclose(r[: K - 2], expected, rtol=1e-12)
        assert np.isclose(expected, 0.049255624683629345)

    def test_is_riccati_fixed_point(self):
        ms = build_gb_modeset(2)
        from lagda.modes import gb_params

        params = gb_params(ms)
        L, sigma_x = 12, 0.25
        r = stationary_diag_covariance(params, ms, L, sigma_x)
        norms = np.linalg.norm(ms.velocity_eigenvectors, axis=1) ** 2
        rhs = -2 * params.d * r + params.sigma**2 - (L * norms / sigma_x**2) * r**2
        assert np.abs(rhs).max() < 1e-12


@pytest.fixture(scope="module")
def pair_truth():
    ms = single_pair_modeset()
    params = pair_params(ms)
    cfg = SimConfig(dt=1e-4, t_final=2.0, seed=8, sigma_x=0.25, n_tracers=2)
    rec = simulate_coupled(params, ms, cfg)
    return ms, params, rec


class TestFullFilter:
    def test_no_observations_relaxes_to_prior(self):
        ms = single_pair_modeset()
        params = pair_params(ms, d=0.5, omega=0.8, f=0.1 + 0.05j, sigma=0.6)
        dt = 0.002
        tau = 1.0 / params.d[0]
        n = int(round(20 * tau / dt))
        obs = empty_observations(dt, n)
        cfg = FilterConfig(
            sigma_x=0.25,
            mu0=np.zeros(ms.size, dtype=complex),
            r0=np.full(ms.size, 2.0),
        )
        res = run_filter(obs, params, ms, cfg)
        mu_eq, R_eq = equilibrium_prior(params, ms)
        assert np.abs(res.mu[-1] - mu_eq).max() < 1e-3
        assert np.abs(res.r_diag[-1] - np.real(np.diagonal(R_eq))).max() < 1e-3

    @pytest.mark.parametrize("n_tracers", [1, 2])
    def test_matches_discrete_kalman_oracle(self, pair_truth, n_tracers):
        ms, params, rec = pair_truth
        obs = rec.observations(np.arange(n_tracers))
        cfg = FilterConfig(sigma_x=0.25)
        res = run_filter(obs, params, ms, cfg)
        oracle = DiscreteKalmanOracle(params, ms, 0.25, obs.dt)
        means, _ = oracle.run(obs)
        mu_oracle = oracle.to_complex(means)
        assert relative_rms(res.mu, mu_oracle) < 1e-3

    def test_covariance_invariants_along_run(self, pair_truth):
        ms, params, rec = pair_truth
        obs = rec.observations()
        sub = ObservationSeries(
            obs.times[:2001], obs.positions[:2001], obs.increments[:2000]
        )
        cfg = FilterConfig(sigma_x=0.25, cov_storage="dense")
        res = run_filter(sub, params, ms, cfg)
        for j in [0, 500, 1500, 2000]:
            R = res.cov_dense[j]
            assert np.abs(R - R.conj().T).max() < 1e-12
            assert np.linalg.eigvalsh(R).min() >= -1e-10
        assert res.clamp_count == 0
        resid = np.abs(res.mu[:, ms.conj_pair] - np.conj(res.mu)).max()
        assert resid < 1e-10

    def test_step_function_matches_run(self, pair_truth):
        ms, params, rec = pair_truth
        obs = rec.observations()
        cfg = FilterConfig(sigma_x=0.25, cov_storage="dense")
        res = run_filter(obs, params, ms, cfg)
        post = PosteriorGaussian(res.mu[10].copy(), res.cov_dense[10].copy())
        A = build_observation_matrix(obs.positions[10], ms)
        nxt = step_full_filter(post, obs.increments[10], A, params, ms, cfg, obs.dt)
        assert np.allclose(nxt.mu, res.mu[11], atol=1e-14)
        assert np.allclose(nxt.cov, res.cov_dense[11], atol=1e-14)

    def test_checkpointed_covariance_matches_dense(self, pair_truth):
        ms, params, rec = pair_truth
        obs = rec.observations()
        sub = ObservationSeries(
            obs.times[:301], obs.positions[:301], obs.increments[:300]
        )
        dense = run_filter(sub, params, ms, FilterConfig(sigma_x=0.25, cov_storage="dense"))
        chk = run_filter(
            sub, params, ms,
            FilterConfig(sigma_x=0.25, cov_storage="checkpoint", checkpoint_stride=37),
        )
        seen = {}
        for j, R in chk.covariance_backward():
            seen[j] = R.copy()
        assert sorted(seen) == list(range(301))
        for j in range(301):
            assert np.array_equal(seen[j], dense.cov_dense[j])


class TestDiagonalVariants:
    def test_diag_riccati_relaxes_to_stationary(self):
        ms = build_gb_modeset(1)
        from lagda.modes import gb_params

        params = gb_params(ms)
        dt, n, L = 0.002, 20000, 9
        rng = np.random.default_rng(5)
        pos = rng.uniform(0, 2 * np.pi, size=(L, 2))
        times = np.arange(n + 1) * dt
        obs = ObservationSeries(
            times,
            np.broadcast_to(pos, (n + 1, L, 2)).copy(),
            np.zeros((n, L, 2)),
        )
        cfg = FilterConfig(sigma_x=0.25, variant="diag_riccati")
        res = run_filter(obs, params, ms, cfg)
        target = stationary_diag_covariance(params, ms, L, 0.25)
        assert np.abs(res.r_diag[-1] - target).max() < 1e-6

    def test_randomized_full_selection_equals_diag_constant(self, pair_truth):
        ms, params, rec = pair_truth
        obs = rec.observations()
        sub = ObservationSeries(
            obs.times[:501], obs.positions[:501], obs.increments[:500]
        )
        base = run_filter(
            sub, params, ms, FilterConfig(sigma_x=0.25, variant="diag_constant")
        )
        rand = run_filter(
            sub, params, ms,
            FilterConfig(sigma_x=0.25, variant="randomized", l_prime=2, rescale=True),
        )
        assert np.array_equal(base.mu, rand.mu)

    def test_randomized_determinism(self, pair_truth):
        ms, params, rec = pair_truth
        obs = rec.observations()
        sub = ObservationSeries(
            obs.times[:201], obs.positions[:201], obs.increments[:200]
        )
        cfg = FilterConfig(
            sigma_x=0.25, variant="randomized", l_prime=1, selection_seed=4
        )
        a = run_filter(sub, params, ms, cfg)
        b = run_filter(sub, params, ms, cfg)
        assert np.array_equal(a.mu, b.mu)

    def test_full_and_diag_agree_for_single_pair(self):
        # the pair's cross term only averages out for many uniform tracers,
        # so this runs with L = 16 over 20 time units
        ms = single_pair_modeset()
        params = pair_params(ms)
        cfg = SimConfig(dt=0.002, t_final=20.0, seed=8, sigma_x=0.25, n_tracers=16)
        rec = simulate_coupled(params, ms, cfg)
        obs = rec.observations()
        full = run_filter(obs, params, ms, FilterConfig(sigma_x=0.25))
        diag = run_filter(
            obs, params, ms, FilterConfig(sigma_x=0.25, variant="diag_riccati")
        )
        assert relative_rms(diag.mu, full.mu) < 0.02

    def test_l_prime_exceeding_tracers_rejected(self, pair_truth):
        ms, params, rec = pair_truth
        obs = rec.observations()
        cfg = FilterConfig(sigma_x=0.25, variant="randomized", l_prime=5)
        with pytest.raises(ValueError):
            run_filter(obs, params, ms, cfg)


class TestFusedKernels:
    def test_filter_and_smoother_paths_agree(self, monkeypatch):
        import lagda.filters as F
        from lagda.modes import build_gb_modeset, gb_params
        from lagda.smoothing import run_backward_smoother, smooth_and_sample

        ms = build_gb_modeset(2)
        params = gb_params(ms)
        sim = SimConfig(dt=0.002, t_final=2.0, seed=2, sigma_x=0.25, n_tracers=8)
        rec = simulate_coupled(params, ms, sim)
        obs = rec.observations()
        from lagda.filters import stationary_diag_covariance

        cfg = FilterConfig(
            sigma_x=0.25, cov_storage="checkpoint", checkpoint_stride=53,
            r0=stationary_diag_covariance(params, ms, 8, 0.25),
        )
        fast = run_filter(obs, params, ms, cfg)
        sm_fast, samp_fast = smooth_and_sample(fast, n_samples=2, seed=5)
        monkeypatch.setattr(F, "USE_KERNELS", False)
        ref = run_filter(obs, params, ms, cfg)
        sm_ref, samp_ref = smooth_and_sample(ref, n_samples=2, seed=5)
        assert np.abs(fast.mu - ref.mu).max() < 1e-11
        assert np.abs(fast.r_diag - ref.r_diag).max() < 1e-11
        assert np.abs(sm_fast.mu_s - sm_ref.mu_s).max() < 1e-9
        assert np.abs(sm_fast.rs_diag - sm_ref.rs_diag).max() < 1e-9
        assert np.abs(samp_fast - samp_ref).max() < 1e-8
