"""Conditional-Gaussian Lagrangian filters.

Given tracer increments dX = A(X) U dt + sigma_x dW with A built from the
current tracer positions, the posterior of the flow coefficients is Gaussian
with closed moment equations

    d mu = (F + Lambda mu) dt + sigma_x^-2 R A^* (dX - A mu dt)
    dR   = (Lambda R + R Lambda^* + Q - sigma_x^-2 R A^* A R) dt.

Four variants are provided: the full matrix filter, a diagonal-covariance
filter that evolves only the Riccati diagonal, a constant-diagonal filter
frozen at the mean-field stationary value, and a randomized-observation
filter that redraws a small tracer subset every step with a sqrt(L/L')
gain rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import equilibrium_prior
from .modes import LsmParams, ModeSet, mean_flow_drift_matrix
from .simulate import ObservationSeries

try:
    from . import _kernels
except ImportError:  # numba unavailable; the numpy reference path still works
    _kernels = None

#: Toggle for the numba-fused inner loops (tests flip this to compare paths).
USE_KERNELS = True

__all__ = [
    "ObservationMatrix",
    "PosteriorGaussian",
    "FilterConfig",
    "FilterResult",
    "build_observation_matrix",
    "interaction_matrix",
    "stationary_diag_covariance",
    "step_full_filter",
    "run_filter",
]

VARIANTS = ("full", "diag_riccati", "diag_constant", "randomized")


@dataclass(frozen=True)
class ObservationMatrix:
    """2L x K observation matrix together with the positions that built it."""

    matrix: np.ndarray
    positions: np.ndarray


def _observation_blocks(positions, ms: ModeSet):
    """Phase matrix (L, K) and the two velocity eigenvector rows."""
    phases = np.exp(1j * (np.asarray(positions, dtype=float) @ ms.wavenumbers.T))
    r = ms.velocity_eigenvectors
    return phases, r[:, 0], r[:, 1]


def build_observation_matrix(positions, ms: ModeSet) -> ObservationMatrix:
    """Observation matrix rows: per tracer, the x then y velocity components.

    Entry ((2l + c), m) = exp(i k_m . x_l) * r_m[c]; mean-flow columns reduce
    to constant (1, 0) / (0, 1) blocks.
    """
    positions = np.asarray(positions, dtype=float)
    phases, rx, ry = _observation_blocks(positions, ms)
    L = positions.shape[0]
    A = np.empty((2 * L, ms.size), dtype=complex)
    A[0::2] = phases * rx
    A[1::2] = phases * ry
    return ObservationMatrix(A, positions.copy())


def interaction_matrix(positions, ms: ModeSet) -> np.ndarray:
    """Hermitian mode-interaction matrix P = A^* A.

    Entry (m, n) = sum_l exp(i (k_n - k_m) . x_l) <r_m, r_n>; the diagonal is
    L ||r_m||^2 regardless of the positions.
    """
    phases, rx, ry = _observation_blocks(positions, ms)
    W = np.conj(rx)[:, None] * rx[None, :] + np.conj(ry)[:, None] * ry[None, :]
    G = phases.conj().T @ phases
    return W * G


def _p_diag(ms: ModeSet, n_tracers: float) -> np.ndarray:
    r = ms.velocity_eigenvectors
    return n_tracers * (np.abs(r[:, 0]) ** 2 + np.abs(r[:, 1]) ** 2)


def stationary_diag_covariance(params: LsmParams, ms: ModeSet,
                               n_tracers: float, sigma_x: float) -> np.ndarray:
    """Mean-field stationary diagonal posterior covariance.

    Solves 0 = -2 d r + sigma^2 - sigma_x^-2 P_kk r^2 per mode with
    P_kk = n_tracers * ||r_k||^2 (the exact diagonal of A^* A under uniformly
    distributed tracers), giving

        r = sigma^2 / (d + sqrt(d^2 + P_kk sigma^2 / sigma_x^2)).
    """
    p_kk = _p_diag(ms, n_tracers)
    s2 = params.sigma**2
    d = params.d
    return s2 / (d + np.sqrt(d**2 + p_kk * s2 / sigma_x**2))


_stationary_diag = stationary_diag_covariance


@dataclass
class PosteriorGaussian:
    """Gaussian posterior state: complex mean and covariance (full or diagonal)."""

    mu: np.ndarray
    cov: np.ndarray
    time: float = 0.0

    @property
    def diag(self) -> np.ndarray:
        return np.real(np.diagonal(self.cov)) if self.cov.ndim == 2 else self.cov

    def check(self, ms: ModeSet, herm_tol: float = 1e-12, eig_tol: float = 1e-10):
        """Verify Hermitian/PSD covariance and conjugate-symmetric mean."""
        if self.cov.ndim == 2:
            if np.abs(self.cov - self.cov.conj().T).max() > herm_tol:
                raise ValueError("covariance is not Hermitian")
            if np.linalg.eigvalsh(self.cov).min() < -eig_tol:
                raise ValueError("covariance is not PSD")
        elif np.any(self.cov <= 0):
            raise ValueError("diagonal covariance must be positive")
        if ms.conj_symmetry_residual(self.mu) > 1e-10:
            raise ValueError("posterior mean breaks conjugate symmetry")


@dataclass
class FilterConfig:
    """Variant selection and numerical knobs for a filter run."""

    sigma_x: float
    variant: str = "full"
    jitter: float = 1e-10
    l_prime: int | None = None
    rescale: bool = True
    selection_seed: int = 0
    mu0: np.ndarray | None = None
    r0: np.ndarray | None = None
    cov_storage: str = "auto"  # auto | dense | checkpoint
    checkpoint_stride: int = 0  # 0 = sqrt(n_steps)
    cov_memory_budget: float = 2.5e8  # bytes allowed for dense storage

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.sigma_x <= 0:
            raise ValueError("sigma_x must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if self.variant == "randomized" and (self.l_prime is None or self.l_prime < 1):
            raise ValueError("randomized variant needs l_prime >= 1")


class _DriftOps:
    """Applies Lambda (diagonal plus 2x2 mean-flow block) and builds Q."""

    def __init__(self, params: LsmParams, ms: ModeSet):
        self.lam = params.lam()
        self.f = params.f.copy()
        mf = ms.mean_flow_indices
        self.mf = mf if mf.size else None
        self.ab = params.omega0 if params.omega0 is not None else (0.0, 0.0)
        q = np.diag((params.sigma**2).astype(complex))
        if self.mf is not None and params.sigma0 is not None:
            q[np.ix_(mf, mf)] = params.sigma0 @ params.sigma0.T
        self.q = q
        self.q_diag = np.real(np.diagonal(q)).copy()

    def vec(self, u):
        out = self.lam * u
        if self.mf is not None:
            a, b = self.ab
            out[self.mf[0]] += a * u[self.mf[1]]
            out[self.mf[1]] += b * u[self.mf[0]]
        return out

    def mat_left(self, R):
        out = self.lam[:, None] * R
        if self.mf is not None:
            a, b = self.ab
            out[self.mf[0]] += a * R[self.mf[1]]
            out[self.mf[1]] += b * R[self.mf[0]]
        return out

    def mat_right(self, R):
        out = R * np.conj(self.lam)[None, :]
        if self.mf is not None:
            a, b = self.ab
            out[:, self.mf[0]] += a * R[:, self.mf[1]]
            out[:, self.mf[1]] += b * R[:, self.mf[0]]
        return out

    def dense(self, K):
        M = np.diag(self.lam)
        if self.mf is not None:
            a, b = self.ab
            M[self.mf[0], self.mf[1]] += a
            M[self.mf[1], self.mf[0]] += b
        return M


def _mirror_cov(R, pair):
    """Average R with its conjugate-pair image; keeps Hermitian structure."""
    return 0.5 * (R + np.conj(R[np.ix_(pair, pair)]))


def _psd_guard(R, jitter):
    """Cholesky-gated PSD safeguard.

    Returns (R, logdet, clamped).  When Cholesky succeeds the matrix is left
    untouched and the log-determinant is read off the factor; otherwise the
    eigenvalues are clamped at ``jitter`` and the matrix rebuilt.
    """
    try:
        c = np.linalg.cholesky(R)
        logdet = 2.0 * np.sum(np.log(np.real(np.diagonal(c))))
        return R, float(logdet), False
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(R)
        w = np.maximum(w, jitter)
        R = (V * w) @ V.conj().T
        with np.errstate(divide="ignore"):
            logdet = float(np.sum(np.log(w)))
        return R, logdet, True


class _FullState:
    """Mutable state of the full-covariance recursion (mean optional)."""

    def __init__(self, params, ms, cfg, dt, with_mean=True):
        self.ops = _DriftOps(params, ms)
        self.ms = ms
        self.cfg = cfg
        self.dt = dt
        self.sxi2 = 1.0 / cfg.sigma_x**2
        r = ms.velocity_eigenvectors
        self.rx, self.ry = r[:, 0].copy(), r[:, 1].copy()
        self.w_gram = (
            np.conj(self.rx)[:, None] * self.rx[None, :]
            + np.conj(self.ry)[:, None] * self.ry[None, :]
        )
        self.kT = ms.wavenumbers.T.copy()
        # integer wavenumbers for the phase power tables in the fused kernels
        self.kx = np.ascontiguousarray(np.rint(ms.wavenumbers[:, 0]).astype(np.int64))
        self.ky = np.ascontiguousarray(np.rint(ms.wavenumbers[:, 1]).astype(np.int64))
        self.pair = ms.conj_pair
        self.with_mean = with_mean
        self.fused = (
            _kernels is not None and USE_KERNELS and ms.mean_flow_indices.size == 0
        )

    def advance_cov(self, R, positions):
        """One covariance step; independent of the mean.

        The fused path shares every arithmetic step (including the guard)
        with the fused forward pass, so checkpoint refills reproduce the
        forward covariance sequence bit-exactly.
        """
        if self.fused:
            return _kernels._cov_advance(
                R, positions, self.kx, self.ky, self.w_gram, self.ops.lam,
                self.ops.q_diag, self.dt, self.sxi2, self.pair, self.cfg.jitter,
            )
        phases = np.exp(1j * (positions @ self.kT))
        G = phases.conj().T @ phases
        P = self.w_gram * G
        RP = R @ P
        dR = self.ops.mat_left(R) + self.ops.mat_right(R) + self.ops.q \
            - self.sxi2 * (RP @ R)
        R_new = R + self.dt * dR
        R_new = 0.5 * (R_new + R_new.conj().T)
        R_new = _mirror_cov(R_new, self.pair)
        return _psd_guard(R_new, self.cfg.jitter)

    def advance(self, mu, R, positions, increments, gain_scale=1.0):
        if self.fused:
            mu_new, R_pre = _kernels.full_step(
                mu, R, positions, increments, self.kx, self.ky, self.rx,
                self.ry, self.w_gram, self.ops.lam, self.ops.f,
                self.ops.q_diag, self.dt, self.sxi2, gain_scale, self.pair,
            )
            R_new, logdet, clamped = _psd_guard(R_pre, self.cfg.jitter)
            return mu_new, R_new, logdet, clamped
        phases = np.exp(1j * (positions @ self.kT))
        vel_x = phases @ (mu * self.rx)
        vel_y = phases @ (mu * self.ry)
        innov_x = increments[:, 0] - vel_x * self.dt
        innov_y = increments[:, 1] - vel_y * self.dt
        a_innov = np.conj(self.rx) * (phases.conj().T @ innov_x) + np.conj(
            self.ry
        ) * (phases.conj().T @ innov_y)
        mu_new = (
            mu
            + self.dt * (self.ops.f + self.ops.vec(mu))
            + gain_scale * self.sxi2 * (R @ a_innov)
        )
        mu_new = self.ms.mirror(mu_new)

        G = phases.conj().T @ phases
        P = self.w_gram * G
        RP = R @ P
        dR = self.ops.mat_left(R) + self.ops.mat_right(R) + self.ops.q \
            - self.sxi2 * (RP @ R)
        R_new = R + self.dt * dR
        R_new = 0.5 * (R_new + R_new.conj().T)
        R_new = _mirror_cov(R_new, self.pair)
        R_new, logdet, clamped = _psd_guard(R_new, self.cfg.jitter)
        return mu_new, R_new, logdet, clamped


def step_full_filter(post: PosteriorGaussian, increments, A: ObservationMatrix,
                     params: LsmParams, ms: ModeSet, cfg: FilterConfig,
                     dt: float) -> PosteriorGaussian:
    """Single explicit-Euler step of the full filter.

    ``A`` must be built from the pre-step positions and ``increments`` holds
    the torus-minimal tracer displacements over the step.

    Raises:
        FloatingPointError: on a non-finite result.
    """
    state = _FullState(params, ms, cfg, dt)
    mu, R, _, _ = state.advance(
        post.mu, np.asarray(post.cov, dtype=complex), A.positions,
        np.asarray(increments, dtype=float),
    )
    if not np.all(np.isfinite(mu.view(np.float64))):
        raise FloatingPointError("non-finite posterior mean after step")
    return PosteriorGaussian(mu, R, post.time + dt)


class FilterResult:
    """Posterior series produced by ``run_filter``.

    Stores the mean series, the covariance diagonal, the covariance
    log-determinant, clamp diagnostics, and either the dense covariance
    series or periodic checkpoints from which any covariance can be
    regenerated bit-exactly (the covariance recursion does not involve the
    mean).
    """

    def __init__(self, times, mu, r_diag, logdet_r, variant, cfg, params, ms,
                 obs, cov_dense=None, checkpoints=None, clamp_count=0):
        self.times = times
        self.mu = mu
        self.r_diag = r_diag
        self.logdet_r = logdet_r
        self.variant = variant
        self.cfg = cfg
        self.params = params
        self.ms = ms
        self.obs = obs
        self.cov_dense = cov_dense
        self.checkpoints = checkpoints
        self.clamp_count = clamp_count

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def is_diagonal(self) -> bool:
        return self.variant in ("diag_riccati", "diag_constant", "randomized")

    def terminal(self) -> PosteriorGaussian:
        cov = self.covariance_at(self.n_steps)
        return PosteriorGaussian(self.mu[-1].copy(), cov, float(self.times[-1]))

    def covariance_at(self, j: int) -> np.ndarray:
        """Covariance at step j (diagonal vector for diagonal variants)."""
        if self.is_diagonal:
            return self.r_diag[j].copy()
        if self.cov_dense is not None:
            return self.cov_dense[j].copy()
        for jj, R in self.covariance_backward():
            if jj == j:
                return R.copy()
        raise IndexError(j)

    def covariance_backward(self):
        """Yield (j, covariance at step j) for j = n_steps down to 0.

        For checkpointed full-covariance runs each segment is regenerated by
        re-running the covariance recursion from the previous checkpoint,
        reproducing the forward pass bit-exactly.
        """
        n = self.n_steps
        if self.is_diagonal:
            for j in range(n, -1, -1):
                yield j, self.r_diag[j]
            return
        if self.cov_dense is not None:
            for j in range(n, -1, -1):
                yield j, self.cov_dense[j]
            return
        state = _FullState(self.params, self.ms, self.cfg, self.dt)
        marks = sorted(self.checkpoints)
        positions = self.obs.positions
        for seg in range(len(marks) - 1, 0, -1):
            j0, j1 = marks[seg - 1], marks[seg]
            buf = [self.checkpoints[j0]]
            R = self.checkpoints[j0]
            for j in range(j0, j1):
                R, _, _ = state.advance_cov(R, positions[j])
                buf.append(R)
            for j in range(j1, j0, -1):
                yield j, buf[j - j0]
        yield 0, self.checkpoints[0]


def _initial_state(params, ms, cfg):
    mu_eq, R_eq = equilibrium_prior(params, ms)
    mu0 = mu_eq if cfg.mu0 is None else np.asarray(cfg.mu0, dtype=complex).copy()
    if cfg.r0 is not None:
        r0 = np.asarray(cfg.r0)
        R0 = np.diag(r0.astype(complex)) if r0.ndim == 1 else r0.astype(complex)
    else:
        R0 = R_eq
    return ms.mirror(mu0), R0


def run_filter(obs: ObservationSeries, params: LsmParams, ms: ModeSet,
               cfg: FilterConfig, dt: float | None = None) -> FilterResult:
    """Run one filter variant over an observation series.

    Args:
        obs: tracer positions and increments (increments may be empty for the
            no-observation limit).
        params: LSM coefficients aligned with ``ms``.
        ms: mode set.
        cfg: variant and numerics.
        dt: override the observation spacing (defaults to obs.dt).

    Returns:
        FilterResult with posterior mean/covariance series and diagnostics.
    """
    params.validate_for(ms)
    dt = obs.dt if dt is None else dt
    n = obs.n_steps
    L = obs.n_tracers
    K = ms.size
    mu0, R0 = _initial_state(params, ms, cfg)

    times = obs.times
    mu = np.empty((n + 1, K), dtype=complex)
    r_diag = np.empty((n + 1, K))
    logdet = np.empty(n + 1)
    mu[0] = mu0
    clamp_count = 0

    if cfg.variant == "full":
        state = _FullState(params, ms, cfg, dt)
        dense_bytes = (n + 1) * K * K * 16
        use_dense = cfg.cov_storage == "dense" or (
            cfg.cov_storage == "auto" and dense_bytes <= cfg.cov_memory_budget
        )
        stride = cfg.checkpoint_stride or max(1, int(round(np.sqrt(n or 1))))

        if state.fused and L > 0 and n > 0:
            cp_stride = 1 if use_dense else stride
            n_slots = n // cp_stride + 1
            cp_out = np.empty((n_slots, K, K), dtype=complex)
            r_final = np.empty((K, K), dtype=complex)
            clamp_count, bad = _kernels.filter_forward(
                mu0.astype(complex), np.ascontiguousarray(R0, dtype=complex),
                np.ascontiguousarray(obs.positions),
                np.ascontiguousarray(obs.increments),
                state.kx, state.ky, state.rx, state.ry, state.w_gram,
                state.ops.lam, state.ops.f, state.ops.q_diag, dt, state.sxi2,
                cfg.jitter, ms.conj_pair, cp_stride, cp_out, mu, r_diag,
                logdet, r_final,
            )
            if bad >= 0:
                raise FloatingPointError(f"non-finite posterior mean at step {bad}")
            if use_dense:
                cov_dense, checkpoints = cp_out, None
            else:
                cov_dense = None
                checkpoints = {i * cp_stride: cp_out[i] for i in range(n_slots)}
                checkpoints[n] = r_final
            return FilterResult(times, mu, r_diag, logdet, cfg.variant, cfg,
                                params, ms, obs, cov_dense, checkpoints,
                                int(clamp_count))

        R = R0.copy().astype(complex)
        r_diag[0] = np.real(np.diagonal(R))
        _, ld0, _ = _psd_guard(R + cfg.jitter * np.eye(K), 0.0)
        logdet[0] = ld0
        cov_dense = np.empty((n + 1, K, K), dtype=complex) if use_dense else None
        checkpoints = None if use_dense else {0: R.copy()}
        if cov_dense is not None:
            cov_dense[0] = R
        cur = mu0
        for j in range(n):
            cur, R, ld, clamped = state.advance(
                cur, R, obs.positions[j], obs.increments[j]
            )
            clamp_count += int(clamped)
            mu[j + 1] = cur
            r_diag[j + 1] = np.real(np.diagonal(R))
            logdet[j + 1] = ld
            if cov_dense is not None:
                cov_dense[j + 1] = R
            elif (j + 1) % stride == 0 or j + 1 == n:
                checkpoints[j + 1] = R.copy()
            if not np.all(np.isfinite(cur.view(np.float64))):
                raise FloatingPointError(f"non-finite posterior mean at step {j + 1}")
        return FilterResult(times, mu, r_diag, logdet, cfg.variant, cfg, params,
                            ms, obs, cov_dense, checkpoints, clamp_count)

    # diagonal-covariance family
    ops = _DriftOps(params, ms)
    sxi2 = 1.0 / cfg.sigma_x**2
    rvec = ms.velocity_eigenvectors
    rx, ry = rvec[:, 0], rvec[:, 1]
    kT = ms.wavenumbers.T
    q_diag = ops.q_diag
    d_eff = params.d.copy()

    if cfg.variant == "diag_riccati":
        r = np.real(np.diagonal(R0)).copy()
        p_kk = _p_diag(ms, L)
    elif cfg.variant == "diag_constant":
        r = _stationary_diag(params, ms, L, cfg.sigma_x)
    else:  # randomized
        l_prime = cfg.l_prime
        if l_prime > L:
            raise ValueError("l_prime cannot exceed the tracer count")
        r = _stationary_diag(params, ms, l_prime, cfg.sigma_x)
        sel_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.selection_seed, 0x52414E44])
        )
        gain_scale = np.sqrt(L / l_prime) if cfg.rescale else 1.0

    r = np.maximum(r, cfg.jitter)
    r_diag[0] = r
    logdet[0] = np.sum(np.log(r))
    cur = mu0
    for j in range(n):
        if cfg.variant == "randomized":
            idx = np.sort(sel_rng.choice(L, size=l_prime, replace=False))
            positions = obs.positions[j, idx]
            increments = obs.increments[j, idx]
            scale = gain_scale
        else:
            positions = obs.positions[j]
            increments = obs.increments[j]
            scale = 1.0
        phases = np.exp(1j * (positions @ kT))
        innov_x = increments[:, 0] - (phases @ (cur * rx)) * dt
        innov_y = increments[:, 1] - (phases @ (cur * ry)) * dt
        a_innov = np.conj(rx) * (phases.conj().T @ innov_x) + np.conj(ry) * (
            phases.conj().T @ innov_y
        )
        cur = cur + dt * (ops.f + ops.vec(cur)) + scale * sxi2 * (r * a_innov)
        cur = ms.mirror(cur)
        if cfg.variant == "diag_riccati":
            r = r + dt * (-2.0 * d_eff * r + q_diag - sxi2 * p_kk * r**2)
            r = np.maximum(r, cfg.jitter)
        mu[j + 1] = cur
        r_diag[j + 1] = r
        logdet[j + 1] = np.sum(np.log(r))
        if not np.all(np.isfinite(cur.view(np.float64))):
            raise FloatingPointError(f"non-finite posterior mean at step {j + 1}")
    return FilterResult(times, mu, r_diag, logdet, cfg.variant, cfg, params, ms,
                        obs, None, None, 0)
