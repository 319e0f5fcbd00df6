"""Backward smoother and backward trajectory sampler over a filter run.

Both solve backward-in-time equations driven by the filter output.  With
G(t) = Q R(t)^{-1} (Q the noise covariance rate, R the filter covariance):

    mu_s' (backward) = -F - Lambda mu_s + G (mu - mu_s)
    R_s'  (backward) = -(Lambda + G) R_s - R_s (Lambda + G)^* + Q

anchored at the filter terminal pair, and the sampled trajectory obeys

    U' (backward) = mu_s' (backward) - (Lambda + G)(U - mu_s) + Sigma W'

so that each sample is a draw from the joint smoothing distribution.  The
covariance factor in the printed R_s equation is implemented as Q R^{-1}
(adjudicated against a discrete RTS oracle; see tests).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

import lagda.filters as _filters

from .complexreal import RealEmbedding
from .filters import FilterResult, _DriftOps, _mirror_cov, _psd_guard
from .modes import LsmParams, ModeSet

__all__ = ["SmootherSeries", "run_backward_smoother", "sample_backward_trajectory"]


@dataclass
class SmootherSeries:
    """Backward-smoothed Gaussian series; terminal entries equal the filter's."""

    times: np.ndarray
    mu_s: np.ndarray
    rs_diag: np.ndarray
    rs_dense: np.ndarray | None = None
    variant: str = "full"

    @property
    def n_steps(self) -> int:
        return self.times.size - 1


def _terminal_sample(ms: ModeSet, mu, cov, n_samples, rng, jitter):
    """Draw N(mu, cov) respecting the conjugate-pair structure.

    Uses an eigendecomposition square root, so exactly singular covariances
    (e.g. a noise-free model) collapse the draw onto the mean.
    """
    emb = RealEmbedding(ms)
    m = emb.vec_to_real(mu)
    if np.ndim(cov) == 1:
        S = emb.cov_to_real(np.diag(np.asarray(cov, dtype=complex)))
    else:
        S = emb.cov_to_real(cov)
    S = 0.5 * (S + S.T) + jitter * np.eye(S.shape[0])
    w, V = np.linalg.eigh(S)
    root = V * np.sqrt(np.maximum(w, 0.0))
    z = rng.standard_normal((n_samples, S.shape[0]))
    return emb.vec_from_real(m + z @ root.T)


class _PairSampler:
    """Conjugate-symmetric noise increments Sigma dW for the backward SDE."""

    def __init__(self, params: LsmParams, ms: ModeSet, rng, dt):
        self.rng = rng
        self.ms = ms
        self.sq = np.sqrt(dt)
        prim = ms.primary_mask.copy()
        mf = ms.mean_flow_indices
        prim[mf] = False
        self.prim = np.nonzero(prim)[0]
        self.pair = ms.conj_pair[self.prim]
        self.mf = mf
        self.sigma = params.sigma
        self.sigma0 = params.sigma0

    def draw(self, n_samples):
        out = np.zeros((n_samples, self.ms.size), dtype=complex)
        z = self.rng.standard_normal((n_samples, self.prim.size, 2))
        dw = (z[..., 0] + 1j * z[..., 1]) * (self.sq / np.sqrt(2.0))
        out[:, self.prim] = self.sigma[self.prim] * dw
        out[:, self.pair] = np.conj(out[:, self.prim])
        if self.mf.size:
            zm = self.rng.standard_normal((n_samples, 2)) * self.sq
            out[:, self.mf] = zm @ self.sigma0.T
        return out


def _draw_backward_noise(params, ms, rng, dt, n, n_samples):
    """Pre-draw the backward noise, row j-1 holding the step-j increment.

    The draw order matches the per-step sampler (first draw belongs to the
    terminal step), so chunking does not change the stream.
    """
    prim = ms.primary_mask.copy()
    mf = ms.mean_flow_indices
    prim[mf] = False
    prim_idx = np.nonzero(prim)[0]
    pair_idx = ms.conj_pair[prim_idx]
    z = rng.standard_normal((n, n_samples, prim_idx.size, 2))
    out = np.zeros((n, n_samples, ms.size), dtype=complex)
    sq = np.sqrt(dt)
    out[:, :, prim_idx] = (
        params.sigma[prim_idx] * (z[..., 0] + 1j * z[..., 1]) * (sq / np.sqrt(2.0))
    )
    out[:, :, pair_idx] = np.conj(out[:, :, prim_idx])
    return out[::-1]


def _fused_backward(result, params, jitter, n_samples, seed, mu_s_known,
                    want_rs=True):
    """Segment-based backward pass through the numba kernels."""
    ms = result.ms
    K = ms.size
    n = result.n_steps
    dt = result.dt
    ops = _DriftOps(params, ms)
    mu = result.mu
    mu_s = np.empty_like(mu)
    rs_diag = np.empty_like(result.r_diag)

    checkpoints = result.checkpoints
    marks = sorted(checkpoints)
    term_cov = checkpoints[n]
    mu_s[n] = mu[n]
    Rs = np.ascontiguousarray(term_cov, dtype=complex).copy()
    rs_diag[n] = np.real(np.diagonal(Rs))

    if n_samples:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x534D50]))
        U = _terminal_sample(ms, mu[n], term_cov, n_samples, rng, jitter)
        noise = _draw_backward_noise(params, ms, rng, dt, n, n_samples)
        samples = np.empty((n_samples, n + 1, K), dtype=complex)
        samples[:, n] = U
    else:
        U = np.empty((0, K), dtype=complex)
        noise = np.zeros((n, 0, K), dtype=complex)
        samples = None

    state = _filters._FullState(result.params, ms, result.cfg, dt)
    cur_mu_s = mu_s[n].copy()
    for si in range(len(marks) - 1, 0, -1):
        j0, j1 = marks[si - 1], marks[si]
        anchor = (
            np.ascontiguousarray(mu_s_known[j0:j1 + 1])
            if mu_s_known is not None
            else np.ascontiguousarray(mu[j0:j1 + 1])  # unused placeholder
        )
        seg = j1 - j0
        u_out = np.empty((seg, U.shape[0], K), dtype=complex)
        mu_s_seg = np.empty((seg, K), dtype=complex)
        rs_seg = np.empty((seg, K))
        _filters._kernels.backward_segment(
            np.ascontiguousarray(checkpoints[j0], dtype=complex),
            np.ascontiguousarray(result.obs.positions[j0:j1]),
            np.ascontiguousarray(mu[j0:j1 + 1]),
            ops.lam, ops.f, ops.q_diag, state.kx, state.ky, state.w_gram, dt,
            state.sxi2, jitter, ms.conj_pair,
            np.ascontiguousarray(noise[j0:j1]),
            anchor, mu_s_known is not None, cur_mu_s, Rs, U,
            mu_s_seg, rs_seg, u_out, want_rs,
        )
        mu_s[j0:j1] = mu_s_seg
        rs_diag[j0:j1] = rs_seg
        if samples is not None:
            samples[:, j0:j1] = np.swapaxes(u_out, 0, 1)
    series = SmootherSeries(result.times, mu_s, rs_diag, None, "full")
    return series, samples


def _backward_pass(result: FilterResult, params: LsmParams, jitter: float,
                   n_samples: int, seed, mu_s_known=None, store_dense=False,
                   want_rs=True):
    """Single covariance sweep computing the smoother and optional samples."""
    ms = result.ms
    K = ms.size
    n = result.n_steps
    dt = result.dt
    ops = _DriftOps(params, ms)
    diag_variant = result.is_diagonal
    q_diag = ops.q_diag
    fused = (
        _filters._kernels is not None
        and _filters.USE_KERNELS
        and ms.mean_flow_indices.size == 0
        and not diag_variant
        and not store_dense
        and result.checkpoints is not None
        and q_diag.any()
        and params is result.params
        and n > 0
    )
    if fused:
        return _fused_backward(result, params, jitter, n_samples, seed,
                               mu_s_known, want_rs)

    mu = result.mu
    mu_s = np.empty_like(mu)
    rs_diag = np.empty_like(result.r_diag)
    rs_dense = (
        np.empty((n + 1, K, K), dtype=complex)
        if (store_dense and not diag_variant)
        else None
    )

    samples = None
    sampler = None
    if n_samples:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x534D50]))
        sampler = _PairSampler(params, ms, rng, dt)
        samples = np.empty((n_samples, n + 1, K), dtype=complex)

    sweep = result.covariance_backward()
    j, cov = next(sweep)
    assert j == n
    mu_s[n] = mu[n]
    if diag_variant:
        rs = cov.copy()
        rs_diag[n] = rs
    else:
        Rs = np.asarray(cov, dtype=complex).copy()
        rs_diag[n] = np.real(np.diagonal(Rs))
        if rs_dense is not None:
            rs_dense[n] = Rs
    if n_samples:
        samples[:, n] = _terminal_sample(ms, mu[n], cov, n_samples, rng, jitter)

    eye = np.eye(K)
    cur_mu_s = mu_s[n].copy()
    # each backward step j -> j-1 uses the filter covariance at its "from"
    # point t_j; the sweep currently holds exactly that covariance
    while j >= 1:
        if diag_variant:
            r = np.maximum(cov, jitter)
            g = np.where(q_diag > 0, q_diag / np.maximum(r, 1e-300), 0.0)
            relax = g * (mu[j] - cur_mu_s)
            drift = -ops.f - ops.vec(cur_mu_s) + relax
            new_mu_s = ms.mirror(cur_mu_s + dt * drift)
            rs = rs + dt * (2.0 * (params.d - g) * rs + q_diag)
            rs = np.maximum(rs, jitter)
            rs_diag[j - 1] = rs
        else:
            R = cov
            if q_diag.any() or ops.mf is not None:
                rinv = np.linalg.inv(R + jitter * eye)
                G = q_diag[:, None] * rinv
                if ops.mf is not None:
                    mfi = ops.mf
                    G[mfi] = ops.q[np.ix_(mfi, mfi)].real @ rinv[mfi]
            else:
                G = np.zeros((K, K))  # Q = 0 makes the relaxation vanish
            relax = G @ (mu[j] - cur_mu_s)
            drift = -ops.f - ops.vec(cur_mu_s) + relax
            new_mu_s = ms.mirror(cur_mu_s + dt * drift)
            CRs = ops.mat_left(Rs) + G @ Rs
            dRs = -CRs - CRs.conj().T + ops.q
            Rs = Rs + dt * dRs
            Rs = 0.5 * (Rs + Rs.conj().T)
            Rs = _mirror_cov(Rs, ms.conj_pair)
            Rs, _, _ = _psd_guard(Rs, jitter)
            rs_diag[j - 1] = np.real(np.diagonal(Rs))
            if rs_dense is not None:
                rs_dense[j - 1] = Rs

        if mu_s_known is not None:
            anchored_new = mu_s_known[j - 1]
            anchored_old = mu_s_known[j]
        else:
            anchored_new = new_mu_s
            anchored_old = cur_mu_s
        if n_samples:
            u = samples[:, j]
            if diag_variant:
                pull = (u - anchored_old) * (params.lam() + g)[None, :]
                if ops.mf is not None:
                    a, b = ops.ab
                    pull[:, ops.mf[0]] += a * (u - anchored_old)[:, ops.mf[1]]
                    pull[:, ops.mf[1]] += b * (u - anchored_old)[:, ops.mf[0]]
            else:
                diff = u - anchored_old
                pull = diff * params.lam()[None, :] + diff @ G.T
                if ops.mf is not None:
                    a, b = ops.ab
                    pull[:, ops.mf[0]] += a * diff[:, ops.mf[1]]
                    pull[:, ops.mf[1]] += b * diff[:, ops.mf[0]]
            noise = sampler.draw(n_samples)
            u_new = u + (anchored_new - anchored_old) - dt * pull + noise
            samples[:, j - 1] = ms.mirror(u_new)

        mu_s[j - 1] = new_mu_s
        cur_mu_s = new_mu_s
        if j == 1:
            break
        j, cov = next(sweep)

    series = SmootherSeries(result.times, mu_s, rs_diag, rs_dense,
                            "diag" if diag_variant else "full")
    return series, samples


def run_backward_smoother(result: FilterResult, params: LsmParams | None = None,
                          jitter: float = 1e-10,
                          store_dense: bool = False) -> SmootherSeries:
    """Backward explicit-Euler smoother over a completed filter run.

    The terminal pair equals the filter terminal pair exactly; covariance
    inverses are jitter-regularized.
    """
    params = result.params if params is None else params
    series, _ = _backward_pass(result, params, jitter, 0, None,
                               store_dense=store_dense)
    return series


def sample_backward_trajectory(smoother: SmootherSeries, result: FilterResult,
                               params: LsmParams | None = None, seed: int = 0,
                               n_samples: int = 1,
                               jitter: float = 1e-10) -> np.ndarray:
    """Draw trajectories of the coefficients from the smoothing distribution.

    Integrates the backward sampling SDE from a draw of the filter terminal
    Gaussian, using the supplied smoother mean series and the filter
    covariance sweep.  Conjugate symmetry is enforced by sampling one pair
    member and mirroring.

    Returns:
        (n+1, K) for a single sample, else (n_samples, n+1, K).
    """
    params = result.params if params is None else params
    _, samples = _backward_pass(result, params, jitter, n_samples, seed,
                                mu_s_known=smoother.mu_s)
    return samples[0] if n_samples == 1 else samples


def smooth_and_sample(result: FilterResult, params: LsmParams | None = None,
                      n_samples: int = 1, seed: int = 0,
                      jitter: float = 1e-10, want_smoother_cov: bool = True):
    """Smoother plus samples in one covariance sweep (used by estimation).

    With ``want_smoother_cov=False`` the smoother covariance recursion is
    skipped (its diagonal stays frozen at the terminal value) -- only valid
    when the caller needs just the mean series and samples.
    """
    params = result.params if params is None else params
    series, samples = _backward_pass(result, params, jitter, n_samples, seed,
                                     want_rs=want_smoother_cov)
    return series, samples
