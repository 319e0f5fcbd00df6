"""Skill scores: normalized RMSE, pattern correlation, and Gaussian relative
entropy split into signal and dispersion, plus the prior equilibrium they are
measured against."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .modes import LsmParams, ModeSet, mean_flow_drift_matrix

__all__ = [
    "rmse_corr",
    "stack_complex_series",
    "rmse_corr_complex",
    "gaussian_relative_entropy",
    "relative_error",
    "equilibrium_prior",
    "SkillReport",
    "velocity_field_skill",
]


def rmse_corr(estimate, truth):
    """Normalized RMSE and pattern correlation between two real series.

    RMSE is the root-mean-square error divided by the (population) standard
    deviation of the truth; Corr is the centered cosine similarity.

    Args:
        estimate, truth: real arrays of equal shape (flattened internally),
            at least two points.

    Returns:
        (rmse, corr) floats.

    Raises:
        ValueError: on mismatched lengths or zero-variance truth.
    """
    est = np.asarray(estimate, dtype=float).ravel()
    ref = np.asarray(truth, dtype=float).ravel()
    if est.shape != ref.shape:
        raise ValueError("series lengths differ")
    if est.size < 2:
        raise ValueError("need at least two points")
    std = np.std(ref)
    if std == 0:
        raise ValueError("truth has zero variance")
    rmse = np.sqrt(np.mean((est - ref) ** 2)) / std
    ea = est - est.mean()
    ra = ref - ref.mean()
    denom = np.sqrt(np.sum(ea**2) * np.sum(ra**2))
    corr = float(np.sum(ea * ra) / denom) if denom > 0 else 0.0
    return float(rmse), corr


def stack_complex_series(series, mode_mask=None):
    """Flatten a complex (n, K) series into one real vector [Re ..., Im ...].

    Complex states are scored as independent real coordinates; a mode mask
    selects a subset of columns first.
    """
    arr = np.asarray(series)
    if arr.ndim == 1:
        arr = arr[:, None]
    if mode_mask is not None:
        arr = arr[:, mode_mask]
    return np.concatenate([arr.real.ravel(), arr.imag.ravel()])


def rmse_corr_complex(estimate, truth, mode_mask=None):
    """Aggregate Eq.-(8)-style scores for complex mode series.

    Both series are stacked (real and imaginary parts of every selected mode)
    and scored as one long real vector.
    """
    return rmse_corr(
        stack_complex_series(estimate, mode_mask),
        stack_complex_series(truth, mode_mask),
    )


def _as_cov(R, K):
    R = np.asarray(R)
    if R.ndim == 1:
        if R.size != K:
            raise ValueError("diagonal covariance has wrong length")
        return np.diag(R.astype(complex))
    if R.shape != (K, K):
        raise ValueError("covariance has wrong shape")
    return R.astype(complex)


def gaussian_relative_entropy(mu, R, mu_eq, R_eq, psd_tol=1e-8):
    """Signal and dispersion parts of the Gaussian relative entropy.

    signal     = (mu - mu_eq)^* R_eq^{-1} (mu - mu_eq) / 2
    dispersion = -log det(R R_eq^{-1})/2 + (tr(R R_eq^{-1}) - K)/2

    with K the (complex) dimension.  Covariances may be passed as diagonal
    vectors or full Hermitian matrices.

    Raises:
        ValueError: if R_eq is singular or either covariance has an
            eigenvalue below -psd_tol (relative to its largest).
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=complex))
    mu_eq = np.atleast_1d(np.asarray(mu_eq, dtype=complex))
    K = mu.size
    Rm = _as_cov(R, K)
    Rem = _as_cov(R_eq, K)
    for name, M in (("R", Rm), ("R_eq", Rem)):
        w = np.linalg.eigvalsh(M)
        if w.min() < -psd_tol * max(w.max(), 1.0):
            raise ValueError(f"{name} is not positive semidefinite")
    w_eq = np.linalg.eigvalsh(Rem)
    if w_eq.min() <= 0:
        raise ValueError("R_eq is singular")

    diff = mu - mu_eq
    signal = 0.5 * np.real(diff.conj() @ np.linalg.solve(Rem, diff))
    M = np.linalg.solve(Rem, Rm)  # R_eq^{-1} R; same trace/det as R R_eq^{-1}
    sign, logdet = np.linalg.slogdet(M)
    if sign.real <= 0:
        # R singular (or clamped to tiny eigenvalues): logdet -> -inf
        dispersion = np.inf
    else:
        dispersion = -0.5 * logdet + 0.5 * (np.trace(M).real - K)
    return float(signal), float(dispersion)


def relative_error(theta_est, theta_ref):
    """L2 relative error ||est - ref|| / ||ref||."""
    est = np.asarray(theta_est, dtype=complex).ravel()
    ref = np.asarray(theta_ref, dtype=complex).ravel()
    if est.shape != ref.shape:
        raise ValueError("parameter vectors have different lengths")
    nref = np.linalg.norm(ref)
    if nref == 0:
        raise ValueError("reference parameter vector is zero")
    return float(np.linalg.norm(est - ref) / nref)


def equilibrium_prior(params: LsmParams, ms: ModeSet):
    """Statistical equilibrium of the forecast model.

    Returns:
        (mu_eq, R_eq): complex (K,) mean and Hermitian (K, K) covariance.
        Fluctuation modes contribute f/(d - i omega) and sigma^2/(2 d) on the
        diagonal; the mean-flow block solves its 2-D stationary Lyapunov
        equation.

    Raises:
        ValueError: for a non-dissipative mean-flow block.
    """
    params.validate_for(ms)
    mu_eq = params.f / (params.d - 1j * params.omega)
    r_diag = params.sigma**2 / (2.0 * params.d)
    R_eq = np.diag(r_diag.astype(complex))
    mf = ms.mean_flow_indices
    if mf.size:
        B = mean_flow_drift_matrix(params, ms)
        if np.max(np.linalg.eigvals(B).real) >= 0:
            raise ValueError("mean-flow drift is not dissipative")
        mu_eq = mu_eq.copy()
        mu_eq[mf] = np.linalg.solve(B, -params.f[mf].real)
        Q0 = params.sigma0 @ params.sigma0.T
        C = scipy.linalg.solve_continuous_lyapunov(B, -Q0)
        R_eq[np.ix_(mf, mf)] = C
    return mu_eq, R_eq


@dataclass
class SkillReport:
    """Aggregate and per-mode skill of a posterior series."""

    rmse: float
    corr: float
    signal: float = np.nan
    dispersion: float = np.nan
    per_mode: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "corr": self.corr,
            "signal": self.signal,
            "dispersion": self.dispersion,
            "per_mode": {k: list(v) for k, v in self.per_mode.items()},
        }


def velocity_field_skill(est_coeffs, truth_coeffs, ms: ModeSet, time_indices,
                         n_grid: int = 32):
    """RMSE/Corr of the reconstructed physical velocity field.

    Both coefficient series are synthesised on an n_grid^2 lattice at the
    selected time indices and scored over all space-time points.
    """
    from .modes import synthesis_matrix

    grid = np.linspace(0.0, 2.0 * np.pi, n_grid, endpoint=False)
    xx, yy = np.meshgrid(grid, grid, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    phases = synthesis_matrix(ms, pts)
    r = ms.velocity_eigenvectors
    def fields(coeffs):
        out = []
        for j in time_indices:
            u = coeffs[j]
            out.append(np.stack(
                [(phases @ (u * r[:, 0])).real, (phases @ (u * r[:, 1])).real],
                axis=-1,
            ))
        return np.array(out)

    return rmse_corr(fields(est_coeffs), fields(truth_coeffs))
