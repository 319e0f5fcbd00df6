"""The nonlinear layered topographic flow model and its truth simulation.

Spectral form along the x direction: a zonal mean flow u(t) couples to
fluctuation stream-function modes psi_k(t), k = 1..K (negative wavenumbers by
conjugation), through a prescribed small-scale topography h_k:

    dpsi_k/dt = -d_k psi_k + i k (beta/k^2 - u) psi_k + i h_k u / k + noise
    du/dt     = -d_u u + 2 sum_k k Im(h_k conj(psi_k)) + noise

The physical velocity is (u, dpsi/dx).  Integration is fourth-order
Runge-Kutta on the deterministic part with Euler-Maruyama noise increments;
tracers are advected exactly as in the linear framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .simulate import SimConfig, TracerField, TruthRecord
from .torus import TWO_PI, wrap_positions

__all__ = [
    "TopoModelParams",
    "topography_coefficients",
    "regime_noise",
    "topo_params",
    "reduced_params",
    "topo_drift",
    "layered_velocity",
    "simulate_topographic",
    "layered_truth_coefficients",
]


def topography_coefficients(n_modes: int, h1: float = 1.0, h2: float = 0.5,
                            decay_power: float = 1.0, seed: int = 0) -> np.ndarray:
    """Spectral topography h_k for k = 1..n_modes.

    h_1 and h_2 are set by the two amplitude parameters; higher modes carry
    random phases and decay like k^(-decay_power).  Negative wavenumbers
    follow by conjugation and are not stored.
    """
    if n_modes < 2:
        raise ValueError("need at least two topography modes")
    h = np.empty(n_modes, dtype=complex)
    h[0] = h1 / 2.0 - 1j * h1 / 2.0
    h[1] = h2 / 2.0 - 1j * h2 / 2.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x544F504F]))
    for k in range(3, n_modes + 1):
        theta = rng.uniform(0.0, TWO_PI)
        h[k - 1] = (np.sin(theta) - 1j * np.cos(theta)) / (4.0 * k**decay_power)
    return h


def regime_noise(regime: str, n_modes: int):
    """Noise amplitudes (sigma_v per mode, sigma_u) for the two test regimes.

    Regime I is nearly Gaussian (strong fluctuation noise, weak zonal noise);
    regime II strongly forces the zonal flow and produces fat-tailed
    fluctuation statistics.
    """
    if n_modes < 3:
        raise ValueError("regimes are defined for at least three modes")
    k = np.arange(1, n_modes + 1, dtype=float)
    if regime == "I":
        sigma_v = 1.0 / (np.sqrt(2.0) * k**2)
        sigma_v[0] = 1.0 / np.sqrt(2.0)
        sigma_v[1] = 1.0 / (2.0 * np.sqrt(2.0))
        sigma_u = 1.0 / (2.0 * np.sqrt(2.0))
    elif regime == "II":
        sigma_v = 1.0 / (2.0 * np.sqrt(2.0) * k**2)
        sigma_v[0] = sigma_v[1] = 1.0 / (4.0 * np.sqrt(2.0))
        sigma_u = 1.0 / np.sqrt(2.0)
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return sigma_v, sigma_u


@dataclass(frozen=True)
class TopoModelParams:
    """Coefficients of the layered topographic model."""

    n_modes: int
    d_k: float = 0.0125
    d_u: float = 0.0125
    beta: float = 1.0
    topography: np.ndarray = None
    sigma_v: np.ndarray = None
    sigma_u: float = 0.0

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        if self.d_k <= 0 or self.d_u <= 0:
            raise ValueError("dampings must be positive")
        if self.topography is None or len(self.topography) != self.n_modes:
            raise ValueError("topography must provide n_modes coefficients")
        if self.sigma_v is None or len(self.sigma_v) != self.n_modes:
            raise ValueError("sigma_v must provide n_modes amplitudes")


def topo_params(regime: str, n_modes: int = 6, d_k: float = 0.0125,
                d_u: float = 0.0125, beta: float = 1.0, h1: float = 1.0,
                h2: float = 0.5, decay_power: float = 1.0,
                theta_seed: int = 0) -> TopoModelParams:
    """Standard configuration of the layered model in one of the two regimes."""
    sigma_v, sigma_u = regime_noise(regime, n_modes)
    h = topography_coefficients(n_modes, h1, h2, decay_power, theta_seed)
    return TopoModelParams(n_modes=n_modes, d_k=d_k, d_u=d_u, beta=beta,
                           topography=h, sigma_v=sigma_v, sigma_u=sigma_u)


def reduced_params(tp: TopoModelParams, n_keep: int) -> TopoModelParams:
    """Truncate the model to wavenumbers k = 1..n_keep (same topography).

    The zonal-flow interaction sum shrinks with the retained modes; keeping
    every mode returns the full drift.
    """
    if not 1 <= n_keep <= tp.n_modes:
        raise ValueError("n_keep out of range")
    return TopoModelParams(
        n_modes=n_keep, d_k=tp.d_k, d_u=tp.d_u, beta=tp.beta,
        topography=tp.topography[:n_keep].copy(),
        sigma_v=tp.sigma_v[:n_keep].copy(), sigma_u=tp.sigma_u,
    )


def topo_drift(tp: TopoModelParams):
    """Deterministic right-hand side over stacked states.

    Returns a function (u, psi) -> (du, dpsi) accepting u of shape (...,) and
    psi of shape (..., K); broadcasts over leading axes (ensembles).
    """
    k = np.arange(1, tp.n_modes + 1, dtype=float)
    h = tp.topography

    def drift(u, psi):
        u = np.asarray(u)
        rot = tp.beta / k - k * u[..., None]
        dpsi = (-tp.d_k + 1j * rot) * psi + 1j * (h / k) * u[..., None]
        du = -tp.d_u * u + 2.0 * np.sum(
            k * np.imag(h * np.conj(psi)), axis=-1
        )
        return du, dpsi

    return drift


def layered_velocity(u, psi, points) -> np.ndarray:
    """Physical velocity (u, dpsi/dx) at the given points.

    Only x matters: v_y(x) = sum_k 2 Re(i k psi_k e^{i k x}).
    """
    points = np.atleast_2d(points)
    k = np.arange(1, psi.shape[-1] + 1, dtype=float)
    phases = np.exp(1j * points[:, 0, None] * k)
    vy = 2.0 * np.real(phases @ (1j * k * psi))
    vx = np.full(points.shape[0], float(u))
    return np.stack([vx, vy], axis=-1)


def simulate_topographic(tp: TopoModelParams, cfg: SimConfig) -> TruthRecord:
    """Reference run of the layered model with advected tracers.

    RK4 advances the deterministic part of (u, psi); Euler-Maruyama noise is
    added per step; tracers feel the pre-step velocity plus sigma_x noise.
    The coefficient columns are [u, psi_1 .. psi_K].
    """
    n = cfg.n_steps
    K = tp.n_modes
    L = cfg.n_tracers
    dt = cfg.dt
    times = np.arange(n + 1) * dt

    root = np.random.SeedSequence(cfg.seed)
    ss_flow, ss_tracer, ss_init = root.spawn(3)
    rng_flow = np.random.default_rng(ss_flow)
    rng_tracer = np.random.default_rng(ss_tracer)

    if cfg.initial_coeffs is not None:
        init = np.asarray(cfg.initial_coeffs, dtype=complex)
        if init.shape != (K + 1,):
            raise ValueError("initial_coeffs must hold [u, psi_1..psi_K]")
        u = float(init[0].real)
        psi = init[1:].copy()
    else:
        u = 0.0
        psi = np.zeros(K, dtype=complex)

    if L:
        if cfg.initial_tracers is not None:
            pos = wrap_positions(np.asarray(cfg.initial_tracers, dtype=float).copy())
        else:
            pos = np.random.default_rng(ss_init).uniform(0.0, TWO_PI, size=(L, 2))
    else:
        pos = np.zeros((0, 2))

    drift = topo_drift(tp)
    coeffs = np.empty((n + 1, K + 1), dtype=complex)
    positions = np.empty((n + 1, L, 2))
    increments = np.empty((n, L, 2))
    coeffs[0, 0] = u
    coeffs[0, 1:] = psi
    positions[0] = pos

    kvec = np.arange(1, K + 1, dtype=float)
    sq_dt = np.sqrt(dt)
    half = 0.5 * dt
    sixth = dt / 6.0
    for j in range(n):
        if L:
            phases = np.exp(1j * pos[:, 0, None] * kvec)
            vy = 2.0 * np.real(phases @ (1j * kvec * psi))
            xi = rng_tracer.standard_normal((L, 2))
            incr = np.empty((L, 2))
            incr[:, 0] = u * dt + cfg.sigma_x * sq_dt * xi[:, 0]
            incr[:, 1] = vy * dt + cfg.sigma_x * sq_dt * xi[:, 1]
            increments[j] = incr
            pos = wrap_positions(pos + incr)
            positions[j + 1] = pos

        du1, dp1 = drift(u, psi)
        du2, dp2 = drift(u + half * du1, psi + half * dp1)
        du3, dp3 = drift(u + half * du2, psi + half * dp2)
        du4, dp4 = drift(u + dt * du3, psi + dt * dp3)
        u = u + sixth * (du1 + 2 * du2 + 2 * du3 + du4)
        psi = psi + sixth * (dp1 + 2 * dp2 + 2 * dp3 + dp4)
        z = rng_flow.standard_normal(2 * K + 1)
        psi = psi + tp.sigma_v * (z[:K] + 1j * z[K:2 * K]) * (sq_dt / np.sqrt(2.0))
        u = u + tp.sigma_u * sq_dt * z[2 * K]
        coeffs[j + 1, 0] = u
        coeffs[j + 1, 1:] = psi
        if not (np.isfinite(u) and np.all(np.isfinite(psi.view(np.float64)))):
            raise FloatingPointError(f"non-finite state at step {j + 1}")

    labels = ["u"] + [f"psi_{k}" for k in range(1, K + 1)]
    tracers = TracerField(positions, increments)
    meta = {
        "kind": "layered",
        "dt": dt,
        "t_final": cfg.t_final,
        "seed": cfg.seed,
        "sigma_x": cfg.sigma_x,
        "n_tracers": L,
        "n_modes": K,
    }
    return TruthRecord(times, coeffs, tuple(labels), tracers, meta)


def layered_truth_coefficients(record: TruthRecord, ms) -> np.ndarray:
    """True coefficient series in a velocity-component mode-set layout.

    The y-velocity coefficient at wavenumber (k, 0) is i k psi_k; the zonal
    flow maps to the x mean-flow entry.  Modes absent from the layered model
    stay zero.
    """
    if record.meta.get("kind") != "layered":
        raise ValueError("record is not a layered-model run")
    n_modes = record.meta["n_modes"]
    out = np.zeros((record.coeffs.shape[0], ms.size), dtype=complex)
    labels = {m.label: i for i, m in enumerate(ms.modes)}
    for k in range(1, n_modes + 1):
        psi_k = record.coeffs[:, k]
        for kk, series in (((k, 0), 1j * k * psi_k), ((-k, 0), np.conj(1j * k * psi_k))):
            lbl = f"vy_{kk[0]}_{kk[1]}"
            if lbl in labels:
                out[:, labels[lbl]] = series
    mf = ms.mean_flow_indices
    if mf.size:
        out[:, mf[0]] = record.coeffs[:, 0].real
    return out
