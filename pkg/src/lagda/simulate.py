"""Ground-truth generation: coupled tracer/flow trajectories under LSM dynamics.

The flow coefficients follow independent complex Ornstein-Uhlenbeck equations
(plus an optional coupled 2-D mean-flow block) and every tracer obeys
dx = v(x, t) dt + sigma_x dW on the torus.  Integration is Euler-Maruyama,
advancing one member of each conjugate pair and mirroring the other so the
stored series is conjugate-symmetric to the bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .modes import LsmParams, ModeSet, mean_flow_drift_matrix
from .torus import TWO_PI, wrap_positions

__all__ = [
    "SimConfig",
    "TracerField",
    "TruthRecord",
    "ObservationSeries",
    "simulate_coupled",
    "resimulate_with_noise",
]

_NOISE_CHUNK = 4096


@dataclass(frozen=True)
class SimConfig:
    """Settings for one truth simulation.

    Attributes:
        dt: time step.
        t_final: horizon; the run covers round(t_final/dt) steps.
        seed: RNG seed; fixed seed gives bit-identical output.
        sigma_x: tracer noise amplitude.
        n_tracers: number of tracers L (0 disables tracers).
        initial_tracers: explicit (L, 2) positions, or None for iid uniform.
        initial_coeffs: explicit initial coefficient vector, or None for the
            deterministic stationary mean.
        record_noise: keep the per-mode Wiener increments (needed for
            known-noise resimulations).
    """

    dt: float
    t_final: float
    seed: int = 0
    sigma_x: float = 0.25
    n_tracers: int = 0
    initial_tracers: np.ndarray | None = None
    initial_coeffs: np.ndarray | None = None
    record_noise: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_final < self.dt:
            raise ValueError("t_final must be at least one step")
        if self.n_tracers < 0:
            raise ValueError("n_tracers must be nonnegative")
        if self.sigma_x < 0:
            raise ValueError("sigma_x must be nonnegative")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


@dataclass(frozen=True)
class TracerField:
    """Tracer position series with the raw (pre-wrap) increments.

    positions: (n+1, L, 2) wrapped into [0, 2*pi).
    increments: (n, L, 2), each component in (-pi, pi].
    """

    positions: np.ndarray
    increments: np.ndarray

    @property
    def n_tracers(self) -> int:
        return self.positions.shape[1]

    def validate(self):
        if np.any(self.positions < 0) or np.any(self.positions >= TWO_PI):
            raise ValueError("positions must lie in [0, 2*pi)")
        if self.increments.size and (
            self.increments.max() > np.pi or self.increments.min() <= -np.pi
        ):
            raise ValueError("increments must lie in (-pi, pi]")


@dataclass(frozen=True)
class ObservationSeries:
    """The tracer data a filter consumes.

    times: (n+1,); positions: (n+1, L, 2); increments: (n, L, 2) where
    increments[j] is the torus-minimal displacement from step j to j+1.
    """

    times: np.ndarray
    positions: np.ndarray
    increments: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n_tracers(self) -> int:
        return self.positions.shape[1]

    def subset(self, tracer_indices) -> "ObservationSeries":
        idx = np.asarray(tracer_indices, dtype=int)
        return ObservationSeries(
            self.times, self.positions[:, idx], self.increments[:, idx]
        )


@dataclass(frozen=True)
class TruthRecord:
    """One simulated reference run.

    coeffs holds the flow coefficient series (n+1, C); for LSM runs the
    columns align with a ModeSet and stay conjugate-symmetric at every step.
    """

    times: np.ndarray
    coeffs: np.ndarray
    coeff_labels: tuple[str, ...]
    tracers: TracerField
    meta: dict = field(default_factory=dict)
    noise_paths: dict | None = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def observations(self, tracer_indices=None) -> ObservationSeries:
        obs = ObservationSeries(
            self.times, self.tracers.positions, self.tracers.increments
        )
        if tracer_indices is not None:
            obs = obs.subset(tracer_indices)
        return obs


class _PairNoise:
    """Chunked generator of conjugate-symmetric flow-noise increments."""

    def __init__(self, ms: ModeSet, rng: np.random.Generator, dt: float):
        self.ms = ms
        self.rng = rng
        self.sqdt = np.sqrt(dt)
        prim = ms.primary_mask
        mf = ms.mean_flow_indices
        fluct_prim = prim.copy()
        fluct_prim[mf] = False
        self.prim_idx = np.nonzero(fluct_prim)[0]
        self.pair_idx = ms.conj_pair[self.prim_idx]
        self.mf_idx = mf
        self._buf = None
        self._pos = 0

    def _refill(self, n: int):
        p = self.prim_idx.size
        z = self.rng.standard_normal((n, p, 2))
        dw = np.zeros((n, self.ms.size), dtype=complex)
        dw[:, self.prim_idx] = (z[..., 0] + 1j * z[..., 1]) * (self.sqdt / np.sqrt(2.0))
        dw[:, self.pair_idx] = np.conj(dw[:, self.prim_idx])
        if self.mf_idx.size:
            dw[:, self.mf_idx] = self.rng.standard_normal((n, 2)) * self.sqdt
        self._buf = dw
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._buf is None or self._pos >= self._buf.shape[0]:
            self._refill(_NOISE_CHUNK)
        out = self._buf[self._pos]
        self._pos += 1
        return out


def _stationary_mean(params: LsmParams, ms: ModeSet) -> np.ndarray:
    mu = params.f / (params.d - 1j * params.omega)
    mf = ms.mean_flow_indices
    if mf.size:
        B = mean_flow_drift_matrix(params, ms)
        mu[mf] = np.linalg.solve(B, -params.f[mf].real)
    return mu


def _drift(params: LsmParams, ms: ModeSet, u: np.ndarray) -> np.ndarray:
    out = params.lam() * u + params.f
    mf = ms.mean_flow_indices
    if mf.size and params.omega0 is not None:
        a, b = params.omega0
        out[mf[0]] += a * u[mf[1]]
        out[mf[1]] += b * u[mf[0]]
    return out


def _apply_mode_noise(params: LsmParams, ms: ModeSet, dw: np.ndarray) -> np.ndarray:
    out = params.sigma * dw
    mf = ms.mean_flow_indices
    if mf.size and params.sigma0 is not None:
        out[mf] = params.sigma0 @ dw[mf].real
    return out


def simulate_coupled(params: LsmParams, ms: ModeSet, cfg: SimConfig) -> TruthRecord:
    """Euler-Maruyama integration of the coupled tracer/flow system.

    Tracers move with the velocity synthesised from the current coefficients
    (evaluated at the pre-step positions) plus sigma_x noise; positions are
    wrapped and the raw increments recorded.  Raises on non-finite state,
    naming the offending step.
    """
    params.validate_for(ms)
    n = cfg.n_steps
    K = ms.size
    L = cfg.n_tracers
    dt = cfg.dt
    times = np.arange(n + 1) * dt

    root = np.random.SeedSequence(cfg.seed)
    ss_flow, ss_tracer, ss_init = root.spawn(3)
    rng_flow = np.random.default_rng(ss_flow)
    rng_tracer = np.random.default_rng(ss_tracer)

    if cfg.initial_coeffs is not None:
        u = np.asarray(cfg.initial_coeffs, dtype=complex).copy()
        if u.shape != (K,):
            raise ValueError("initial_coeffs has wrong length")
    else:
        u = _stationary_mean(params, ms)
    u = ms.mirror(u)

    if L:
        if cfg.initial_tracers is not None:
            pos = wrap_positions(np.asarray(cfg.initial_tracers, dtype=float).copy())
            if pos.shape != (L, 2):
                raise ValueError("initial_tracers has wrong shape")
        else:
            pos = np.random.default_rng(ss_init).uniform(0.0, TWO_PI, size=(L, 2))
    else:
        pos = np.zeros((0, 2))

    coeffs = np.empty((n + 1, K), dtype=complex)
    positions = np.empty((n + 1, L, 2))
    increments = np.empty((n, L, 2))
    coeffs[0] = u
    positions[0] = pos

    noise = _PairNoise(ms, rng_flow, dt)
    rec_dw = np.empty((n, K), dtype=complex) if cfg.record_noise else None

    r = ms.velocity_eigenvectors
    kvec = ms.wavenumbers.T
    sq_dt = np.sqrt(dt)
    tracer_chunk = None
    tracer_pos_in_chunk = 0

    from . import filters as _flt  # runtime import avoids a module cycle

    if _flt._kernels is not None and _flt.USE_KERNELS and ms.mean_flow_indices.size == 0:
        kx = np.ascontiguousarray(np.rint(ms.wavenumbers[:, 0]).astype(np.int64))
        ky = np.ascontiguousarray(np.rint(ms.wavenumbers[:, 1]).astype(np.int64))
        rx = np.ascontiguousarray(r[:, 0])
        ry = np.ascontiguousarray(r[:, 1])
        lam = params.lam()
        j0 = 0
        while j0 < n:
            j1 = min(j0 + _NOISE_CHUNK, n)
            steps = j1 - j0
            dw = np.empty((steps, K), dtype=complex)
            for i in range(steps):
                dw[i] = noise.next()
            if rec_dw is not None:
                rec_dw[j0:j1] = dw
            # draw a full chunk like the reference path so the stream matches
            if L:
                tn = rng_tracer.standard_normal((_NOISE_CHUNK, L, 2))[:steps]
            else:
                tn = np.zeros((steps, 0, 2))
            bad = _flt._kernels.simulate_chunk(
                u, pos, kx, ky, rx, ry, lam, params.f, params.sigma, dt,
                cfg.sigma_x, ms.conj_pair, dw, tn, coeffs[j0 + 1:j1 + 1],
                positions[j0 + 1:j1 + 1], increments[j0:j1],
            )
            if bad >= 0:
                raise FloatingPointError(f"non-finite state at step {j0 + bad + 1}")
            j0 = j1
        tracers = TracerField(positions, increments)
        meta = {
            "kind": "lsm",
            "dt": dt,
            "t_final": cfg.t_final,
            "seed": cfg.seed,
            "sigma_x": cfg.sigma_x,
            "n_tracers": L,
        }
        noise_paths = {"modes": rec_dw} if rec_dw is not None else None
        return TruthRecord(times, coeffs, tuple(ms.labels), tracers, meta,
                           noise_paths)

    for j in range(n):
        if L:
            phases = np.exp(1j * (pos @ kvec))
            vel = np.stack(
                [(phases @ (u * r[:, 0])).real, (phases @ (u * r[:, 1])).real],
                axis=-1,
            )
            if tracer_chunk is None or tracer_pos_in_chunk >= tracer_chunk.shape[0]:
                tracer_chunk = rng_tracer.standard_normal((_NOISE_CHUNK, L, 2))
                tracer_pos_in_chunk = 0
            xi = tracer_chunk[tracer_pos_in_chunk]
            tracer_pos_in_chunk += 1
            incr = vel * dt + cfg.sigma_x * sq_dt * xi
            increments[j] = incr
            pos = wrap_positions(pos + incr)
            positions[j + 1] = pos

        dw = noise.next()
        if rec_dw is not None:
            rec_dw[j] = dw
        with np.errstate(over="ignore", invalid="ignore"):
            u = u + dt * _drift(params, ms, u) + _apply_mode_noise(params, ms, dw)
        u = ms.mirror(u)
        coeffs[j + 1] = u

        if not (np.all(np.isfinite(u.view(np.float64))) and np.all(np.isfinite(pos))):
            raise FloatingPointError(f"non-finite state at step {j + 1}")

    tracers = TracerField(positions, increments)
    meta = {
        "kind": "lsm",
        "dt": dt,
        "t_final": cfg.t_final,
        "seed": cfg.seed,
        "sigma_x": cfg.sigma_x,
        "n_tracers": L,
    }
    noise_paths = {"modes": rec_dw} if rec_dw is not None else None
    return TruthRecord(times, coeffs, tuple(ms.labels), tracers, meta, noise_paths)


def resimulate_with_noise(
    params: LsmParams, ms: ModeSet, record: TruthRecord
) -> np.ndarray:
    """Re-integrate the coefficient equations reusing a recorded noise path.

    Isolates the effect of parameter error: the Wiener increments per mode are
    those of the original run, only the coefficients differ.  Returns the
    coefficient series (n+1, K).
    """
    if record.noise_paths is None or "modes" not in record.noise_paths:
        raise ValueError("record has no stored noise paths")
    dw_series = record.noise_paths["modes"]
    n = dw_series.shape[0]
    dt = record.dt
    u = _stationary_mean(params, ms)
    u = ms.mirror(u)
    out = np.empty((n + 1, ms.size), dtype=complex)
    out[0] = u
    for j in range(n):
        u = u + dt * _drift(params, ms, u) + _apply_mode_noise(params, ms, dw_series[j])
        u = ms.mirror(u)
        out[j + 1] = u
    return out
