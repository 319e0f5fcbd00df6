"""Spectral mode sets, eigenvectors, energy spectra and velocity synthesis.

A flow field on the torus is represented as a uniform background velocity
plus a sum of Fourier modes,

    v(x, t) = w(t) + sum_k vhat_k(t) exp(i k . x) r_k,

where each mode carries an eigenvector ``r_k`` determined by the physical
model (incompressible, shallow water, or a plain velocity-component basis).
The background ``w`` is stored as two extra self-conjugate modes with k = 0
and unit eigenvectors so that observation matrices stay rectangular and
uniform.  Every mode has a conjugate partner so that synthesised fields are
real; the pairing is an explicit, checkable involution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModeKind",
    "ModeIndex",
    "ModeSet",
    "LsmParams",
    "FlowCoefficients",
    "build_gb_modeset",
    "build_sw_modeset",
    "build_velocity_modeset",
    "build_layered_modeset",
    "energy_spectrum",
    "sigma_from_energy",
    "gb_params",
    "sw_params",
    "eval_velocity",
    "spectral_divergence",
]

#: Tolerance for the conjugate-eigenvector consistency check at construction.
_PAIR_TOL = 1e-12

#: Imaginary residual allowed in a synthesised velocity field.
IMAG_TOL = 1e-10


class ModeKind(enum.Enum):
    """Type of a spectral mode."""

    GB = "gb"
    GRAVITY_PLUS = "gp"
    GRAVITY_MINUS = "gm"
    MEAN_FLOW_X = "mfx"
    MEAN_FLOW_Y = "mfy"
    VEL_X = "vx"
    VEL_Y = "vy"


_MEAN_FLOW_KINDS = (ModeKind.MEAN_FLOW_X, ModeKind.MEAN_FLOW_Y)


@dataclass(frozen=True)
class ModeIndex:
    """Wavenumber plus mode type."""

    k: tuple[int, int]
    kind: ModeKind

    @property
    def label(self) -> str:
        return f"{self.kind.value}_{self.k[0]}_{self.k[1]}"


@dataclass(frozen=True)
class ModeSet:
    """Ordered collection of spectral modes with eigenvectors and pairing.

    Attributes:
        modes: tuple of ModeIndex, fixed deterministic order.
        eigenvectors: complex array (K, 3); components are (u, v, eta) with
            eta = 0 for purely two-component models.
        conj_pair: int array (K,), an involution; ``conj_pair[m] == m`` only
            for the self-conjugate mean-flow entries.
        include_mean_flow: whether the last two modes are the background
            velocity components.
    """

    modes: tuple[ModeIndex, ...]
    eigenvectors: np.ndarray
    conj_pair: np.ndarray
    include_mean_flow: bool = False
    wavenumbers: np.ndarray = field(init=False)

    def __post_init__(self):
        ks = np.array([m.k for m in self.modes], dtype=float)
        object.__setattr__(self, "wavenumbers", ks)
        self._validate()

    def _validate(self):
        K = len(self.modes)
        if self.eigenvectors.shape != (K, 3):
            raise ValueError("eigenvectors must have shape (K, 3)")
        pair = self.conj_pair
        if pair.shape != (K,):
            raise ValueError("conj_pair must have shape (K,)")
        if not np.array_equal(pair[pair], np.arange(K)):
            raise ValueError("conj_pair is not an involution")
        for m, idx in enumerate(self.modes):
            p = pair[m]
            if not np.array_equal(self.wavenumbers[p], -self.wavenumbers[m]):
                raise ValueError(f"paired mode of {idx.label} has wrong wavenumber")
            resid = np.abs(self.eigenvectors[p] - np.conj(self.eigenvectors[m])).max()
            if resid > _PAIR_TOL:
                raise ValueError(f"conjugate eigenvector mismatch at {idx.label}: {resid:.2e}")
            if idx.kind in _MEAN_FLOW_KINDS and idx.k != (0, 0):
                raise ValueError("mean-flow modes must carry k = (0, 0)")
            if (p == m) != (idx.kind in _MEAN_FLOW_KINDS):
                raise ValueError(f"self-pairing is reserved for mean-flow modes ({idx.label})")

    def __len__(self) -> int:
        return len(self.modes)

    @property
    def size(self) -> int:
        return len(self.modes)

    @property
    def velocity_eigenvectors(self) -> np.ndarray:
        """Velocity components of the eigenvectors, shape (K, 2)."""
        return self.eigenvectors[:, :2]

    @property
    def mean_flow_indices(self) -> np.ndarray:
        """Positions of the (MeanFlowX, MeanFlowY) modes; empty if absent."""
        if not self.include_mean_flow:
            return np.array([], dtype=int)
        kinds = [m.kind for m in self.modes]
        return np.array(
            [kinds.index(ModeKind.MEAN_FLOW_X), kinds.index(ModeKind.MEAN_FLOW_Y)]
        )

    @property
    def primary_mask(self) -> np.ndarray:
        """One representative per conjugate pair (self-paired entries included)."""
        return self.conj_pair >= np.arange(self.size)

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.modes]

    def kind_mask(self, *kinds: ModeKind) -> np.ndarray:
        return np.array([m.kind in kinds for m in self.modes])

    def mirror(self, values: np.ndarray) -> np.ndarray:
        """Enforce conjugate symmetry exactly from the primary entries.

        Works on the last axis of ``values`` (length K).
        """
        out = np.array(values, copy=True)
        prim = self.primary_mask
        pair = self.conj_pair
        out[..., pair[prim]] = np.conj(out[..., prim])
        mf = self.mean_flow_indices
        if mf.size:
            out[..., mf] = out[..., mf].real
        return out

    def conj_symmetry_residual(self, values: np.ndarray) -> float:
        """Max deviation from conjugate symmetry over the last axis."""
        resid = np.abs(values[..., self.conj_pair] - np.conj(values))
        return float(resid.max()) if resid.size else 0.0


def _grid_wavenumbers(kmax: int):
    """All integer wavenumbers with -kmax <= kx, ky <= kmax except (0, 0)."""
    ks = [
        (kx, ky)
        for kx in range(-kmax, kmax + 1)
        for ky in range(-kmax, kmax + 1)
        if (kx, ky) != (0, 0)
    ]
    return ks


def _gb_eigenvector(kx: int, ky: int) -> np.ndarray:
    k2 = kx * kx + ky * ky
    return np.array([-1j * ky, 1j * kx, 0.0], dtype=complex) / k2


def build_gb_modeset(kmax: int) -> ModeSet:
    """Incompressible (geophysically balanced) mode set on a square grid.

    Contains every wavenumber with -kmax <= kx, ky <= kmax except (0, 0),
    whose eigenvector is undefined; (2*kmax + 1)^2 - 1 modes in total.
    Eigenvectors are r_k = (-i ky, i kx)/|k|^2 and the conjugate pairing maps
    k to -k.
    """
    if kmax < 1:
        raise ValueError("kmax must be >= 1")
    ks = _grid_wavenumbers(kmax)
    modes = tuple(ModeIndex(k, ModeKind.GB) for k in ks)
    eig = np.array([_gb_eigenvector(*k) for k in ks])
    order = {k: i for i, k in enumerate(ks)}
    pair = np.array([order[(-kx, -ky)] for kx, ky in ks])
    return ModeSet(modes, eig, pair, include_mean_flow=False)


def _sw_gb_eigenvector(kx, ky):
    norm = np.sqrt(kx * kx + ky * ky + 1.0)
    return np.array([-1j * ky, 1j * kx, 1.0], dtype=complex) / norm


def _sw_gravity_eigenvector(kx, ky, sign, delta=1.0):
    k2 = kx * kx + ky * ky
    if k2 == 0:
        return np.array([sign * 1j, 1.0, 0.0], dtype=complex) / np.sqrt(2.0)
    s = np.sqrt(delta * k2 + 1.0)
    vec = np.array(
        [1j * ky + sign * kx * s, -1j * kx + sign * ky * s, delta * k2],
        dtype=complex,
    )
    return vec / (np.sqrt(k2) * np.sqrt((delta + delta**2) * k2 + 2.0))


def build_sw_modeset(kmax: int, rossby: float) -> ModeSet:
    """Rotating shallow-water mode set: one balanced and two gravity modes per k.

    The Froude number is tied to the Rossby number (delta = 1).  The balanced
    mode at k = (0, 0) is excluded, so the set stores 3*(2*kmax + 1)^2 - 1
    modes.  Gravity-mode frequencies are +-sqrt(|k|^2 + 1)/rossby and the
    pairing maps (k, +) to (-k, -).
    """
    if kmax < 1:
        raise ValueError("kmax must be >= 1")
    if rossby <= 0:
        raise ValueError("rossby must be positive")
    modes: list[ModeIndex] = []
    eig: list[np.ndarray] = []
    grid = [
        (kx, ky) for kx in range(-kmax, kmax + 1) for ky in range(-kmax, kmax + 1)
    ]
    for kx, ky in grid:
        if (kx, ky) != (0, 0):
            modes.append(ModeIndex((kx, ky), ModeKind.GB))
            eig.append(_sw_gb_eigenvector(kx, ky))
        modes.append(ModeIndex((kx, ky), ModeKind.GRAVITY_PLUS))
        eig.append(_sw_gravity_eigenvector(kx, ky, +1))
        modes.append(ModeIndex((kx, ky), ModeKind.GRAVITY_MINUS))
        eig.append(_sw_gravity_eigenvector(kx, ky, -1))
    order = {(m.k, m.kind): i for i, m in enumerate(modes)}
    flip = {
        ModeKind.GB: ModeKind.GB,
        ModeKind.GRAVITY_PLUS: ModeKind.GRAVITY_MINUS,
        ModeKind.GRAVITY_MINUS: ModeKind.GRAVITY_PLUS,
    }
    pair = np.array(
        [order[((-m.k[0], -m.k[1]), flip[m.kind])] for m in modes]
    )
    return ModeSet(tuple(modes), np.array(eig), pair, include_mean_flow=False)


_COMPONENT_EIG = {
    ModeKind.VEL_X: np.array([1.0, 0.0, 0.0], dtype=complex),
    ModeKind.VEL_Y: np.array([0.0, 1.0, 0.0], dtype=complex),
}


def _append_mean_flow(modes, eig):
    modes = list(modes) + [
        ModeIndex((0, 0), ModeKind.MEAN_FLOW_X),
        ModeIndex((0, 0), ModeKind.MEAN_FLOW_Y),
    ]
    eig = list(eig) + [
        np.array([1.0, 0.0, 0.0], dtype=complex),
        np.array([0.0, 1.0, 0.0], dtype=complex),
    ]
    return modes, eig


def build_velocity_modeset(kmax: int, include_mean_flow: bool = True) -> ModeSet:
    """Generic per-component Fourier basis for a 2-D velocity field.

    Used when nothing is known about the flow structure: every nonzero
    wavenumber carries two modes with constant eigenvectors (1, 0) and
    (0, 1).  The k = (0, 0) content lives in the mean-flow block.
    """
    if kmax < 1:
        raise ValueError("kmax must be >= 1")
    ks = _grid_wavenumbers(kmax)
    modes = []
    eig = []
    for k in ks:
        for kind in (ModeKind.VEL_X, ModeKind.VEL_Y):
            modes.append(ModeIndex(k, kind))
            eig.append(_COMPONENT_EIG[kind])
    if include_mean_flow:
        modes, eig = _append_mean_flow(modes, eig)
    order = {(m.k, m.kind): i for i, m in enumerate(modes)}
    pair = np.array(
        [
            order[((-m.k[0], -m.k[1]), m.kind)]
            if m.kind not in _MEAN_FLOW_KINDS
            else i
            for i, m in enumerate(modes)
        ]
    )
    return ModeSet(tuple(modes), np.array(eig), pair, include_mean_flow)


def build_layered_modeset(kmax: int) -> ModeSet:
    """Mode set matching the layered topographic model's velocity field.

    The y-velocity varies along x only, so the fluctuation modes sit at
    wavenumbers (k, 0), k = +-1..+-kmax, with eigenvector (0, 1); the zonal
    flow u is the x mean-flow component.
    """
    if kmax < 1:
        raise ValueError("kmax must be >= 1")
    ks = [(k, 0) for k in range(-kmax, kmax + 1) if k != 0]
    modes = [ModeIndex(k, ModeKind.VEL_Y) for k in ks]
    eig = [_COMPONENT_EIG[ModeKind.VEL_Y] for _ in ks]
    modes, eig = _append_mean_flow(modes, eig)
    order = {(m.k, m.kind): i for i, m in enumerate(modes)}
    pair = np.array(
        [
            order[((-m.k[0], -m.k[1]), m.kind)]
            if m.kind not in _MEAN_FLOW_KINDS
            else i
            for i, m in enumerate(modes)
        ]
    )
    return ModeSet(tuple(modes), np.array(eig), pair, include_mean_flow=True)


def energy_spectrum(k_mag, e0: float, k0: float, alpha_exp: float):
    """Assigned per-mode energy as a function of wavenumber magnitude.

    E(|k|) = |k| * e0 for |k| <= k0, and k0 * e0 * (|k|/k0)^(-alpha_exp)
    beyond; the two branches agree at |k| = k0.  Defined on fluctuations
    only: a zero wavenumber raises.
    """
    if e0 <= 0 or k0 <= 0:
        raise ValueError("e0 and k0 must be positive")
    k_mag = np.asarray(k_mag, dtype=float)
    if np.any(k_mag <= 0):
        raise ValueError("energy spectrum is defined for |k| > 0 only")
    out = np.where(k_mag <= k0, k_mag * e0, k0 * e0 * (k_mag / k0) ** (-alpha_exp))
    return float(out) if out.ndim == 0 else out


def sigma_from_energy(energy: float, d: float, f_mag: float = 0.0) -> float:
    """Noise amplitude matching a target mode energy.

    Inverts E = (f^2/d^2 + sigma^2/(2 d))/2 for sigma.  Raises if the
    requested (E, d, f) triple would need sigma^2 < 0.
    """
    if d <= 0:
        raise ValueError("damping must be positive")
    sigma2 = 4.0 * d * (energy - f_mag**2 / (2.0 * d**2))
    if sigma2 < 0:
        raise ValueError(
            f"inconsistent energy/damping/forcing: sigma^2 = {sigma2:.3e} < 0"
        )
    return float(np.sqrt(sigma2))


@dataclass(frozen=True)
class LsmParams:
    """Per-mode linear-stochastic-model coefficients aligned with a ModeSet.

    Fluctuation modes follow d vhat = ((-d + i omega) vhat + f) dt
    + sigma dW.  The two mean-flow positions hold the diagonal of the 2x2
    damping D0 in ``d``, the real forcing f0 in ``f``, and the diagonal of
    the noise matrix in ``sigma``; the anti-diagonal rotation entries of
    Omega0 and a full 2x2 noise matrix are stored separately.

    Attributes:
        d: (K,) dampings, all > 0.
        omega: (K,) frequencies (0 at mean-flow positions).
        f: (K,) complex forcings (real at mean-flow positions).
        sigma: (K,) noise amplitudes, >= 0.
        omega0: mean-flow anti-diagonal (upper, lower) or None.
        sigma0: mean-flow 2x2 noise matrix or None (defaults to
            diag(sigma[mean-flow]) when the mode set has a mean flow).
    """

    d: np.ndarray
    omega: np.ndarray
    f: np.ndarray
    sigma: np.ndarray
    omega0: tuple[float, float] | None = None
    sigma0: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))
        object.__setattr__(self, "f", np.asarray(self.f, dtype=complex))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if self.sigma0 is not None:
            object.__setattr__(self, "sigma0", np.asarray(self.sigma0, dtype=float))
        if np.any(self.d <= 0):
            raise ValueError("all dampings must be positive")
        if np.any(self.sigma < 0):
            raise ValueError("noise amplitudes must be nonnegative")

    @property
    def size(self) -> int:
        return self.d.size

    def lam(self) -> np.ndarray:
        """Diagonal drift -d + i*omega as a complex vector."""
        return -self.d + 1j * self.omega

    def validate_for(self, ms: ModeSet, tol: float = 1e-10):
        """Check shape and conjugate-pair consistency against a mode set."""
        if self.size != ms.size:
            raise ValueError("parameter arrays do not match the mode set size")
        pair = ms.conj_pair
        if np.abs(self.d[pair] - self.d).max() > tol:
            raise ValueError("paired dampings differ")
        if np.abs(self.sigma[pair] - self.sigma).max() > tol:
            raise ValueError("paired noise amplitudes differ")
        if np.abs(self.omega[pair] + self.omega).max() > tol:
            raise ValueError("paired frequencies must be negated")
        if np.abs(self.f[pair] - np.conj(self.f)).max() > tol:
            raise ValueError("paired forcings must be conjugated")
        if ms.include_mean_flow and self.sigma0 is None:
            raise ValueError("mode set has a mean flow but sigma0 is missing")

    def replace(self, **kw) -> "LsmParams":
        data = {
            "d": self.d,
            "omega": self.omega,
            "f": self.f,
            "sigma": self.sigma,
            "omega0": self.omega0,
            "sigma0": self.sigma0,
        }
        data.update(kw)
        return LsmParams(**data)


def mean_flow_drift_matrix(params: LsmParams, ms: ModeSet) -> np.ndarray | None:
    """2x2 drift -D0 + Omega0 of the mean-flow block, or None if absent."""
    mf = ms.mean_flow_indices
    if mf.size == 0:
        return None
    a, b = params.omega0 if params.omega0 is not None else (0.0, 0.0)
    d1, d2 = params.d[mf]
    return np.array([[-d1, a], [b, -d2]])


def gb_params(
    ms: ModeSet,
    d0: float = 0.3,
    nu: float = 0.05,
    e0: float = 1.0,
    k0: float = 2.0,
    alpha_exp: float = 3.0,
) -> LsmParams:
    """True parameters of the incompressible test model.

    Zero forcing and frequency; damping d + nu*|k|^2; noise from the assigned
    energy spectrum.
    """
    kmag = np.linalg.norm(ms.wavenumbers, axis=1)
    d = d0 + nu * kmag**2
    energy = energy_spectrum(kmag, e0, k0, alpha_exp)
    sigma = np.array([sigma_from_energy(e, dk) for e, dk in zip(energy, d)])
    zeros = np.zeros(ms.size)
    return LsmParams(d=d, omega=zeros, f=zeros.astype(complex), sigma=sigma)


def sw_params(
    ms: ModeSet,
    rossby: float = 1.0,
    d0: float = 0.3,
    nu: float = 0.05,
    e0: float = 1.0,
    k0: float = 2.0,
    alpha_exp: float = 3.0,
    gravity_energy_fraction: float = 0.25,
) -> LsmParams:
    """True parameters of the shallow-water test model.

    All mode kinds share the balanced-model damping and zero forcing; gravity
    modes oscillate at +-sqrt(|k|^2 + 1)/rossby and carry a fixed fraction of
    the balanced energy.  The k = 0 gravity modes get the |k| -> 0 spectrum
    limit (zero energy, hence zero noise).
    """
    kmag = np.linalg.norm(ms.wavenumbers, axis=1)
    d = d0 + nu * kmag**2
    omega = np.zeros(ms.size)
    energy = np.zeros(ms.size)
    gravity = ms.kind_mask(ModeKind.GRAVITY_PLUS, ModeKind.GRAVITY_MINUS)
    sign = np.where(ms.kind_mask(ModeKind.GRAVITY_PLUS), 1.0, -1.0)
    omega[gravity] = (sign * np.sqrt(kmag**2 + 1.0) / rossby)[gravity]
    nz = kmag > 0
    energy[nz] = energy_spectrum(kmag[nz], e0, k0, alpha_exp)
    energy[gravity] *= gravity_energy_fraction
    sigma = np.array([sigma_from_energy(e, dk) if e > 0 else 0.0 for e, dk in zip(energy, d)])
    return LsmParams(d=d, omega=omega, f=np.zeros(ms.size, dtype=complex), sigma=sigma)


@dataclass(frozen=True)
class FlowCoefficients:
    """Spectral coefficient vector at one time, conjugate-symmetric."""

    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=complex))

    def check_symmetry(self, ms: ModeSet, tol: float = _PAIR_TOL):
        resid = ms.conj_symmetry_residual(self.values)
        if resid > tol:
            raise ValueError(f"broken conjugate symmetry: residual {resid:.2e}")
        mf = ms.mean_flow_indices
        if mf.size and np.abs(self.values[mf].imag).max() > tol:
            raise ValueError("mean-flow coefficients must be real")


def synthesis_matrix(ms: ModeSet, x: np.ndarray) -> np.ndarray:
    """Phase matrix exp(i k . x) for points ``x`` of shape (N, 2) -> (N, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.exp(1j * (x @ ms.wavenumbers.T))


def _synthesize(values: np.ndarray, ms: ModeSet, x: np.ndarray) -> np.ndarray:
    """Complex velocity field at points x, shape (N, 2); no symmetry checks."""
    phases = synthesis_matrix(ms, x)
    r = ms.velocity_eigenvectors
    return np.stack(
        [phases @ (values * r[:, 0]), phases @ (values * r[:, 1])], axis=-1
    )


def eval_velocity(u, ms: ModeSet, x) -> np.ndarray:
    """Physical velocity at one or more points.

    Args:
        u: FlowCoefficients or a complex (K,) vector satisfying conjugate
            symmetry.
        ms: the mode set.
        x: point (2,) or points (N, 2) on the torus.

    Returns:
        Real velocity, shape (2,) or (N, 2).

    Raises:
        ValueError: if the coefficients break conjugate symmetry or the
            synthesised field has imaginary residual above 1e-10.
    """
    values = u.values if isinstance(u, FlowCoefficients) else np.asarray(u, dtype=complex)
    FlowCoefficients(values).check_symmetry(ms, tol=IMAG_TOL)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    vel = _synthesize(values, ms, x)
    resid = np.abs(vel.imag).max() if vel.size else 0.0
    if resid > IMAG_TOL:
        raise ValueError(f"synthesised field has imaginary residual {resid:.2e}")
    out = vel.real
    return out[0] if single else out


def spectral_divergence(u, ms: ModeSet, n_grid: int = 64) -> float:
    """Max divergence of the synthesised field relative to its gradient scale.

    Differentiation is spectral (exact for band-limited fields), so an
    incompressible coefficient vector yields a residual at machine precision.
    """
    values = u.values if isinstance(u, FlowCoefficients) else np.asarray(u, dtype=complex)
    grid_1d = np.linspace(0.0, 2.0 * np.pi, n_grid, endpoint=False)
    xx, yy = np.meshgrid(grid_1d, grid_1d, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    phases = synthesis_matrix(ms, pts)
    r = ms.velocity_eigenvectors
    kx, ky = ms.wavenumbers[:, 0], ms.wavenumbers[:, 1]
    div = phases @ (1j * (kx * r[:, 0] + ky * r[:, 1]) * values)
    dvx_dx = phases @ (1j * kx * r[:, 0] * values)
    dvy_dy = phases @ (1j * ky * r[:, 1] * values)
    scale = max(np.abs(dvx_dx).max(), np.abs(dvy_dy).max(), 1e-300)
    return float(np.abs(div).max() / scale)
