"""Continuous-time Lagrangian data assimilation with linear stochastic flow models."""

from .modes import (
    FlowCoefficients,
    LsmParams,
    ModeIndex,
    ModeKind,
    ModeSet,
    build_gb_modeset,
    build_layered_modeset,
    build_sw_modeset,
    build_velocity_modeset,
    energy_spectrum,
    eval_velocity,
    gb_params,
    sigma_from_energy,
    sw_params,
)
from .simulate import (
    ObservationSeries,
    SimConfig,
    TracerField,
    TruthRecord,
    resimulate_with_noise,
    simulate_coupled,
)
from .torus import unwrap_increment, wrap_positions

__version__ = "0.1.0"
