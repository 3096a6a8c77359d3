"""assimlab: desk-scale data assimilation with physics-regularized score
diffusion over a rotating shallow-water toy system."""

__version__ = "0.1.0"

from .fields import (
    GridSpec,
    NormStats,
    ObservationSet,
    StateField,
    apply_mask,
    compute_stats,
    denormalize,
    normalize,
    sample_mask,
    toy_grid,
)
from .shallow_water import ToyParams, balanced_random_state, generate_dataset, rk4_step
from .physics import balance_residual, pde_tendencies, residual_energy, spectral_gradient

__all__ = [
    "GridSpec", "NormStats", "ObservationSet", "StateField", "ToyParams",
    "apply_mask", "balance_residual", "balanced_random_state", "compute_stats",
    "denormalize", "generate_dataset", "normalize", "pde_tendencies",
    "residual_energy", "rk4_step", "sample_mask", "spectral_gradient",
    "toy_grid",
]
