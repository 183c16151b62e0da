"""Modular parcel-drone configuration, tuning and flight-validation toolkit."""

from .core import (GRAVITY, PARCELS, PLATFORMS, CentralModuleSpec, GainSet, InertiaDiag,
                   ModulePlacement, ModuleSpec, Morphology, ParcelSpec, SpecError, Spin,
                   box_inertia, composite_inertia, total_mass)
from .morphogen import (MorphogenWeights, NoViableConfiguration, RatioMode,
                        generate_morphology)

__version__ = "0.1.0"

__all__ = [
    "GRAVITY", "PARCELS", "PLATFORMS", "CentralModuleSpec", "GainSet", "InertiaDiag",
    "ModulePlacement", "ModuleSpec", "Morphology", "ParcelSpec", "SpecError", "Spin",
    "box_inertia", "composite_inertia", "total_mass", "MorphogenWeights",
    "NoViableConfiguration", "RatioMode", "generate_morphology", "__version__",
]
