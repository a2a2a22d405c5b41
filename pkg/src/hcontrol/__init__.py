"""Training-free conditional sampling on flow-matching models.

The package bundles an h-control sampler (outer masked guidance plus an
inner block-conditional pseudo-Gibbs refinement) with the usual
training-free baselines, toy densities with exact oracles, and a
block-precision locality diagnostic.
"""

from hcontrol.schedule import (
    Lattice,
    NoiseSchedule,
    PatchPartition,
    SiteMask,
    build_schedule,
    mask_compose,
    partition_complement,
)

__all__ = [
    "Lattice",
    "NoiseSchedule",
    "PatchPartition",
    "SiteMask",
    "build_schedule",
    "mask_compose",
    "partition_complement",
]

__version__ = "0.1.0"
