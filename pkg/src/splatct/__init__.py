"""CT reconstruction from trainable isotropic Gaussians.

The volume is modeled as a sum of isotropic Gaussians splatted onto the
voxel grid by a boundary-clipped fast kernel; all Gaussian parameters are
optimized jointly against measured projections with analytic gradients.
"""

from .core import (
    BoxConfig,
    GaussianCloud,
    OffsetGrid,
    ParamGradients,
    ScanGeometry,
    Sinogram,
    ValidationError,
    VolumeGrid,
    make_offset_grid,
    validate_cloud,
)

__version__ = "0.1.0"

__all__ = [
    "BoxConfig",
    "GaussianCloud",
    "OffsetGrid",
    "ParamGradients",
    "ScanGeometry",
    "Sinogram",
    "ValidationError",
    "VolumeGrid",
    "make_offset_grid",
    "validate_cloud",
    "__version__",
]
