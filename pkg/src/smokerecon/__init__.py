"""Physics-constrained reconstruction of smoke density and velocity from sparse views."""
from .grid import DomainMasks, GridDims, StaggeredField
from .imaging import ImageSet, ProjectionOperator, build_projection, render
from .pipeline import FrameState, ReconConfig, psnr, reconstruct

__version__ = "0.1.0"

__all__ = [
    "GridDims",
    "StaggeredField",
    "DomainMasks",
    "ImageSet",
    "ProjectionOperator",
    "build_projection",
    "render",
    "ReconConfig",
    "FrameState",
    "reconstruct",
    "psnr",
]
