"""Monocular 3D pose lifting with hybrid Mamba / hypergraph streams, in numpy."""

from .model import HGMamba, ModelConfig, preset
from .skeleton import H36M, SkeletonSpec

__version__ = "0.1.0"
__all__ = ["H36M", "HGMamba", "ModelConfig", "SkeletonSpec", "preset"]
