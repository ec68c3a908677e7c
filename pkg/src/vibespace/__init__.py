"""Vibe Space: graph-diffusion manifolds, flag-space geodesics, and feature blending."""

from vibespace.feature_io import FeatureGrid, read_feature_file, write_feature_file, synth_point_cloud
from vibespace.graph_spectral import (
    AffinityGraph,
    DiffusionMap,
    build_affinity,
    solve_diffusion_map,
    nystrom_diffusion_map,
    nystrom_extension,
    diffusion_distance,
)
from vibespace.flag_space import FlagScales, FlagKernel, flag_kernel, default_scales

__all__ = [
    "FeatureGrid",
    "read_feature_file",
    "write_feature_file",
    "synth_point_cloud",
    "AffinityGraph",
    "DiffusionMap",
    "build_affinity",
    "solve_diffusion_map",
    "nystrom_diffusion_map",
    "nystrom_extension",
    "diffusion_distance",
    "FlagScales",
    "FlagKernel",
    "flag_kernel",
    "default_scales",
]

__version__ = "0.1.0"
