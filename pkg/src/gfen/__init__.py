"""Graph-fused elastic net smoothing of spatiotemporal densities."""

__version__ = "0.1.0"

from .admm import AdmmOptions, NodeLoss, PenaltyConfig, SplitField, fit_map, gfl_mode, gmrf_mode
from .graph import SpatioTemporalGraph, build_graph, decompose_trails, grid_graph
from .tree import DensityModel, DyadicTree, bin_observations, build_quantile_tree, reconstruct_density
from .tv import tv1_prox, tv2_prox

__all__ = [
    "AdmmOptions",
    "DensityModel",
    "DyadicTree",
    "NodeLoss",
    "PenaltyConfig",
    "SpatioTemporalGraph",
    "SplitField",
    "bin_observations",
    "build_graph",
    "build_quantile_tree",
    "decompose_trails",
    "fit_map",
    "gfl_mode",
    "gmrf_mode",
    "grid_graph",
    "reconstruct_density",
    "tv1_prox",
    "tv2_prox",
]
