"""Semantic Gaussian occupancy: splatting, rendering, propagation and metrics."""

import numba

# the TBB layer is not installed everywhere; OpenMP gives the same kernels
numba.config.THREADING_LAYER = "omp"

from .core import (  # noqa: E402
    GaussianParams,
    GaussianSet,
    GaussOccError,
    OccupancyField,
    Pose,
    QueryParams,
    RaySet,
    SceneQuery,
    SemanticGaussian,
    VoxelGrid,
    decode_queries,
    decode_query,
)

__version__ = "0.1.0"

__all__ = [
    "GaussianParams",
    "GaussianSet",
    "GaussOccError",
    "OccupancyField",
    "Pose",
    "QueryParams",
    "RaySet",
    "SceneQuery",
    "SemanticGaussian",
    "VoxelGrid",
    "decode_queries",
    "decode_query",
]
