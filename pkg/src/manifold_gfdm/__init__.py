"""Stabilized meshfree Laplace-Beltrami operators on point clouds."""

from .geometry import (FieldSpec, GeometryError, ManifoldSpec, PointCloud, analytic_frame,
                       analytic_laplacian, boundary_distance, load_xyz, sample_manifold, save_xyz)
from .stencil import Frame, NeighborTable, build_knn, estimate_tangent, frames_for, h_K_max
from .gmls import (RankDeficientStencil, RowWeights, WeightTable, assemble_operator,
                   enumerate_multi_indices, gmls_row_weights)

__version__ = "0.1.0"
