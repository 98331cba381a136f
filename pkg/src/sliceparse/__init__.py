"""Shape reconstruction from planar cross-sections and orthographic silhouettes.

The pipeline decomposes a solid into simple parts by sequential axis-aligned
cuts (a learned policy with a heuristic teacher) and surfaces each part by
stitching its cross-section contours.
"""

__version__ = "0.1.0"

from .geom import (
    Axis,
    CrossSection,
    Cuboid,
    MeshError,
    ProjectionImage,
    TriMesh,
    View,
    VoxelGrid,
    chamfer_l1,
    clip,
    connected_components,
    extract_slices,
    grid_to_mesh,
    project,
    surface_iou,
    volume_iou,
    voxelize,
    voxelize_like,
)
