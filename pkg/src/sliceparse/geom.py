"""Voxel occupancy grids, slicing, silhouettes, meshes, and evaluation metrics.

Conventions used throughout the package:

* Occupancy arrays are boolean, C-ordered, shape ``(nx, ny, nz)``.
* Cells are cubes of side ``voxel_size``; cell ``(i, j, k)`` spans the world
  box ``origin + voxel_size * [i, i+1] x [j, j+1] x [k, k+1]`` and its center
  sits at ``origin + voxel_size * (i + 0.5, j + 0.5, k + 0.5)``.
* A silhouette collapses one axis: FRONT looks along Y, TOP along Z, END
  along X.  Image rows/cols map to the remaining grid axes in (x, y, z)
  order, so the TOP image of a single voxel at (i, j, k) lights pixel (i, j).
* Occupancy of a mesh is decided at cell centers by parity ray casting.

All values here are immutable after construction and every operation is a
pure function, so they are safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class Axis(IntEnum):
    X = 0
    Y = 1
    Z = 2


class View(IntEnum):
    FRONT = 0  # collapses Y
    TOP = 1    # collapses Z
    END = 2    # collapses X


#: Grid axis collapsed by each view.
VIEW_AXIS = {View.FRONT: Axis.Y, View.TOP: Axis.Z, View.END: Axis.X}

#: (row axis, col axis) of each view's image.
VIEW_IMAGE_AXES = {
    View.FRONT: (Axis.X, Axis.Z),
    View.TOP: (Axis.X, Axis.Y),
    View.END: (Axis.Y, Axis.Z),
}


class MeshError(ValueError):
    """Raised for meshes that violate a structural requirement."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class VoxelGrid:
    """Binary occupancy model of a solid.

    ``occupancy`` is a boolean array of shape ``dims``; the array is made
    read-only on construction.
    """

    occupancy: np.ndarray
    voxel_size: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.ndim != 3 or min(occ.shape) < 1:
            raise ValueError(f"occupancy must be 3-D with positive dims, got shape {occ.shape}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "occupancy", _frozen(occ))
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    def count(self) -> int:
        return int(self.occupancy.sum())

    def is_empty(self) -> bool:
        return not self.occupancy.any()

    def with_occupancy(self, occ: np.ndarray) -> "VoxelGrid":
        """New grid in the same world frame with different occupancy."""
        if occ.shape != self.dims:
            raise ValueError("occupancy shape mismatch")
        return VoxelGrid(occ, self.voxel_size, self.origin)

    def cell_centers_1d(self, axis: Axis) -> np.ndarray:
        n = self.dims[axis]
        return self.origin[axis] + self.voxel_size * (np.arange(n) + 0.5)


@dataclass(frozen=True)
class CrossSection:
    """One planar slice of a grid perpendicular to ``axis`` at cell layer ``plane_index``."""

    axis: Axis
    plane_index: int
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", _frozen(np.asarray(self.mask, dtype=bool)))


@dataclass(frozen=True)
class ProjectionImage:
    """Orthographic silhouette of a grid along one view axis."""

    view: View
    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen(np.asarray(self.pixels, dtype=bool)))


@dataclass(frozen=True)
class Cuboid:
    """Axis-aligned box of grid cells, inclusive on both corners."""

    min_corner: tuple[int, int, int]
    max_corner: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(c) for c in self.min_corner)
        hi = tuple(int(c) for c in self.max_corner)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate cuboid {lo}..{hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    def cell_count(self) -> int:
        return int(np.prod([b - a + 1 for a, b in zip(self.min_corner, self.max_corner)]))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b + 1) for a, b in zip(self.min_corner, self.max_corner))

    def mask(self, dims: tuple[int, int, int]) -> np.ndarray:
        m = np.zeros(dims, dtype=bool)
        m[self.slices()] = True
        return m


class TriMesh:
    """Indexed triangle mesh.

    ``closed=True`` asserts the surface is edge-manifold (every edge shared by
    exactly two triangles); use :meth:`check_closed` to verify.
    Degenerate (zero-area) triangles are rejected on construction.
    """

    def __init__(self, vertices, triangles, closed: bool = False):
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        if len(t):
            a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
            areas = np.linalg.norm(np.cross(b - a, c - a), axis=1)
            scale = max(1.0, float(np.abs(v).max()))
            if (areas <= 1e-12 * scale * scale).any():
                raise MeshError("degenerate (zero-area) triangle")
        self.vertices = _frozen(v)
        self.triangles = _frozen(t)
        self.closed = bool(closed)

    @classmethod
    def empty(cls, closed: bool = False) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), closed=closed)

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def signed_volume(self) -> float:
        """Volume enclosed by the surface (divergence theorem); positive for
        consistently outward-wound closed meshes."""
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return float(np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0)

    def edge_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for e0, e1 in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(min(e0, e1)), int(max(e0, e1)))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def check_closed(self) -> bool:
        """True iff every edge is shared by exactly two triangles."""
        if self.is_empty():
            return True
        return all(c == 2 for c in self.edge_counts().values())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise MeshError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @staticmethod
    def concatenate(meshes: list["TriMesh"], closed: bool = False) -> "TriMesh":
        meshes = [m for m in meshes if not m.is_empty()]
        if not meshes:
            return TriMesh.empty(closed=closed)
        verts, tris, base = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + base)
            base += len(m.vertices)
        return TriMesh(np.vstack(verts), np.vstack(tris), closed=closed)


# ---------------------------------------------------------------------------
# voxelization


def _ray_hits(origin_yz: np.ndarray, v0, v1, v2) -> tuple[np.ndarray, bool]:
    """Crossing x-coordinates of an +X ray through ``origin_yz = (y, z)``.

    Returns (sorted crossing xs, degenerate_flag).  A hit is degenerate when
    the ray grazes a triangle edge/vertex or lies in the triangle plane, in
    which case parity is ambiguous and the caller must re-cast.
    """
    eps = 1e-12
    # Work in the plane perpendicular to the ray: triangle projected to (y, z).
    p0 = v0[:, 1:] - origin_yz
    p1 = v1[:, 1:] - origin_yz
    p2 = v2[:, 1:] - origin_yz
    # Signed areas of sub-triangles formed with the ray point at the origin.
    d0 = p1[:, 0] * p2[:, 1] - p1[:, 1] * p2[:, 0]
    d1 = p2[:, 0] * p0[:, 1] - p2[:, 1] * p0[:, 0]
    d2 = p0[:, 0] * p1[:, 1] - p0[:, 1] * p1[:, 0]
    total = d0 + d1 + d2
    scale = np.maximum(np.abs(p0).max(initial=1.0), 1.0) ** 2
    on_edge = (np.abs(d0) <= eps * scale) | (np.abs(d1) <= eps * scale) | (np.abs(d2) <= eps * scale)
    same_sign = ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    degenerate_plane = np.abs(total) <= eps * scale  # triangle edge-on to the ray
    inside = same_sign & ~degenerate_plane
    if (inside & on_edge).any() or (degenerate_plane & same_sign).any():
        return np.empty(0), True
    if not inside.any():
        return np.empty(0), False
    w0 = d0[inside] / total[inside]
    w1 = d1[inside] / total[inside]
    w2 = d2[inside] / total[inside]
    xs = w0 * v0[inside, 0] + w1 * v1[inside, 0] + w2 * v2[inside, 0]
    return np.sort(xs), False


def _cast_layer(mesh: TriMesh, y: float, z: float, centers_x: np.ndarray,
                voxel_size: float) -> np.ndarray:
    """Inside/outside flags at the given x cell centers for one (y, z) ray.

    Exact hits are resolved by re-casting from a nudged origin, first by half
    a cell in Y and Z, then through a deterministic shrinking offset cycle.
    """
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    h = 0.5 * voxel_size
    offsets = [(0.0, 0.0), (h, h), (h, -h), (-h, h), (-h, -h),
               (h / 2, h / 2), (h / 2, -h / 2), (-h / 2, h / 2), (h / 4, h / 4)]
    for dy, dz in offsets:
        xs, bad = _ray_hits(np.array([y + dy, z + dz]), v0, v1, v2)
        if not bad:
            # crossings strictly before the center; a center exactly on the
            # surface counts as outside.
            counts = np.searchsorted(xs, centers_x, side="left")
            exact = np.searchsorted(xs, centers_x, side="right") > counts
            return (counts % 2 == 1) & ~exact
    raise MeshError("could not resolve ray parity after nudging; mesh may be degenerate")


def _voxelize_into_frame(mesh: TriMesh, dims, voxel_size, origin) -> np.ndarray:
    occ = np.zeros(dims, dtype=bool)
    lo, hi = mesh.bounds()
    centers_x = origin[0] + voxel_size * (np.arange(dims[0]) + 0.5)
    centers_y = origin[1] + voxel_size * (np.arange(dims[1]) + 0.5)
    centers_z = origin[2] + voxel_size * (np.arange(dims[2]) + 0.5)
    # Only rows whose ray can strike the mesh bounding box need casting.
    pad = 1e-9 * max(1.0, float(np.abs(mesh.vertices).max()))
    js = np.nonzero((centers_y >= lo[1] - pad) & (centers_y <= hi[1] + pad))[0]
    ks = np.nonzero((centers_z >= lo[2] - pad) & (centers_z <= hi[2] + pad))[0]
    for j in js:
        for k in ks:
            occ[:, j, k] = _cast_layer(mesh, centers_y[j], centers_z[k], centers_x, voxel_size)
    return occ


def voxelize(mesh: TriMesh, resolution: int) -> VoxelGrid:
    """Rasterize a closed mesh into a cubic occupancy grid.

    The grid has ``resolution`` cells per side with cubic cells sized by the
    largest bounding-box extent, centered on the mesh bounding box.  A cell is
    occupied iff its center lies inside the mesh.

    Raises MeshError for empty or non-watertight input, ValueError for
    resolution < 2.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    if mesh.is_empty():
        raise MeshError("cannot voxelize an empty mesh")
    if not mesh.check_closed():
        raise MeshError("non-watertight input")
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if extent <= 0:
        raise MeshError("mesh has zero extent")
    voxel_size = extent / resolution
    center = (lo + hi) / 2.0
    origin = tuple(center - resolution * voxel_size / 2.0)
    dims = (resolution, resolution, resolution)
    return VoxelGrid(_voxelize_into_frame(mesh, dims, voxel_size, origin), voxel_size, origin)


def voxelize_like(mesh: TriMesh, frame: VoxelGrid) -> VoxelGrid:
    """Rasterize a closed mesh into an existing grid's frame.

    Empty meshes map to an all-false grid (unlike :func:`voxelize`, which
    rejects them), so reconstruction outputs can always be compared.
    """
    if mesh.is_empty():
        return frame.with_occupancy(np.zeros(frame.dims, dtype=bool))
    if not mesh.check_closed():
        raise MeshError("non-watertight input")
    occ = _voxelize_into_frame(mesh, frame.dims, frame.voxel_size, frame.origin)
    return frame.with_occupancy(occ)


# ---------------------------------------------------------------------------
# slicing and projection


def slice_layers(n: int, count: int) -> list[int]:
    """The ``count`` cell layers closest to uniform fractions of an n-cell axis."""
    if count < 1:
        raise ValueError("count must be positive")
    if count > n:
        raise ValueError(f"cannot take {count} slices from {n} layers")
    return [min(int((i + 0.5) * n / count), n - 1) for i in range(count)]


def extract_slices(grid: VoxelGrid, axis: Axis, count: int) -> list[CrossSection]:
    """Uniformly spaced cross-sections of the grid perpendicular to ``axis``."""
    layers = slice_layers(grid.dims[axis], count)
    out = []
    for k in layers:
        mask = np.take(grid.occupancy, k, axis=int(axis))
        out.append(CrossSection(axis=axis, plane_index=k, mask=mask))
    return out


def project(grid: VoxelGrid, view: View) -> ProjectionImage:
    """Orthographic silhouette: pixel true iff any occupied cell along the view axis."""
    return ProjectionImage(view=view, pixels=grid.occupancy.any(axis=int(VIEW_AXIS[view])))


def project_mask(occ: np.ndarray, view: View) -> np.ndarray:
    return occ.any(axis=int(VIEW_AXIS[view]))


# ---------------------------------------------------------------------------
# metrics


def volume_iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """Intersection-over-union of occupied cells; 1.0 when both grids are empty."""
    if a.dims != b.dims:
        raise ValueError(f"grid dims differ: {a.dims} vs {b.dims}")
    return mask_iou(a.occupancy, b.occupancy)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def surface_shell(occ: np.ndarray) -> np.ndarray:
    """Occupied cells 6-adjacent to an unoccupied or out-of-bounds cell."""
    padded = np.pad(occ, 1, constant_values=False)
    core = padded[1:-1, 1:-1, 1:-1]
    nbr_all = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    return core & ~nbr_all


def surface_iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """IoU of the two solids' surface shells, each dilated by one cell.

    The dilation (26-neighborhood) makes the metric tolerate one-cell
    offsets between the surfaces.
    """
    if a.dims != b.dims:
        raise ValueError(f"grid dims differ: {a.dims} vs {b.dims}")
    struct = np.ones((3, 3, 3), dtype=bool)
    sa = ndimage.binary_dilation(surface_shell(a.occupancy), structure=struct)
    sb = ndimage.binary_dilation(surface_shell(b.occupancy), structure=struct)
    return mask_iou(sa, sb)


def sample_surface(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """Area-uniform point samples on the mesh surface (deterministic per seed)."""
    if n < 1:
        raise ValueError("sample count must be positive")
    if mesh.is_empty():
        raise MeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    idx = rng.choice(len(areas), size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a = mesh.vertices[mesh.triangles[idx, 0]]
    b = mesh.vertices[mesh.triangles[idx, 1]]
    c = mesh.vertices[mesh.triangles[idx, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def chamfer_l1(a: TriMesh, b: TriMesh, samples: int, seed_a: int = 0, seed_b: int = 1) -> float:
    """Symmetric mean nearest-neighbor L1 distance between surface samples.

    Each mesh is sampled area-uniformly with its own seed, so swapping the
    meshes together with their seeds gives the identical value.
    """
    if samples < 1:
        raise ValueError("sample count must be positive")
    pa = sample_surface(a, samples, seed_a)
    pb = sample_surface(b, samples, seed_b)
    d_ab, _ = cKDTree(pb).query(pa, k=1, p=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1, p=1)
    return 0.5 * float(d_ab.mean()) + 0.5 * float(d_ba.mean())


# ---------------------------------------------------------------------------
# 2-D components and grid editing

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """4-connected components of a boolean image, as boolean masks.

    Sorted by size descending; ties broken by the smallest (row, col)
    coordinate of any member.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_CROSS)
    comps = []
    for lab in range(1, n + 1):
        m = labels == lab
        rs, cs = np.nonzero(m)
        first = min(zip(rs.tolist(), cs.tolist()))
        comps.append((int(m.sum()), first, m))
    comps.sort(key=lambda t: (-t[0], t[1]))
    return [m for _, _, m in comps]


def clip(grid: VoxelGrid, box: Cuboid) -> VoxelGrid:
    """Occupancy zeroed outside the box; dims unchanged."""
    for lo, hi, n in zip(box.min_corner, box.max_corner, grid.dims):
        if lo < 0 or hi >= n:
            raise ValueError(f"cuboid {box.min_corner}..{box.max_corner} exceeds grid dims {grid.dims}")
    occ = np.zeros(grid.dims, dtype=bool)
    sl = box.slices()
    occ[sl] = grid.occupancy[sl]
    return grid.with_occupancy(occ)


def bounding_cuboid(occ: np.ndarray) -> Cuboid:
    """Tight cell bounds of the true cells; raises on an all-false array."""
    idx = np.nonzero(occ)
    if len(idx[0]) == 0:
        raise ValueError("no occupied cells")
    return Cuboid(tuple(int(x.min()) for x in idx), tuple(int(x.max()) for x in idx))


# ---------------------------------------------------------------------------
# grid -> boundary mesh

# For each face direction: (axis, sign, corner offsets in CCW order seen from outside).
_FACE_TABLE = [
    (0, -1, [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)]),
    (0, +1, [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)]),
    (1, -1, [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)]),
    (1, +1, [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)]),
    (2, -1, [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)]),
    (2, +1, [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]),
]


def grid_to_mesh(grid: VoxelGrid) -> TriMesh:
    """Closed triangle mesh of the grid's occupied-cell boundary, in world units."""
    occ = grid.occupancy
    if not occ.any():
        return TriMesh.empty(closed=True)
    vert_index: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[int, int, int]] = []
    tris: list[tuple[int, int, int]] = []

    def vid(p):
        i = vert_index.get(p)
        if i is None:
            i = len(verts)
            vert_index[p] = i
            verts.append(p)
        return i

    padded = np.pad(occ, 1, constant_values=False)
    for axis, sign, offsets in _FACE_TABLE:
        shift_lo = [slice(1, -1)] * 3
        shift_lo[axis] = slice(0, -2) if sign < 0 else slice(2, None)
        exposed = occ & ~padded[tuple(shift_lo)]
        for i, j, k in zip(*np.nonzero(exposed)):
            q = [vid((int(i) + o[0], int(j) + o[1], int(k) + o[2])) for o in offsets]
            tris.append((q[0], q[1], q[2]))
            tris.append((q[0], q[2], q[3]))
    v = np.asarray(verts, dtype=np.float64) * grid.voxel_size + np.asarray(grid.origin)
    return TriMesh(v, np.asarray(tris), closed=True)
