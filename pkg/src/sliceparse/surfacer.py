"""Surfacing a cut part from its cross-section contours.

Per slice, each 4-connected region's outline is traced along cell edges, so
contours are simple closed polygons with positive area even for one-cell-wide
regions (holes are dropped).  Contours of consecutive slices are matched by
center and size, matched pairs are lofted with triangle strips, and every
unmatched end is extruded to its slab face and capped.  The assembled mesh is
closed: every edge is shared by exactly two triangles.

Contour coordinates are cell-corner lattice positions (row, col) in the slice
mask frame; cell (r, c) spans [r, r+1] x [c, c+1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Axis, Cuboid, MeshError, TriMesh, VoxelGrid, connected_components


@dataclass(frozen=True)
class Contour:
    """Closed CCW outline of one region in one slice."""

    points: np.ndarray  # (n, 2) float, (row, col) lattice coords
    plane_index: int
    centroid: tuple[float, float]
    area: float

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class PartSlices:
    """Contours of a part, one entry per slice plane in increasing order.

    ``planes`` maps each slice layer to its (possibly empty) contour list;
    empty layers break the lofting chain.  ``voxel_size``/``origin`` place the
    output mesh in world units.  ``axis_bounds`` limits how far end caps may
    extend along the slice axis (in lattice units); by default one cell
    beyond the first and last listed planes.
    """

    axis: Axis
    planes: tuple[tuple[int, tuple[Contour, ...]], ...]
    voxel_size: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_bounds: tuple[float, float] | None = None
    diag: float | None = None

    def __post_init__(self):
        layers = [k for k, _ in self.planes]
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError("slice planes must be strictly increasing")
        if self.axis_bounds is None and layers:
            object.__setattr__(self, "axis_bounds", (float(layers[0]), float(layers[-1] + 1)))


# ---------------------------------------------------------------------------
# contour extraction


def _polygon_area(pts: np.ndarray) -> float:
    u, v = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(u, np.roll(v, -1)) - np.dot(np.roll(u, -1), v))


def _polygon_centroid(pts: np.ndarray) -> tuple[float, float]:
    u, v = pts[:, 0], pts[:, 1]
    cross = u * np.roll(v, -1) - np.roll(u, -1) * v
    area = 0.5 * cross.sum()
    if abs(area) < 1e-12:
        return (float(u.mean()), float(v.mean()))
    cu = float(((u + np.roll(u, -1)) * cross).sum() / (6.0 * area))
    cv = float(((v + np.roll(v, -1)) * cross).sum() / (6.0 * area))
    return (cu, cv)


def _simplify_collinear(pts: list[tuple[float, float]]) -> list[tuple[float, float]]:
    out = []
    n = len(pts)
    for i in range(n):
        p, q, r = pts[i - 1], pts[i], pts[(i + 1) % n]
        cross = (q[0] - p[0]) * (r[1] - q[1]) - (q[1] - p[1]) * (r[0] - q[0])
        if abs(cross) > 1e-12:
            out.append(q)
    return out


def _trace_loops(comp: np.ndarray) -> list[list[tuple[float, float]]]:
    """Closed boundary loops of a pixel region, walked along cell edges.

    Directed edges keep the region on a consistent side; at pinch corners
    (two diagonal cells meeting at a lattice point) the walk stays with the
    cell that generated the incoming edge, and the corner is chamfered by a
    quarter cell so each loop remains strictly simple.
    """
    edges: dict[tuple[int, int], list[tuple[tuple[int, int], tuple[int, int]]]] = {}

    def add(start, end, cell):
        edges.setdefault(start, []).append((end, cell))

    rs, cs = np.nonzero(comp)
    occupied = set(zip(rs.tolist(), cs.tolist()))
    for r, c in occupied:
        if (r, c - 1) not in occupied:
            add((r, c), (r + 1, c), (r, c))
        if (r + 1, c) not in occupied:
            add((r + 1, c), (r + 1, c + 1), (r, c))
        if (r, c + 1) not in occupied:
            add((r + 1, c + 1), (r, c + 1), (r, c))
        if (r - 1, c) not in occupied:
            add((r, c + 1), (r, c), (r, c))

    loops = []
    while edges:
        start = min(edges)
        end, cell = edges[start].pop()
        if not edges[start]:
            del edges[start]
        loop = [start]
        pinched = set()
        while end != start:
            loop.append(end)
            candidates = edges[end]
            if len(candidates) > 1:
                pinched.add(end)
                pick = next((i for i, (_, cl) in enumerate(candidates) if cl == cell), 0)
            else:
                pick = 0
            nxt, cell = candidates.pop(pick)
            if not candidates:
                del edges[end]
            end = nxt
        # chamfer lattice points the loop visits more than once
        seen = {p for p in loop if loop.count(p) > 1} | pinched
        if seen:
            out: list[tuple[float, float]] = []
            n = len(loop)
            for i, p in enumerate(loop):
                if p in seen:
                    prv, nxt = loop[i - 1], loop[(i + 1) % n]
                    din = (p[0] - prv[0], p[1] - prv[1])
                    dout = (nxt[0] - p[0], nxt[1] - p[1])
                    ls = math.hypot(*din), math.hypot(*dout)
                    out.append((p[0] - 0.25 * din[0] / ls[0], p[1] - 0.25 * din[1] / ls[0]))
                    out.append((p[0] + 0.25 * dout[0] / ls[1], p[1] + 0.25 * dout[1] / ls[1]))
                else:
                    out.append((float(p[0]), float(p[1])))
            loops.append(out)
        else:
            loops.append([(float(r), float(c)) for r, c in loop])
    return loops


def extract_contours(mask: np.ndarray, plane_index: int) -> list[Contour]:
    """Outer contours of each 4-connected region of the mask (holes ignored)."""
    mask = np.asarray(mask, dtype=bool)
    out = []
    for comp in connected_components(mask):
        for loop in _trace_loops(comp):
            pts = _simplify_collinear(loop)
            if len(pts) < 3:
                continue
            arr = np.asarray(pts, dtype=np.float64)
            area = _polygon_area(arr)
            if area <= 0:
                continue  # holes keep their negative orientation; ignore them
            out.append(
                Contour(
                    points=arr,
                    plane_index=plane_index,
                    centroid=_polygon_centroid(arr),
                    area=area,
                )
            )
    return out


# ---------------------------------------------------------------------------
# correspondence


def match_cost(a: Contour, b: Contour, diag: float) -> float:
    """Distance between contours used for matching: centroid offset plus a
    size mismatch term weighted by a quarter of the slice diagonal."""
    d = math.hypot(a.centroid[0] - b.centroid[0], a.centroid[1] - b.centroid[1])
    size = abs(a.area - b.area) / max(a.area, b.area)
    return d + 0.25 * diag * size


def correspond(
    a: list[Contour], b: list[Contour], diag: float, cutoff_scale: float = 0.5
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Greedy min-cost matching between two contour sets.

    Returns (matched index pairs, unmatched indices of a, unmatched of b).
    Pairs costing more than ``cutoff_scale * diag`` stay unmatched.
    """
    cutoff = cutoff_scale * diag
    costs = sorted(
        ((match_cost(ca, cb, diag), i, j) for i, ca in enumerate(a) for j, cb in enumerate(b)),
        key=lambda t: (t[0], t[1], t[2]),
    )
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for cost, i, j in costs:
        if cost > cutoff:
            break
        if i in used_a or j in used_b:
            continue
        pairs.append((i, j))
        used_a.add(i)
        used_b.add(j)
    return (
        pairs,
        [i for i in range(len(a)) if i not in used_a],
        [j for j in range(len(b)) if j not in used_b],
    )


# ---------------------------------------------------------------------------
# rings, lofts and caps


def _arc_positions(pts: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalized arc-length position of each vertex and the perimeter."""
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    total = float(seg.sum())
    if total <= 0:
        raise ValueError("degenerate contour with zero perimeter")
    return np.concatenate([[0.0], np.cumsum(seg[:-1])]) / total, total


def _resample_at(pts: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Points of the closed polygon at the given perimeter fractions."""
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = fractions * cum[-1]
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    frac = (targets - cum[idx]) / np.where(seg[idx] > 0, seg[idx], 1.0)
    return closed[idx] + frac[:, None] * (closed[idx + 1] - closed[idx])


def merge_positions(position_sets: list[np.ndarray], tol: float = 1e-9) -> np.ndarray:
    """Sorted union of normalized arc positions, deduplicated within tol.

    Rings resampled at the merged positions keep every original vertex of
    every contour in the set, so lofted chains lose no geometry.
    """
    allpos = np.sort(np.concatenate(position_sets))
    keep = [0.0]
    for p in allpos:
        if p - keep[-1] > tol:
            keep.append(float(p))
    if keep[-1] > 1.0 - tol:
        keep.pop()
    while len(keep) < 3:
        keep = sorted(set(keep) | {(keep[-1] + 1.0) / 2.0})
    return np.asarray(keep)


def resample_ring(pts: np.ndarray, n: int) -> np.ndarray:
    """Arc-length uniform resampling of a closed polygon to n vertices,
    starting at the polygon's first vertex."""
    if n < 3:
        raise ValueError("ring needs at least 3 vertices")
    return _resample_at(pts, np.arange(n) / n)


def best_ring_offset(a: np.ndarray, b: np.ndarray) -> int:
    """Cyclic shift of ring b minimizing total vertex distance to ring a."""
    n = len(a)
    best, best_off = None, 0
    for off in range(n):
        d = float(np.linalg.norm(a - np.roll(b, -off, axis=0), axis=1).sum())
        if best is None or d < best - 1e-12:
            best, best_off = d, off
    return best_off


def _strip_triangles(ids_a: np.ndarray, ids_b: np.ndarray, offset: int) -> list[tuple[int, int, int]]:
    n = len(ids_a)
    tris = []
    for i in range(n):
        j = (i + 1) % n
        bi = ids_b[(i + offset) % n]
        bj = ids_b[(j + offset) % n]
        tris.append((ids_a[i], ids_a[j], bj))
        tris.append((ids_a[i], bj, bi))
    return tris


def _point_in_triangle(p, a, b, c, eps=1e-12) -> bool:
    d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    d2 = (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])
    d3 = (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])
    return d1 >= -eps and d2 >= -eps and d3 >= -eps


def _on_segment(p, a, b, eps=1e-9) -> bool:
    cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    if abs(cross) > eps:
        return False
    dot = (p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])
    return -eps <= dot <= (b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2 + eps

def triangulate_polygon(pts: np.ndarray) -> list[tuple[int, int, int]]:
    """Ear-clipping triangulation of a simple CCW polygon.

    Ears must have strictly positive area, contain no other remaining vertex,
    and no remaining vertex may lie on the new diagonal (which would create a
    T-junction).  Returns index triples into ``pts``.
    """
    n = len(pts)
    if n < 3:
        raise ValueError("polygon needs at least 3 vertices")
    remaining = list(range(n))
    tris: list[tuple[int, int, int]] = []
    guard = 0
    while len(remaining) > 3:
        guard += 1
        if guard > 4 * n * n:
            raise MeshError("ear clipping failed to converge; polygon may self-intersect")
        clipped = False
        m = len(remaining)
        # prefer the largest valid ear for robustness
        best = None
        for k in range(m):
            i0, i1, i2 = remaining[k - 1], remaining[k], remaining[(k + 1) % m]
            a, b, c = pts[i0], pts[i1], pts[i2]
            area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if area2 <= 1e-12:
                continue
            ok = True
            for j in remaining:
                if j in (i0, i1, i2):
                    continue
                p = pts[j]
                if _point_in_triangle(p, a, b, c) or _on_segment(p, a, c):
                    ok = False
                    break
            if ok and (best is None or area2 > best[0]):
                best = (area2, k, (i0, i1, i2))
        if best is not None:
            _, k, tri = best
            tris.append(tri)
            remaining.pop(k)
            clipped = True
        if not clipped:
            raise MeshError("no valid ear found; polygon may self-intersect")
    a, b, c = remaining
    pa, pb, pc = pts[a], pts[b], pts[c]
    area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
    if area2 > 1e-12:
        tris.append((a, b, c))
    elif area2 < -1e-12:
        raise MeshError("polygon orientation flipped during triangulation")
    return tris


def loft(pair: tuple[Contour, Contour], z_a: float, z_b: float) -> TriMesh:
    """Open triangle strip connecting two contours at different heights.

    Both contours are resampled to one shared vertex count, at the union of
    their normalized arc positions so that no original vertex is lost; the
    start correspondence is the cyclic shift with minimal total vertex
    distance.  The strip lives in lattice coordinates with the plane
    coordinate last.
    """
    if z_a == z_b:
        raise ValueError("loft requires two distinct heights")
    ca, cb = pair
    if z_a > z_b:
        ca, cb, z_a, z_b = cb, ca, z_b, z_a
    positions = merge_positions([_arc_positions(ca.points)[0], _arc_positions(cb.points)[0]])
    n = len(positions)
    ra = _resample_at(ca.points, positions)
    rb = _resample_at(cb.points, positions)
    off = best_ring_offset(ra, rb)
    verts = np.vstack(
        [
            np.column_stack([ra, np.full(n, z_a)]),
            np.column_stack([rb, np.full(n, z_b)]),
        ]
    )
    tris = _strip_triangles(np.arange(n), np.arange(n, 2 * n), off)
    return TriMesh(verts, tris, closed=False)


def cap(contour: Contour, z: float) -> TriMesh:
    """Planar triangulation of a contour at the given height (upward-facing)."""
    if len(contour) < 3:
        raise ValueError("cannot cap a contour with fewer than 3 points")
    tris = triangulate_polygon(contour.points)
    verts = np.column_stack([contour.points, np.full(len(contour), z)])
    return TriMesh(verts, tris, closed=False)


# ---------------------------------------------------------------------------
# part assembly


def _to_world(uvw: np.ndarray, axis: Axis, voxel_size: float, origin) -> np.ndarray:
    """Map (u, v, plane) lattice coords to world xyz for the given slice axis."""
    u, v, w = uvw[:, 0], uvw[:, 1], uvw[:, 2]
    if axis == Axis.Z:
        xyz = np.column_stack([u, v, w])
    elif axis == Axis.Y:
        xyz = np.column_stack([u, w, v])
    else:
        xyz = np.column_stack([w, u, v])
    return xyz * voxel_size + np.asarray(origin, dtype=np.float64)


class _MeshBuilder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.tris: list[tuple[int, int, int]] = []

    def add_ring(self, ring2d: np.ndarray, z: float) -> np.ndarray:
        base = len(self.verts)
        self.verts.extend(np.column_stack([ring2d, np.full(len(ring2d), z)]))
        return np.arange(base, base + len(ring2d))

    def add_strip(self, ids_a, ids_b, offset: int):
        self.tris.extend(_strip_triangles(ids_a, ids_b, offset))

    def add_cap(self, ring2d: np.ndarray, ids: np.ndarray, upward: bool):
        for i0, i1, i2 in triangulate_polygon(ring2d):
            if upward:
                self.tris.append((ids[i0], ids[i1], ids[i2]))
            else:
                self.tris.append((ids[i0], ids[i2], ids[i1]))


def reconstruct_part(slices: PartSlices) -> TriMesh:
    """Closed mesh of one part: lofts between matched contours of consecutive
    planes, slab-face extrusions and caps at every unmatched end.

    An empty plane list or all-empty planes yield the empty (closed) mesh.
    """
    planes = [(k, list(cs)) for k, cs in slices.planes]
    if not any(cs for _, cs in planes):
        return TriMesh.empty(closed=True)

    diag = slices.diag if slices.diag is not None else _mean_diag(planes)
    matches: list[list[tuple[int, int]]] = []
    for (ka, ca), (kb, cb) in zip(planes, planes[1:]):
        pairs, _, _ = correspond(ca, cb, diag)
        matches.append(pairs)

    # chains of matched contours share one ring vertex count
    parent: dict[tuple[int, int], tuple[int, int]] = {}

    def find(x):
        while parent.get(x, x) != x:
            parent[x] = parent.get(parent[x], parent[x])
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[rx] = ry

    for j, pairs in enumerate(matches):
        for ia, ib in pairs:
            union((j, ia), (j + 1, ib))
    chain_pos: dict[tuple[int, int], list[np.ndarray]] = {}
    for j, (_, cs) in enumerate(planes):
        for i, contour in enumerate(cs):
            chain_pos.setdefault(find((j, i)), []).append(_arc_positions(contour.points)[0])
    chain_t = {root: merge_positions(sets) for root, sets in chain_pos.items()}

    builder = _MeshBuilder()
    rings: dict[tuple[int, int], np.ndarray] = {}
    ids: dict[tuple[int, int], np.ndarray] = {}
    for j, (k, cs) in enumerate(planes):
        for i, contour in enumerate(cs):
            ring = _resample_at(contour.points, chain_t[find((j, i))])
            rings[(j, i)] = ring
            ids[(j, i)] = builder.add_ring(ring, k + 0.5)

    matched_above: set[tuple[int, int]] = set()
    matched_below: set[tuple[int, int]] = set()
    for j, pairs in enumerate(matches):
        for ia, ib in pairs:
            a, b = (j, ia), (j + 1, ib)
            off = best_ring_offset(rings[a], rings[b])
            builder.add_strip(ids[a], ids[b], off)
            matched_above.add(a)
            matched_below.add(b)

    # Contours at the first/last listed plane reach the part's axis bounds
    # (the part was cut there); interior ends extrude by half the local slice
    # gap, the unbiased guess for where material stopped between slices.
    # With every layer sliced the gap rule is a one-cell slab.
    layers = [k for k, _ in planes]
    gaps = [b - a for a, b in zip(layers, layers[1:])] or [1]
    lo_bound, hi_bound = slices.axis_bounds
    for j, (k, cs) in enumerate(planes):
        gap_below = gaps[j - 1] if j > 0 else gaps[0]
        gap_above = gaps[j] if j < len(gaps) else gaps[-1]
        for i in range(len(cs)):
            key = (j, i)
            if key not in matched_below:
                z = lo_bound if j == 0 else max(k + 0.5 - gap_below / 2.0, lo_bound)
                bot = builder.add_ring(rings[key], z)
                builder.add_strip(bot, ids[key], 0)
                builder.add_cap(rings[key], bot, upward=False)
            if key not in matched_above:
                z = hi_bound if j == len(planes) - 1 else min(k + 0.5 + gap_above / 2.0, hi_bound)
                top = builder.add_ring(rings[key], z)
                builder.add_strip(ids[key], top, 0)
                builder.add_cap(rings[key], top, upward=True)

    verts = _to_world(np.asarray(builder.verts), slices.axis, slices.voxel_size, slices.origin)
    tris = np.asarray(builder.tris, dtype=np.int64)
    if slices.axis == Axis.Y:  # odd axis permutation flips orientation
        tris = tris[:, [0, 2, 1]]
    return TriMesh(verts, tris, closed=True)


def _mean_diag(planes) -> float:
    # slice mask extents are not carried by contours; use the contour spread
    pts = [c.points for _, cs in planes for c in cs]
    if not pts:
        return 1.0
    allp = np.vstack(pts)
    span = allp.max(axis=0) - allp.min(axis=0)
    return max(float(np.hypot(span[0], span[1])), 1.0)


def part_slices(
    grid: VoxelGrid, box: Cuboid, axis: Axis, layers: list[int]
) -> PartSlices:
    """Contours of ``grid`` restricted to ``box`` at the given slice layers."""
    lo, hi = box.min_corner[axis], box.max_corner[axis]
    cross_axes = [a for a in (0, 1, 2) if a != axis]
    planes = []
    for k in layers:
        if not lo <= k <= hi:
            continue
        mask = np.take(grid.occupancy, k, axis=int(axis))
        window = np.zeros_like(mask)
        r0, r1 = box.min_corner[cross_axes[0]], box.max_corner[cross_axes[0]]
        c0, c1 = box.min_corner[cross_axes[1]], box.max_corner[cross_axes[1]]
        window[r0 : r1 + 1, c0 : c1 + 1] = True
        mask = mask & window
        planes.append((k, tuple(extract_contours(mask, k))))
    return PartSlices(
        axis=axis,
        planes=tuple(planes),
        voxel_size=grid.voxel_size,
        origin=grid.origin,
        axis_bounds=(float(lo), float(hi + 1)),
        diag=float(np.hypot(grid.dims[cross_axes[0]], grid.dims[cross_axes[1]])),
    )
