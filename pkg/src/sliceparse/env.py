"""Sequential-cut episode over a voxel shape.

Each step maps a continuous five-tuple action to a cut: the two points are
snapped to detected corners in the chosen silhouette, the segment is
axis-aligned by its dominant direction, and the plane through that line
splits the remaining region's bounding box in two.  The smaller side becomes
the step's part, is surfaced from the slices clipped to its box, scored, and
removed from the remaining region.

One environment instance is stateful and single-threaded; independent
instances share nothing and may run in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .corners import CornerSet, HarrisParams, detect_corners, nearest_corner
from .geom import Axis, Cuboid, ProjectionImage, TriMesh, View, VoxelGrid
from .surfacer import part_slices, reconstruct_part


@dataclass(frozen=True)
class EnvConfig:
    max_steps: int = 10
    lam: float = 1.0                 # weight of the reconstruction term
    coverage_stop: float = 0.98      # fraction of cells removed that ends the episode
    slice_axis: Axis = Axis.Z
    slice_count: int = 12
    harris: HarrisParams = field(default_factory=HarrisParams)
    empty_cut_penalty: float = -0.1
    snap_to_corners: bool = True     # the no-silhouette baseline cuts at raw points

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.coverage_stop <= 1:
            raise ValueError("coverage_stop must be in (0, 1]")
        if self.slice_count < 1:
            raise ValueError("slice_count must be >= 1")


@dataclass(frozen=True, eq=False)
class ParseState:
    """Observation: silhouettes of the remaining region, the step index, and
    per-view corner lists.

    ``corner_lists`` are fixed-length (max_corners, 2) arrays of (row, col)
    normalized to [0, 1], padded with the (-1, -1) sentinel.  ``corner_sets``
    carry the raw detections behind those lists (None for states restored
    from disk).  States compare by identity so encoders can cache on them.
    """

    projections: tuple[ProjectionImage, ProjectionImage, ProjectionImage]
    step_index: int
    corner_lists: tuple[np.ndarray, np.ndarray, np.ndarray]
    corner_sets: tuple[CornerSet, CornerSet, CornerSet] | None = None


@dataclass(frozen=True)
class CutAction:
    """Normalized cut request: two image points (x = col, y = row fractions)
    and the view selector c, mapped to a view by floor(3c)."""

    x1: float
    y1: float
    x2: float
    y2: float
    c: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2", "c"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, min(1.0, max(0.0, v)))

    def view(self) -> View:
        return View(min(2, int(self.c * 3)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2, self.c], dtype=np.float32)

    @classmethod
    def from_array(cls, a) -> "CutAction":
        a = np.asarray(a, dtype=float).reshape(5)
        return cls(*[float(v) for v in a])


@dataclass(frozen=True)
class StepResult:
    reward: float
    next_state: ParseState
    done: bool
    part: Cuboid | None
    part_mesh: TriMesh


@dataclass
class StepTrace:
    step: int
    action: CutAction
    snapped: tuple[tuple[int, int], tuple[int, int]]
    cut_axis: Axis
    cut_coord: int
    reward: float
    remaining_cells: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "action": list(map(float, self.action.as_array())),
                "snapped_points": [list(self.snapped[0]), list(self.snapped[1])],
                "cut_axis": int(self.cut_axis),
                "cut_coord": self.cut_coord,
                "reward": self.reward,
                "remaining_cells": self.remaining_cells,
            }
        )


def _point_to_pixels(x: float, y: float, shape: tuple[int, int]) -> tuple[float, float]:
    h, w = shape
    return (x * max(w - 1, 1), y * max(h - 1, 1))


class CutEnv:
    """Stateful episode runner; create one per concurrent rollout."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self._shape: VoxelGrid | None = None
        self._remaining: np.ndarray | None = None
        self.slice_layers: list[int] = []
        self.state: ParseState | None = None
        self.done = True
        self._last_part_grid: VoxelGrid | None = None

    # -- observation assembly ------------------------------------------------

    def _observe(self, step_index: int) -> ParseState:
        projections = []
        corner_sets = []
        corner_lists = []
        mc = self.config.harris.max_corners
        for view in (View.FRONT, View.TOP, View.END):
            img = ProjectionImage(view=view, pixels=geom.project_mask(self._remaining, view))
            cs = detect_corners(img, self.config.harris)
            projections.append(img)
            corner_sets.append(cs)
            corner_lists.append(cs.normalized(img.pixels.shape, mc))
        return ParseState(
            projections=tuple(projections),
            step_index=step_index,
            corner_lists=tuple(corner_lists),
            corner_sets=tuple(corner_sets),
        )

    # -- episode control -----------------------------------------------------

    def reset(self, shape: VoxelGrid) -> ParseState:
        if shape.is_empty():
            raise ValueError("cannot start an episode on an empty shape")
        self._shape = shape
        self._remaining = shape.occupancy.copy()
        self._total_cells = shape.count()
        n = shape.dims[self.config.slice_axis]
        self.slice_layers = geom.slice_layers(n, min(self.config.slice_count, n))
        self.done = False
        self.state = self._observe(0)
        return self.state

    @property
    def remaining_grid(self) -> VoxelGrid:
        return self._shape.with_occupancy(self._remaining.copy())

    def coverage(self) -> float:
        return 1.0 - self._remaining.sum() / self._total_cells

    def _snap(self, action: CutAction) -> tuple[tuple[int, int], tuple[int, int], View]:
        view = action.view()
        shape = self.state.projections[view].pixels.shape
        pts = []
        for x, y in ((action.x1, action.y1), (action.x2, action.y2)):
            px = _point_to_pixels(x, y, shape)
            corners = self.state.corner_sets[view]
            if self.config.snap_to_corners and len(corners):
                pts.append(nearest_corner(px, corners))
            else:
                r = min(shape[0] - 1, max(0, round(px[1])))
                c = min(shape[1] - 1, max(0, round(px[0])))
                pts.append((int(r), int(c)))
        return pts[0], pts[1], view

    @staticmethod
    def _align(p1: tuple[int, int], p2: tuple[int, int], view: View) -> tuple[Axis, int]:
        """Reduce the snapped segment to an axis-aligned cut plane.

        A mostly-horizontal segment becomes the row through the mean row (a
        plane across the view's row axis); otherwise the column wins.
        """
        drow = abs(p2[0] - p1[0])
        dcol = abs(p2[1] - p1[1])
        row_axis, col_axis = geom.VIEW_IMAGE_AXES[view]
        if dcol >= drow:
            return row_axis, round((p1[0] + p2[0]) / 2.0)
        return col_axis, round((p1[1] + p2[1]) / 2.0)

    def step(self, action: CutAction) -> StepResult:
        if self.done:
            raise RuntimeError("episode finished")
        action = CutAction.from_array(action.as_array()) if not isinstance(action, CutAction) else action
        p1, p2, view = self._snap(action)
        cut_axis, cut_coord = self._align(p1, p2, view)

        bbox = geom.bounding_cuboid(self._remaining)
        lo, hi = bbox.min_corner[cut_axis], bbox.max_corner[cut_axis]

        def make_side(a: int, b: int) -> Cuboid | None:
            if a > b:
                return None
            mn, mx = list(bbox.min_corner), list(bbox.max_corner)
            mn[cut_axis], mx[cut_axis] = a, b
            return Cuboid(tuple(mn), tuple(mx))

        def occupied(cub: Cuboid | None) -> int:
            if cub is None:
                return 0
            return int(self._remaining[cub.slices()].sum())

        def pick(split_at: int):
            sides = [make_side(lo, split_at), make_side(split_at + 1, hi)]
            counts = [occupied(s) for s in sides]
            # fewer remaining cells wins; ties take the lower (smaller corner) side
            w = 0 if counts[0] <= counts[1] else 1
            return sides[w], counts[w]

        # The cut line runs through cell layer t, so the plane may sit on
        # either face of that layer.  Give the layer to the side it resembles
        # (smaller mask difference with its neighbor), so cuts at a material
        # boundary never drag one foreign layer along.
        def layer(t: int) -> np.ndarray:
            if t < 0 or t >= self._remaining.shape[cut_axis]:
                return np.zeros_like(np.take(self._remaining, 0, axis=int(cut_axis)))
            return np.take(self._remaining, t, axis=int(cut_axis))

        cur = layer(cut_coord)
        diff_low = int(np.logical_xor(cur, layer(cut_coord - 1)).sum())
        diff_high = int(np.logical_xor(cur, layer(cut_coord + 1)).sum())
        splits = [cut_coord, cut_coord - 1] if diff_low <= diff_high else [cut_coord - 1, cut_coord]
        part_box, part_cells = pick(splits[0])
        if part_cells == 0:
            part_box, part_cells = pick(splits[1])

        if part_box is None or part_cells == 0:
            reward = self.config.empty_cut_penalty
            part_box = None
            part_mesh = TriMesh.empty(closed=True)
            self._last_part_grid = None
        else:
            part_occ = np.zeros_like(self._remaining)
            sl = part_box.slices()
            part_occ[sl] = self._remaining[sl]
            part_box = geom.bounding_cuboid(part_occ)  # tight bounds of the part's cells
            part_grid = self._shape.with_occupancy(part_occ)
            remaining_grid = self._shape.with_occupancy(self._remaining)
            slices = part_slices(remaining_grid, part_box, self.config.slice_axis, self.slice_layers)
            part_mesh = reconstruct_part(slices)
            coverage_term = geom.volume_iou(part_grid, self._shape)
            if part_mesh.is_empty():
                fidelity_term = 0.0
                self._last_part_grid = None
            else:
                mesh_grid = geom.voxelize_like(part_mesh, self._shape)
                fidelity_term = geom.surface_iou(mesh_grid, part_grid)
                self._last_part_grid = mesh_grid
            reward = coverage_term + self.config.lam * fidelity_term
            self._remaining = self._remaining & ~part_occ

        step_index = self.state.step_index + 1
        self.done = self.coverage() >= self.config.coverage_stop or step_index >= self.config.max_steps
        self.state = self._observe(step_index)
        self._last_trace = StepTrace(
            step=step_index - 1,
            action=action,
            snapped=(p1, p2),
            cut_axis=cut_axis,
            cut_coord=int(cut_coord),
            reward=float(reward),
            remaining_cells=int(self._remaining.sum()),
        )
        return StepResult(
            reward=float(reward),
            next_state=self.state,
            done=self.done,
            part=part_box,
            part_mesh=part_mesh,
        )

    def remainder_part(self) -> tuple[Cuboid, TriMesh, VoxelGrid] | None:
        """Surface whatever the episode left uncovered as one final part."""
        if not self._remaining.any():
            return None
        box = geom.bounding_cuboid(self._remaining)
        grid = self._shape.with_occupancy(self._remaining.copy())
        mesh = reconstruct_part(part_slices(grid, box, self.config.slice_axis, self.slice_layers))
        return box, mesh, grid


@dataclass
class EpisodeResult:
    parts: list[Cuboid]
    part_meshes: list[TriMesh]
    total_reward: float
    steps: int
    final_mesh: TriMesh
    metrics: dict[str, float]


def run_episode(
    shape: VoxelGrid,
    config: EnvConfig,
    policy,
    trace_file=None,
    chamfer_samples: int = 2048,
) -> EpisodeResult:
    """Roll one episode with ``policy(state) -> CutAction``; any remainder is
    surfaced as one final implicit part so the result always covers the shape.

    Metrics compare the union of the parts against the input: surface overlap
    of the voxelized reconstruction and the symmetric L1 surface distance.
    """
    env = CutEnv(config)
    state = env.reset(shape)
    parts: list[Cuboid] = []
    meshes: list[TriMesh] = []
    grids: list[VoxelGrid] = []
    total = 0.0
    steps = 0
    traces = []
    while not env.done:
        action = policy(state)
        result = env.step(action)
        total += result.reward
        steps += 1
        traces.append(env._last_trace)
        if result.part is not None:
            parts.append(result.part)
            meshes.append(result.part_mesh)
            if not result.part_mesh.is_empty():
                grids.append(geom.voxelize_like(result.part_mesh, shape))
        state = result.next_state
    tail = env.remainder_part()
    if tail is not None:
        box, mesh, _grid = tail
        parts.append(box)
        meshes.append(mesh)
        if not mesh.is_empty():
            grids.append(geom.voxelize_like(mesh, shape))
    if trace_file is not None:
        with open(trace_file, "w") as fh:
            for t in traces:
                fh.write(t.to_json() + "\n")

    final_mesh = TriMesh.concatenate(meshes, closed=True)
    union = np.zeros(shape.dims, dtype=bool)
    for g in grids:
        union |= g.occupancy
    recon = shape.with_occupancy(union)
    metrics = {
        "surface_iou": geom.surface_iou(recon, shape),
        "volume_iou": geom.volume_iou(recon, shape),
        "chamfer_l1": (
            geom.chamfer_l1(final_mesh, geom.grid_to_mesh(shape), chamfer_samples)
            if not final_mesh.is_empty()
            else float("inf")
        ),
        "parts": float(len(parts)),
        "steps": float(steps),
    }
    return EpisodeResult(
        parts=parts,
        part_meshes=meshes,
        total_reward=total,
        steps=steps,
        final_mesh=final_mesh,
        metrics=metrics,
    )
