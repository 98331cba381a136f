"""Heuristic cut policy used to bootstrap training.

In each silhouette, corners are paired with their nearest neighbor to form
candidate segments.  A segment is worth cutting along when erasing its
rasterized line splits the silhouette into more pieces; surviving segments
are ranked by how cleanly a box fits the smaller piece they split off
(fewer foreign pixels in the box is better).  The best segment's endpoints
become the action; with no separating segment the fallback is a centered cut
on the axis that best balances the silhouette.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .env import CutAction, CutEnv, EnvConfig, ParseState
from .geom import Axis, VIEW_IMAGE_AXES, View, VoxelGrid, connected_components
from .replay import Transition


@dataclass(frozen=True)
class CandidateSegment:
    view: View
    p1: tuple[int, int]
    p2: tuple[int, int]
    component_count_delta: int = 0
    leak_area: float = 0.0
    box_slack: float = 0.0  # empty box area around the split-off piece

    def length(self) -> float:
        return float(np.hypot(self.p1[0] - self.p2[0], self.p1[1] - self.p2[1]))


@dataclass
class Demonstration:
    shape_key: str
    transitions: list[Transition]

    @property
    def episode_return(self) -> float:
        return float(sum(t.reward for t in self.transitions))


def bresenham(p1: tuple[int, int], p2: tuple[int, int]) -> list[tuple[int, int]]:
    """Integer line raster between two pixels, inclusive, thickness one."""
    r0, c0 = p1
    r1, c1 = p2
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    out = []
    r, c = r0, c0
    while True:
        out.append((r, c))
        if (r, c) == (r1, c1):
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
    return out


def candidate_segments(state: ParseState) -> list[CandidateSegment]:
    """Each corner paired with its nearest distinct corner, per view, with
    duplicate unordered pairs removed."""
    if state.corner_sets is None:
        raise ValueError("state carries no corner detections")
    segments = []
    for view in (View.FRONT, View.TOP, View.END):
        cs = state.corner_sets[view]
        n = len(cs)
        if n < 2:
            continue
        seen = set()
        for i in range(n):
            d2 = ((cs.coords - cs.coords[i]) ** 2).sum(axis=1)
            best = None
            for j in range(n):
                if j == i:
                    continue
                key = (d2[j], -cs.responses[j], cs.coords[j, 0], cs.coords[j, 1])
                if best is None or key < best[0]:
                    best = (key, j)
            j = best[1]
            pair = (min(i, j), max(i, j))
            if pair in seen:
                continue
            seen.add(pair)
            segments.append(
                CandidateSegment(
                    view=view,
                    p1=(int(cs.coords[pair[0], 0]), int(cs.coords[pair[0], 1])),
                    p2=(int(cs.coords[pair[1], 0]), int(cs.coords[pair[1], 1])),
                )
            )
    return segments


def filter_separating(segments: list[CandidateSegment], state: ParseState) -> list[CandidateSegment]:
    """Keep segments whose erased raster line strictly increases the view's
    4-connected component count."""
    kept = []
    for seg in segments:
        mask = state.projections[seg.view].pixels
        before = len(connected_components(mask))
        erased = mask.copy()
        for r, c in bresenham(seg.p1, seg.p2):
            if 0 <= r < erased.shape[0] and 0 <= c < erased.shape[1]:
                erased[r, c] = False
        after = len(connected_components(erased))
        if after > before:
            kept.append(replace(seg, component_count_delta=after - before))
    return kept


def _leak_area(seg: CandidateSegment, state: ParseState) -> tuple[float, float]:
    """How cleanly a box fits the smaller split-off piece.

    Returns (foreign true pixels inside the piece's bounding box, empty area
    inside that box); both are zero for a perfectly rectangular piece."""
    mask = state.projections[seg.view].pixels
    erased = mask.copy()
    for r, c in bresenham(seg.p1, seg.p2):
        if 0 <= r < erased.shape[0] and 0 <= c < erased.shape[1]:
            erased[r, c] = False
    comps = connected_components(erased)
    if not comps:
        return 0.0, 0.0
    smallest = comps[-1]  # components are sorted by size descending
    rs, cs = np.nonzero(smallest)
    box = erased[rs.min() : rs.max() + 1, cs.min() : cs.max() + 1]
    comp_box = smallest[rs.min() : rs.max() + 1, cs.min() : cs.max() + 1]
    leak = float(np.logical_and(box, ~comp_box).sum())
    slack = float(comp_box.size - comp_box.sum())
    return leak, slack


def score_segments(segments: list[CandidateSegment], state: ParseState) -> list[CandidateSegment]:
    """Ascending by leak area, box slack, then segment length, view, and
    endpoints (a total, deterministic order)."""
    scored = []
    for seg in segments:
        leak, slack = _leak_area(seg, state)
        scored.append(replace(seg, leak_area=leak, box_slack=slack))
    return sorted(scored, key=lambda s: (s.leak_area, s.box_slack, s.length(), int(s.view), s.p1, s.p2))


def _segment_action(seg: CandidateSegment, state: ParseState) -> CutAction:
    h, w = state.projections[seg.view].pixels.shape
    dh, dw = max(h - 1, 1), max(w - 1, 1)
    return CutAction(
        x1=seg.p1[1] / dw,
        y1=seg.p1[0] / dh,
        x2=seg.p2[1] / dw,
        y2=seg.p2[0] / dh,
        c=(int(seg.view) + 0.5) / 3.0,
    )


def _fallback_action(state: ParseState, slice_axis: Axis | None) -> CutAction:
    """Most balanced corner-pair cut when no segment separates anything.

    Corner pairs survive snapping unchanged, so the emitted line is the line
    actually cut.  Cuts across the slice axis are deprioritized: a part that
    contains no slice plane cannot be surfaced at all.
    """
    best = None
    for view in (View.FRONT, View.TOP, View.END):
        cs = state.corner_sets[view] if state.corner_sets else None
        if cs is None or len(cs) < 2:
            continue
        mask = state.projections[view].pixels
        row_axis, col_axis = VIEW_IMAGE_AXES[view]
        rows_sum = mask.sum(axis=1).cumsum()
        cols_sum = mask.sum(axis=0).cumsum()
        total = int(mask.sum())
        for i in range(len(cs)):
            for j in range(i + 1, len(cs)):
                p1 = (int(cs.coords[i, 0]), int(cs.coords[i, 1]))
                p2 = (int(cs.coords[j, 0]), int(cs.coords[j, 1]))
                if abs(p2[1] - p1[1]) >= abs(p2[0] - p1[0]):
                    axis, coord = row_axis, round((p1[0] + p2[0]) / 2)
                    low = int(rows_sum[coord])
                else:
                    axis, coord = col_axis, round((p1[1] + p2[1]) / 2)
                    low = int(cols_sum[coord])
                balance = abs(2 * low - total)
                key = (axis == slice_axis, balance, int(view), p1, p2)
                if best is None or key < best[0]:
                    best = (key, view, p1, p2)
    if best is None:
        return CutAction(0.25, 0.5, 0.75, 0.5, 0.5)
    _, view, p1, p2 = best
    return _segment_action(CandidateSegment(view=view, p1=p1, p2=p2), state)


def expert_action(state: ParseState, slice_axis: Axis | None = Axis.Z) -> CutAction:
    """Best-ranked separating segment as an action, or the balanced fallback."""
    segs = score_segments(filter_separating(candidate_segments(state), state), state)
    if segs:
        return _segment_action(segs[0], state)
    return _fallback_action(state, slice_axis)


def shape_fingerprint(state: ParseState) -> str:
    """Stable identity of the episode's shape from its first observation."""
    import hashlib

    h = hashlib.sha1()
    for img in state.projections:
        h.update(np.ascontiguousarray(img.pixels).tobytes())
        h.update(b"|")
    return h.hexdigest()


def run_expert_episode(shape: VoxelGrid, config: EnvConfig) -> Demonstration:
    """One deterministic expert episode recorded as replayable transitions."""
    env = CutEnv(config)
    state = env.reset(shape)
    key = shape_fingerprint(state)
    transitions = []
    while not env.done:
        action = expert_action(state, config.slice_axis)
        result = env.step(action)
        transitions.append(
            Transition(
                state=state,
                action=action,
                reward=result.reward,
                next_state=result.next_state,
                done=result.done,
                expert_action=action,
            )
        )
        state = result.next_state
    return Demonstration(shape_key=key, transitions=transitions)


def generate_demonstrations(
    shapes: list[VoxelGrid], config: EnvConfig, n_episodes: int
) -> list[Demonstration]:
    """Expert episodes cycling through the shapes round-robin."""
    if not shapes:
        raise ValueError("no shapes to demonstrate on")
    return [run_expert_episode(shapes[i % len(shapes)], config) for i in range(n_episodes)]
