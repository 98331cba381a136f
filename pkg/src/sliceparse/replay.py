"""Experience records, ring buffers, and their binary wire format.

Transitions are stored in two pools: demonstration data and the agent's own
rollouts.  Demonstration entries are grouped per episode so a better agent
episode on the same shape can later replace a weaker demonstration.  The file
format is a versioned header followed by flat transition records; the same
record codec backs both the demonstration store and buffer snapshots.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .env import CutAction, ParseState
from .geom import ProjectionImage, View

FORMAT_VERSION = 1
DEMO_MAGIC = b"SPDM"
REPLAY_MAGIC = b"SPRB"


class BufferKind(IntEnum):
    DEMO = 0
    AGENT = 1


@dataclass(frozen=True)
class Transition:
    state: ParseState
    action: CutAction
    reward: float
    next_state: ParseState
    done: bool
    expert_action: CutAction | None = None


class ReplayBuffer:
    """Bounded transition store.

    AGENT buffers evict oldest-first when full.  DEMO buffers are append-only
    up to capacity, except for whole-group replacement via
    :meth:`replace_group`.
    """

    def __init__(self, kind: BufferKind, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.kind = kind
        self.capacity = capacity
        self._items: list[Transition] = []
        self._groups: list[object] = []
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, transition: Transition, group: object = None) -> None:
        if self.kind == BufferKind.DEMO and transition.expert_action is None:
            raise ValueError("demonstration transitions must carry an expert action")
        self._items.append(transition)
        self._groups.append(group)
        self.inserted += 1
        while len(self._items) > self.capacity:
            self._items.pop(0)
            self._groups.pop(0)

    def extend(self, transitions, group: object = None) -> None:
        for t in transitions:
            self.add(t, group=group)

    def replace_group(self, group: object, transitions: list[Transition]) -> None:
        """Drop every transition tagged with ``group`` and append the new ones."""
        keep = [(t, g) for t, g in zip(self._items, self._groups) if g != group]
        self._items = [t for t, _ in keep]
        self._groups = [g for _, g in keep]
        self.extend(transitions, group=group)

    def groups(self) -> set:
        return {g for g in self._groups if g is not None}

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        if n > len(self._items):
            raise ValueError(f"cannot sample {n} of {len(self._items)} transitions")
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]

    def items(self) -> list[Transition]:
        return list(self._items)


# ---------------------------------------------------------------------------
# wire format


def _pack_state(state: ParseState) -> bytes:
    parts = [struct.pack("<I", state.step_index)]
    for img in state.projections:
        h, w = img.pixels.shape
        parts.append(struct.pack("<HH", h, w))
        parts.append(np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes())
    mc = state.corner_lists[0].shape[0]
    parts.append(struct.pack("<H", mc))
    for arr in state.corner_lists:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _unpack_state(buf: bytes, pos: int) -> tuple[ParseState, int]:
    (step,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    projections = []
    for view in (View.FRONT, View.TOP, View.END):
        h, w = struct.unpack_from("<HH", buf, pos)
        pos += 4
        pixels = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w) > 0
        pos += h * w
        projections.append(ProjectionImage(view=view, pixels=pixels))
    (mc,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    lists = []
    for _ in range(3):
        arr = np.frombuffer(buf, dtype="<f4", count=mc * 2, offset=pos).reshape(mc, 2).copy()
        pos += mc * 8
        lists.append(arr)
    state = ParseState(
        projections=tuple(projections),
        step_index=step,
        corner_lists=tuple(lists),
        corner_sets=None,
    )
    return state, pos


def _pack_transition(t: Transition) -> bytes:
    parts = [
        _pack_state(t.state),
        np.asarray(t.action.as_array(), dtype="<f4").tobytes(),
        struct.pack("<d?", t.reward, t.done),
        _pack_state(t.next_state),
        struct.pack("<B", t.expert_action is not None),
    ]
    if t.expert_action is not None:
        parts.append(np.asarray(t.expert_action.as_array(), dtype="<f4").tobytes())
    return b"".join(parts)


def _unpack_transition(buf: bytes, pos: int) -> tuple[Transition, int]:
    state, pos = _unpack_state(buf, pos)
    action = CutAction.from_array(np.frombuffer(buf, dtype="<f4", count=5, offset=pos))
    pos += 20
    reward, done = struct.unpack_from("<d?", buf, pos)
    pos += 9
    next_state, pos = _unpack_state(buf, pos)
    (has_expert,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    expert = None
    if has_expert:
        expert = CutAction.from_array(np.frombuffer(buf, dtype="<f4", count=5, offset=pos))
        pos += 20
    return Transition(state, action, float(reward), next_state, bool(done), expert), pos


def save_transitions(path, transitions: list[Transition], magic: bytes = DEMO_MAGIC) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(transitions)))
        for t in transitions:
            fh.write(_pack_transition(t))


def load_transitions(path, magic: bytes = DEMO_MAGIC) -> list[Transition]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 16
    out = []
    for _ in range(count):
        t, pos = _unpack_transition(buf, pos)
        out.append(t)
    return out


def split_episodes(transitions: list[Transition]) -> list[list[Transition]]:
    """Group a flat record stream into episodes at done markers."""
    episodes: list[list[Transition]] = []
    current: list[Transition] = []
    for t in transitions:
        current.append(t)
        if t.done:
            episodes.append(current)
            current = []
    if current:
        episodes.append(current)
    return episodes
