"""Publisher-side segmentation of the event stream into transport objects.

Two schemes are provided:

* subgroup partitioning: every ``T`` ms window is chunked into objects of
  ``E`` events which fill subgroups in temporal order according to the
  capacity schedule ``c0 * f**s``; the subgroup index restarts at 0 each
  window and a new group starts every ``G`` ms.
* multi-track partitioning (legacy): every interval, up to ``E`` consecutive
  events go to each of ``N`` tracks; the rest is truncated at the publisher.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from evstream import wire
from evstream.events import EVENT_DTYPE

MODES = ("plain", "chained")
ASSIGNMENTS = ("sequential", "striped")
MAX_SUBGROUP_IDS = 1 << 16


@dataclass(frozen=True)
class SubgroupConfig:
    events_per_object: int = 250
    window_ms: int = 50
    group_ms: int = 1000
    base_capacity: int = 1
    growth: float = 1
    max_subgroups: int | None = None
    mode: str = "plain"
    assignment: str = "sequential"

    def __post_init__(self):
        if self.events_per_object < 1:
            raise ValueError("events_per_object (E) must be >= 1")
        if self.window_ms < 1:
            raise ValueError("window_ms (T) must be >= 1")
        if self.group_ms < self.window_ms or self.group_ms % self.window_ms:
            raise ValueError("group_ms (G) must be a positive multiple of window_ms (T)")
        if self.base_capacity < 1:
            raise ValueError("base_capacity (c0) must be >= 1")
        if self.growth < 1:
            raise ValueError("growth (f) must be >= 1")
        if self.max_subgroups is not None and not 1 <= self.max_subgroups <= 1 << 16:
            raise ValueError("max_subgroups must be in 1..65536")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.assignment not in ASSIGNMENTS:
            raise ValueError(f"assignment must be one of {ASSIGNMENTS}")

    @property
    def window_us(self) -> int:
        return self.window_ms * 1000

    @property
    def group_us(self) -> int:
        return self.group_ms * 1000


@dataclass(frozen=True)
class TrackConfig:
    events_per_object: int = 250
    num_tracks: int = 5
    interval_ms: int = 50
    mode: str = "plain"

    def __post_init__(self):
        if self.events_per_object < 1:
            raise ValueError("events_per_object (E) must be >= 1")
        if not 1 <= self.num_tracks <= 64:
            raise ValueError("num_tracks (N) must be in 1..64")
        if self.interval_ms < 1:
            raise ValueError("interval_ms must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def window_us(self) -> int:
        return self.interval_ms * 1000


@dataclass
class EventObject:
    group_id: int
    subgroup_id: int
    object_id: int
    track_id: int
    window_index: int
    events: np.ndarray
    payload: bytes = b""
    emit_time: int = 0
    index: int = -1

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.track_id, self.group_id, self.subgroup_id, self.object_id)

    @property
    def n_events(self) -> int:
        return len(self.events)

    @property
    def size(self) -> int:
        return len(self.payload)


@dataclass
class PartitionedBatch:
    window_index: int
    objects: list[EventObject] = field(default_factory=list)
    truncated: int = 0


def capacity(s: int, cfg: SubgroupConfig):
    """Objects per window allotted to subgroup ``s``: ``c0 * f**s``."""
    if s < 0:
        raise ValueError("subgroup index must be >= 0")
    if float(cfg.growth).is_integer():
        return cfg.base_capacity * int(cfg.growth) ** s
    return cfg.base_capacity * cfg.growth ** s


def subgroup_counts(n_objects: int, cfg: SubgroupConfig) -> list[int]:
    """Objects per subgroup when ``n_objects`` fill subgroups in order."""
    counts = []
    left = n_objects
    s = 0
    filled = 0.0
    last = (cfg.max_subgroups or MAX_SUBGROUP_IDS) - 1
    while left > 0:
        if s == last:
            counts.append(left)
            break
        filled += capacity(s, cfg)
        take = min(left, math.ceil(filled) - (n_objects - left))
        counts.append(take)
        left -= take
        s += 1
    return counts


def assign_subgroups(n_objects: int, cfg: SubgroupConfig) -> list[int]:
    """Subgroup id of each of the window's objects, in temporal order.

    Sequential fill gives object ``j`` the smallest ``s`` whose cumulative
    capacity exceeds ``j``.  Striped assignment keeps the same per-subgroup
    counts but deals objects round-robin across subgroups.
    """
    counts = subgroup_counts(n_objects, cfg)
    if cfg.assignment == "sequential":
        out = []
        for s, c in enumerate(counts):
            out.extend([s] * c)
        return out
    left = list(counts)
    out = []
    while len(out) < n_objects:
        for s, c in enumerate(left):
            if c:
                out.append(s)
                left[s] -= 1
    return out


@dataclass
class PartitionState:
    """Per-publisher state: current group, its object counter, chain context."""

    group_id: int = -1
    next_object_id: int = 0
    chain: wire.ChainContext = field(default_factory=wire.ChainContext)


def _encode(obj: EventObject, mode: str, chain: wire.ChainContext) -> None:
    header = wire.ObjectHeader(obj.group_id, obj.subgroup_id, obj.object_id, obj.n_events)
    obj.payload = wire.encode_object(header, obj.events, mode, chain)


def partition_subgroup_window(events: np.ndarray, cfg: SubgroupConfig,
                              state: PartitionState, window_index: int,
                              encode: bool = True) -> PartitionedBatch:
    batch = PartitionedBatch(window_index)
    start = window_index * cfg.window_us
    group_id = start // cfg.group_us
    if group_id != state.group_id:
        state.group_id = group_id
        state.next_object_id = 0
    n = len(events)
    if n == 0:
        return batch
    E = cfg.events_per_object
    n_objects = -(-n // E)
    # plain payloads are slices of one packed buffer
    packed = wire.pack_events(events) if encode and cfg.mode == "plain" else None
    for j, s in enumerate(assign_subgroups(n_objects, cfg)):
        obj = EventObject(group_id, s, state.next_object_id, 0, window_index,
                          events[j * E:(j + 1) * E])
        state.next_object_id += 1
        if packed is not None:
            head = wire.ObjectHeader(group_id, s, obj.object_id, len(obj.events)).encode()
            obj.payload = head + packed[j * E * wire.EVENT_SIZE:(j + 1) * E * wire.EVENT_SIZE]
        elif encode:
            _encode(obj, cfg.mode, state.chain)
        batch.objects.append(obj)
    return batch


def partition_track_window(events: np.ndarray, cfg: TrackConfig, window_index: int = 0,
                           encode: bool = True) -> PartitionedBatch:
    """Split the interval's first ``N*E`` events across the ``N`` tracks.

    Each interval is its own group on every track, with a single object.
    """
    E, N = cfg.events_per_object, cfg.num_tracks
    batch = PartitionedBatch(window_index, truncated=max(0, len(events) - N * E))
    for i in range(N):
        chunk = events[i * E:(i + 1) * E]
        if not len(chunk):
            break
        obj = EventObject(window_index, 0, 0, i, window_index, chunk)
        if encode:
            _encode(obj, cfg.mode, wire.ChainContext())
        batch.objects.append(obj)
    return batch


class SubgroupPartitioner:
    def __init__(self, cfg: SubgroupConfig):
        self.cfg = cfg
        self.state = PartitionState()

    @property
    def window_us(self) -> int:
        return self.cfg.window_us

    def window(self, events: np.ndarray, window_index: int) -> PartitionedBatch:
        return partition_subgroup_window(events, self.cfg, self.state, window_index)


class TrackPartitioner:
    def __init__(self, cfg: TrackConfig):
        self.cfg = cfg

    @property
    def window_us(self) -> int:
        return self.cfg.window_us

    def window(self, events: np.ndarray, window_index: int) -> PartitionedBatch:
        return partition_track_window(events, self.cfg, window_index)


def empty_events() -> np.ndarray:
    return np.empty(0, dtype=EVENT_DTYPE)
