"""Receiver-side decoding, latency bookkeeping and rate-adaptation controllers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evstream import wire
from evstream.metrics import nearest_rank
from evstream.partition import EventObject

DECODED = "decoded"
DISCARDED = "dependency-discarded"
CORRUPT = "corrupt"


@dataclass(frozen=True)
class LatencySample:
    index: int
    object_latency: int
    oldest_event_latency: int


@dataclass(frozen=True)
class EpochStats:
    n_objects: int
    p95_latency: int | None
    mean_latency: float | None
    delivered_fraction: float


class Receiver:
    """Decodes arriving objects and records one latency sample per arrival.

    Chained objects decode only if their subgroup predecessor in the same
    group was decoded; after the first failure the rest of that subgroup is
    discarded until the next group starts.
    """

    def __init__(self, subscriber_id: int, keep_events: bool = False):
        self.subscriber_id = subscriber_id
        self.keep_events = keep_events
        self.chains: dict[int, wire.ChainContext] = {}
        self.broken: set[tuple[int, int, int]] = set()
        self.indices: list[int] = []
        self.arrivals: list[int] = []
        self.outcomes: list[str] = []
        self.object_latency: list[int] = []
        self.oldest_latency: list[int] = []
        self.event_latencies: list[np.ndarray] = []
        self.decoded: list[tuple[int, np.ndarray]] = []
        self.decoded_events = 0
        self._pending: list[int] = []
        self._high: dict[tuple[int, int], int] = {}
        self._expected = 0
        self._received = 0

    def on_object(self, payload: bytes, arrival: int, obj: EventObject | None = None) -> str:
        index = obj.index if obj is not None else len(self.indices)
        emit = obj.emit_time if obj is not None else arrival
        track = obj.track_id if obj is not None else 0
        outcome, ev = self._decode(payload, track)
        self.indices.append(index)
        self.arrivals.append(arrival)
        self.outcomes.append(outcome)
        lat = arrival - emit
        self.object_latency.append(lat)
        if ev is not None and len(ev):
            oldest = arrival - int(ev["t"][0])
            self.event_latencies.append((arrival - ev["t"].astype(np.int64)).astype(np.uint32))
            self.decoded_events += len(ev)
            if self.keep_events:
                self.decoded.append((index, ev))
        else:
            oldest = lat
        self.oldest_latency.append(max(oldest, lat))
        self._pending.append(lat)
        return outcome

    def _decode(self, payload: bytes, track: int):
        try:
            header = wire.decode_header(payload)
        except wire.FormatError:
            return CORRUPT, None
        self._note_id(track, header.group_id, header.object_id)
        stream = (track, header.group_id, header.subgroup_id)
        if header.chained and stream in self.broken:
            return DISCARDED, None
        ctx = self.chains.setdefault(track, wire.ChainContext())
        try:
            _, ev = wire.decode_object(payload, ctx)
        except wire.DependencyError:
            self.broken.add(stream)
            return DISCARDED, None
        except (wire.FormatError, ValueError):
            return CORRUPT, None
        return DECODED, ev

    def _note_id(self, track: int, group: int, object_id: int) -> None:
        key = (track, group)
        high = self._high.get(key, -1)
        if object_id > high:
            self._expected += object_id - high
            self._high[key] = object_id
        self._received += 1

    def take_stats(self) -> EpochStats:
        """Statistics of arrivals since the previous call."""
        lats = self._pending
        if self._expected:
            frac = min(1.0, self._received / self._expected)
        else:
            frac = 1.0
        stats = EpochStats(
            n_objects=len(lats),
            p95_latency=nearest_rank(sorted(lats), 95) if lats else None,
            mean_latency=sum(lats) / len(lats) if lats else None,
            delivered_fraction=frac,
        )
        self._pending = []
        self._expected = self._received = 0
        return stats

    def samples(self) -> list[LatencySample]:
        return [LatencySample(i, a, b) for i, a, b in
                zip(self.indices, self.object_latency, self.oldest_latency)]


@dataclass(frozen=True)
class TimeoutControllerConfig:
    target_us: int
    epoch_us: int = 1_000_000
    beta: float = 0.7
    alpha: float = 0.5
    step_us: int = 10_000
    dwell: int = 10
    min_us: int = 1_000
    max_us: int = 1_000_000

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must be in (0, 1)")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not 0 < self.min_us <= self.max_us:
            raise ValueError("need 0 < min_us <= max_us")
        if self.target_us <= 0 or self.epoch_us <= 0 or self.dwell < 1:
            raise ValueError("target, epoch and dwell must be positive")


@dataclass
class TimeoutControllerState:
    dwell: int = 0


def timeout_controller_step(cfg: TimeoutControllerConfig, stats: EpochStats,
                            tau: int | None, state: TimeoutControllerState) -> int | None:
    """New delivery timeout to request, or ``None`` to stay put.

    ``tau=None`` means the timeout is currently infinite.
    """
    p95 = stats.p95_latency
    if p95 is None:
        return None
    if p95 > cfg.target_us:
        state.dwell = 0
        base = cfg.max_us if tau is None else tau
        new = max(cfg.min_us, int(cfg.beta * base))
        return new if new != tau else None
    if p95 < cfg.alpha * cfg.target_us:
        state.dwell += 1
        if state.dwell >= cfg.dwell and stats.delivered_fraction < 1.0 and tau is not None:
            state.dwell = 0
            new = min(cfg.max_us, tau + cfg.step_us)
            return new if new != tau else None
        return None
    state.dwell = 0
    return None


@dataclass(frozen=True)
class TrackControllerConfig:
    target_us: int
    interval_us: int = 50_000
    resubscribe_fraction: float = 0.8
    dwell: int = 2

    def __post_init__(self):
        if not 0 < self.resubscribe_fraction < 1:
            raise ValueError("resubscribe_fraction must be in (0, 1)")
        if self.target_us <= 0 or self.interval_us <= 0 or self.dwell < 1:
            raise ValueError("target, interval and dwell must be positive")


@dataclass
class TrackControllerState:
    below: int = 0


def track_controller_step(cfg: TrackControllerConfig, stats: EpochStats,
                          track_set: frozenset[int], num_tracks: int,
                          state: TrackControllerState) -> frozenset[int] | None:
    """New track set to subscribe to, or ``None`` to keep the current one."""
    mean = stats.mean_latency
    if mean is None:
        state.below = 0
        return None
    if mean > cfg.target_us:
        state.below = 0
        if len(track_set) > 1:
            return track_set - {max(track_set)}
        return None
    if mean < cfg.resubscribe_fraction * cfg.target_us:
        state.below += 1
        missing = [i for i in range(num_tracks) if i not in track_set]
        if state.below >= cfg.dwell and missing:
            state.below = 0
            return track_set | {min(missing)}
        return None
    state.below = 0
    return None


@dataclass
class TimeoutController:
    cfg: TimeoutControllerConfig
    subscriber_id: int
    tau: int | None
    state: TimeoutControllerState = field(default_factory=TimeoutControllerState)

    @property
    def period_us(self) -> int:
        return self.cfg.epoch_us

    def step(self, stats: EpochStats) -> wire.ControlMessage | None:
        new = timeout_controller_step(self.cfg, stats, self.tau, self.state)
        if new is None:
            return None
        self.tau = new
        return wire.ControlMessage(wire.ControlKind.UPDATE_TIMEOUT, self.subscriber_id,
                                   delivery_timeout=new)


@dataclass
class TrackController:
    cfg: TrackControllerConfig
    subscriber_id: int
    track_set: frozenset[int]
    num_tracks: int
    state: TrackControllerState = field(default_factory=TrackControllerState)

    @property
    def period_us(self) -> int:
        return self.cfg.interval_us

    def step(self, stats: EpochStats) -> wire.ControlMessage | None:
        new = track_controller_step(self.cfg, stats, self.track_set, self.num_tracks,
                                    self.state)
        if new is None:
            return None
        self.track_set = new
        return wire.ControlMessage(wire.ControlKind.SUBSCRIBE_TRACKS, self.subscriber_id,
                                   track_set=new)
