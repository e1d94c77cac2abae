"""MoQ-style relay with per-subscription priority queues and delivery timeouts.

Each :class:`Subscription` owns an egress :class:`~evstream.netsim.Link`.
Whenever that link goes idle the relay prunes expired objects and starts
sending the highest-priority queued object.  Objects whose age at the relay
exceeds the subscription's delivery timeout are dropped silently; an object
already on the wire is never aborted.

Legacy multi-track subscriptions keep their per-track backlog across
unsubscribe/resubscribe; that lingering backlog is the desynchronization
behaviour the subgroup scheme is meant to avoid, so it is reproduced here on
purpose.
"""
from __future__ import annotations

import heapq
import logging
from collections import deque
from typing import Callable, NamedTuple

from evstream import wire
from evstream.netsim import Link, LinkTrace, Simulator
from evstream.partition import EventObject

log = logging.getLogger(__name__)

SUBGROUP = "subgroup"
MULTITRACK = "multitrack"
POLICIES = ("oldest-group-first", "newest-group-first")

TIMEOUT_EXPIRED = "timeout-expired"
UNSUBSCRIBED_TRACK = "unsubscribed-track"

_QUEUED, _SENDING, _SENT, _EXPIRED = range(4)


class DropRecord(NamedTuple):
    subscriber_id: int
    key: tuple[int, int, int, int]
    reason: str
    time: int
    index: int = -1


class _Entry:
    __slots__ = ("obj", "receipt", "state")

    def __init__(self, obj: EventObject, receipt: int):
        self.obj = obj
        self.receipt = receipt
        self.state = _QUEUED


class Subscription:
    """Relay-side state of one subscriber."""

    def __init__(self, subscriber_id: int, egress: LinkTrace, mode: str = SUBGROUP,
                 delivery_timeout: int | None = None, track_set=None,
                 policy: str = "oldest-group-first"):
        if mode not in (SUBGROUP, MULTITRACK):
            raise ValueError(f"unknown subscription mode {mode!r}")
        if policy not in POLICIES:
            raise ValueError(f"unknown scheduling policy {policy!r}")
        if delivery_timeout is not None and delivery_timeout <= 0:
            raise ValueError("delivery timeout must be > 0 or None (infinite)")
        self.subscriber_id = subscriber_id
        self.mode = mode
        self.delivery_timeout = delivery_timeout
        self.track_set = frozenset(track_set if track_set is not None else {0})
        self.policy = policy
        self.link = Link(egress)
        self.active = True
        self.sending: _Entry | None = None
        self.forced: set[tuple[int, int, int, int]] = set()
        self._heap: list = []
        self._fifo: deque[_Entry] = deque()
        self._seq = 0
        self._stale = 0
        self.ingested = 0
        self.forwarded = 0
        self.expired = 0
        self.queued = 0
        # last object id enqueued per (track, group, subgroup); guards stream order
        self._last_id: dict[tuple[int, int, int], int] = {}

    def _sort_key(self, obj: EventObject):
        if self.mode == MULTITRACK:
            return (obj.track_id, self._seq)
        g = obj.group_id if self.policy == "oldest-group-first" else -obj.group_id
        return (g, obj.subgroup_id, obj.object_id)

    def enqueue(self, obj: EventObject, now: int) -> DropRecord | None:
        stream = (obj.track_id, obj.group_id, obj.subgroup_id)
        last = self._last_id.get(stream)
        if last is not None and obj.object_id <= last:
            raise ValueError(f"object {obj.key} out of order in its subgroup stream")
        self._last_id[stream] = obj.object_id
        self.ingested += 1
        if obj.key in self.forced:
            self.forced.discard(obj.key)
            self.expired += 1
            return DropRecord(self.subscriber_id, obj.key, TIMEOUT_EXPIRED, now, obj.index)
        entry = _Entry(obj, now)
        heapq.heappush(self._heap, (self._sort_key(obj), self._seq, entry))
        self._seq += 1
        self._fifo.append(entry)
        self.queued += 1
        return None

    def expire(self, now: int) -> list[DropRecord]:
        """Remove queued objects older than the delivery timeout (strict)."""
        drops = []
        fifo = self._fifo
        tau = self.delivery_timeout
        while fifo:
            head = fifo[0]
            if head.state == _QUEUED:
                if tau is None or now - head.receipt <= tau:
                    break
                head.state = _EXPIRED
                self.queued -= 1
                self.expired += 1
                self._stale += 1
                o = head.obj
                head.obj = None
                drops.append(DropRecord(self.subscriber_id, o.key, TIMEOUT_EXPIRED, now, o.index))
            fifo.popleft()
        if self._stale > 2 * self.queued + 1024:
            self._heap = [item for item in self._heap if item[2].state == _QUEUED]
            heapq.heapify(self._heap)
            self._stale = 0
        return drops

    def next_to_send(self, now: int) -> tuple[EventObject | None, list[DropRecord]]:
        """Prune expired heads, then pick the highest-priority queued object."""
        drops = self.expire(now)
        heap = self._heap
        while heap:
            entry = heapq.heappop(heap)[2]
            if entry.state != _QUEUED:
                self._stale -= 1
            else:
                entry.state = _SENDING
                self.queued -= 1
                self.sending = entry
                return entry.obj, drops
        return None, drops

    def finish_send(self) -> None:
        self.sending.state = _SENT
        self.sending = None
        self.forwarded += 1

    def backlog(self) -> int:
        return self.queued + (1 if self.sending is not None else 0)


DeliverFn = Callable[[Subscription, EventObject, int, int, int], None]


class Relay:
    """Fan-out point between one publisher and any number of subscriptions.

    ``on_deliver(sub, obj, start, done, arrival)`` is called when an object
    starts transmission; ``arrival`` is when it reaches the subscriber.
    """

    def __init__(self, sim: Simulator, on_deliver: DeliverFn | None = None,
                 sweep_us: int = 1000):
        self.sim = sim
        self.on_deliver = on_deliver
        self.sweep_us = sweep_us
        self.subscriptions: dict[int, Subscription] = {}
        self.drops: list[DropRecord] = []
        self.controls_applied: list[tuple[int, wire.ControlMessage]] = []

    def add_subscription(self, sub: Subscription) -> Subscription:
        self.subscriptions[sub.subscriber_id] = sub
        return sub

    def ingest(self, obj: EventObject, receipt_time: int | None = None) -> None:
        now = self.sim.now if receipt_time is None else receipt_time
        for sub in self.subscriptions.values():
            if not sub.active:
                continue
            if sub.mode == MULTITRACK and obj.track_id not in sub.track_set:
                self.drops.append(
                    DropRecord(sub.subscriber_id, obj.key, UNSUBSCRIBED_TRACK, now, obj.index))
                continue
            drop = sub.enqueue(obj, now)
            if drop is not None:
                self.drops.append(drop)
            self._pump(sub, now)

    def _pump(self, sub: Subscription, now: int) -> None:
        if sub.sending is not None or not sub.link.idle(now):
            return
        obj, drops = sub.next_to_send(now)
        self.drops.extend(drops)
        if obj is None:
            return
        start, done, arrival = sub.link.send(obj.size, now)
        self.sim.schedule(done, self._tx_done, sub)
        if self.on_deliver is not None:
            self.on_deliver(sub, obj, start, done, arrival)

    def _tx_done(self, sub: Subscription) -> None:
        sub.finish_send()
        self._pump(sub, self.sim.now)

    def sweep(self, now: int | None = None) -> None:
        now = self.sim.now if now is None else now
        for sub in self.subscriptions.values():
            self.drops.extend(sub.expire(now))

    def start_sweeps(self, until: int) -> None:
        """Run :meth:`sweep` every ``sweep_us`` up to ``until``."""
        def tick():
            self.sweep()
            nxt = self.sim.now + self.sweep_us
            if nxt <= until:
                self.sim.schedule(nxt, tick)
        self.sim.schedule(min(self.sweep_us, until), tick)

    def on_control(self, msg: wire.ControlMessage | bytes, now: int | None = None) -> None:
        if isinstance(msg, (bytes, bytearray)):
            msg = wire.decode_control(bytes(msg))
        now = self.sim.now if now is None else now
        sub = self.subscriptions.get(msg.subscriber_id)
        if sub is None:
            log.warning("control %s for unknown subscriber %d ignored", msg.kind.name,
                        msg.subscriber_id)
            return
        kind = msg.kind
        if kind == wire.ControlKind.SUBSCRIBE:
            sub.active = True
            sub.delivery_timeout = msg.delivery_timeout
        elif kind == wire.ControlKind.UPDATE_TIMEOUT:
            sub.delivery_timeout = msg.delivery_timeout
        elif kind == wire.ControlKind.SUBSCRIBE_TRACKS:
            sub.track_set = frozenset(msg.track_set)
        elif kind == wire.ControlKind.UNSUBSCRIBE:
            # queued backlog stays until it is sent or expires
            if sub.mode == MULTITRACK and msg.track_set:
                sub.track_set = sub.track_set - msg.track_set
            else:
                sub.active = False
        self.controls_applied.append((now, msg))
        self.drops.extend(sub.expire(now))
        self._pump(sub, now)
