import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evstream import wire
from evstream.events import EVENT_DTYPE
from evstream.netsim import LinkTrace, Simulator, transmit_duration
from evstream.partition import EventObject
from evstream.relay import (MULTITRACK, SUBGROUP, TIMEOUT_EXPIRED, UNSUBSCRIBED_TRACK, Relay,
                            Subscription)


def obj(g, s, o, track=0, size=1000, index=-1):
    return EventObject(g, s, o, track, 0, np.zeros(0, dtype=EVENT_DTYPE),
                       payload=bytes(size), index=index)


class Harness:
    def __init__(self, bps=None, prop=0, **sub_kw):
        self.sim = Simulator()
        self.sent = []
        self.relay = Relay(self.sim, self._deliver)
        self.subs = {}
        self.add(1, bps, prop, **sub_kw)

    def add(self, sid, bps=None, prop=0, **kw):
        sub = Subscription(sid, LinkTrace.constant(bps, prop), **kw)
        self.subs[sid] = self.relay.add_subscription(sub)
        return sub

    def _deliver(self, sub, o, start, done, arrival):
        self.sent.append((sub.subscriber_id, o.key, start, done, arrival))

    def at(self, t, fn, *args):
        self.sim.schedule(t, fn, *args)

    def keys(self, sid=1):
        return [k for s, k, *_ in self.sent if s == sid]


def test_subgroup_priority_between_heads():
    sub = Subscription(1, LinkTrace())
    sub.enqueue(obj(0, 1, 1), 0)
    sub.enqueue(obj(0, 0, 2), 0)
    assert sub.next_to_send(0)[0].key == (0, 0, 0, 2)


def test_single_object():
    sub = Subscription(1, LinkTrace())
    sub.enqueue(obj(4, 2, 9), 0)
    assert sub.next_to_send(0)[0].key == (0, 4, 2, 9)
    assert sub.next_to_send(0)[0] is None


def test_oldest_group_first():
    sub = Subscription(1, LinkTrace())
    sub.enqueue(obj(1, 0, 0), 0)
    sub.enqueue(obj(0, 3, 7), 0)
    assert sub.next_to_send(0)[0].key == (0, 0, 3, 7)


def test_newest_group_first_option():
    sub = Subscription(1, LinkTrace(), policy="newest-group-first")
    sub.enqueue(obj(0, 3, 7), 0)
    sub.enqueue(obj(1, 0, 0), 0)
    assert sub.next_to_send(0)[0].key == (0, 1, 0, 0)


def test_multitrack_order_is_track_then_receipt():
    sub = Subscription(1, LinkTrace(), mode=MULTITRACK, track_set={0, 1, 2})
    sub.enqueue(obj(5, 0, 0, track=2), 0)
    sub.enqueue(obj(6, 0, 0, track=1), 0)
    sub.enqueue(obj(7, 0, 0, track=1), 0)
    sub.enqueue(obj(8, 0, 0, track=0), 0)
    order = [sub.next_to_send(0)[0].key for _ in range(4)]
    assert order == [(0, 8, 0, 0), (1, 6, 0, 0), (1, 7, 0, 0), (2, 5, 0, 0)]


def test_out_of_order_enqueue_rejected():
    sub = Subscription(1, LinkTrace())
    sub.enqueue(obj(0, 0, 5), 0)
    with pytest.raises(ValueError):
        sub.enqueue(obj(0, 0, 5), 0)


def test_unsubscribed_track_not_enqueued():
    h = Harness(mode=MULTITRACK, track_set={0, 1})
    h.at(0, h.relay.ingest, obj(0, 0, 0, track=3))
    h.sim.run_until(10)
    assert h.sent == []
    assert [(d.key, d.reason) for d in h.relay.drops] == [((3, 0, 0, 0), UNSUBSCRIBED_TRACK)]


def test_fan_out_is_independent():
    h = Harness(bps=8_000_000)
    h.add(2, 8_000_000, delivery_timeout=500)
    h.at(0, h.relay.ingest, obj(0, 0, 0))
    h.at(0, h.relay.ingest, obj(0, 0, 1))
    h.sim.run_until(10_000)
    assert h.keys(1) == [(0, 0, 0, 0), (0, 0, 0, 1)]
    # second object waited 1000 us > 500 us at subscriber 2
    assert h.keys(2) == [(0, 0, 0, 0)]
    assert [d.subscriber_id for d in h.relay.drops] == [2]


def test_hundred_objects_all_forwarded_in_scheduler_order():
    h = Harness()
    rng = np.random.default_rng(0)
    objs = []
    next_id = {}
    for _ in range(100):
        g, s = int(rng.integers(0, 3)), int(rng.integers(0, 4))
        o = next_id.get(g, 0)
        next_id[g] = o + 1
        objs.append(obj(g, s, o))
    for o in objs:
        h.at(0, h.relay.ingest, o)
    h.sim.run_until(1)
    assert len(h.sent) == 100
    # the first ingest finds the link idle; the rest queue behind it at t=0
    rest = sorted(objs[1:], key=lambda o: (o.group_id, o.subgroup_id, o.object_id))
    assert h.keys() == [o.key for o in [objs[0]] + rest]


def test_backlog_drains_in_priority_order():
    h = Harness(bps=8_000_000)
    objs = [obj(g, s, o) for g, s, o in [(1, 0, 0), (0, 2, 3), (0, 0, 4), (1, 1, 1), (0, 1, 5)]]
    h.at(0, h.relay.ingest, obj(0, 0, 0))
    for o in objs:
        h.at(1, h.relay.ingest, o)
    h.sim.run_until(10**6)
    assert h.keys()[1:] == [(0, 0, 0, 4), (0, 0, 1, 5), (0, 0, 2, 3), (0, 1, 0, 0), (0, 1, 1, 1)]


def test_strict_expiry_boundary():
    sub = Subscription(1, LinkTrace(), delivery_timeout=5000)
    sub.enqueue(obj(0, 0, 0), 0)
    assert sub.expire(5000) == []
    drops = sub.expire(5001)
    assert [(d.key, d.reason, d.time) for d in drops] == [((0, 0, 0, 0), TIMEOUT_EXPIRED, 5001)]


def test_infinite_timeout_never_drops():
    sub = Subscription(1, LinkTrace(), delivery_timeout=None)
    sub.enqueue(obj(0, 0, 0), 0)
    assert sub.expire(10**12) == []


def test_in_flight_object_not_aborted():
    # a 4999 us blocker, then the probe starts at 4999 and finishes after 5000
    h = Harness(bps=8_000_000, delivery_timeout=5000)
    h.at(0, h.relay.ingest, obj(0, 0, 0, size=4999))
    h.at(0, h.relay.ingest, obj(0, 0, 1, size=1000))
    h.sim.run_until(10**6)
    assert [(k, start, done) for _, k, start, done, _ in h.sent] == [
        ((0, 0, 0, 0), 0, 4999), ((0, 0, 0, 1), 4999, 5999)]
    assert h.relay.drops == []


def test_update_timeout_expires_stale_objects():
    h = Harness(bps=8_000_000, delivery_timeout=50_000)
    h.at(0, h.relay.ingest, obj(0, 0, 0, size=100_000))  # busy for 100 ms
    h.at(1, h.relay.ingest, obj(0, 0, 1))
    h.at(20_001, h.relay.on_control,
         wire.encode_control(wire.ControlMessage(wire.ControlKind.UPDATE_TIMEOUT, 1,
                                                 delivery_timeout=5000)))
    h.sim.run_until(20_001)
    assert [d.key for d in h.relay.drops] == [(0, 0, 0, 1)]
    assert h.subs[1].delivery_timeout == 5000


def test_resubscribe_keeps_backlog():
    h = Harness(bps=8_000_000, mode=MULTITRACK, track_set={0, 1, 2, 3, 4})
    # keep the link busy, queue 100 ms of track-4 backlog
    h.at(0, h.relay.ingest, obj(0, 0, 0, track=0, size=1000))
    for i in range(100):
        h.at(1, h.relay.ingest, obj(i, 0, 0, track=4))
    unsub = wire.ControlMessage(wire.ControlKind.SUBSCRIBE_TRACKS, 1, track_set={0, 1, 2, 3})
    resub = wire.ControlMessage(wire.ControlKind.SUBSCRIBE_TRACKS, 1, track_set={0, 1, 2, 3, 4})
    h.at(2, h.relay.on_control, unsub)
    h.at(3, h.relay.ingest, obj(200, 0, 0, track=4))  # not subscribed: dropped at fan-out
    h.at(4, h.relay.on_control, resub)
    h.at(5, h.relay.ingest, obj(201, 0, 0, track=4))
    h.sim.run_until(10**6)
    groups = [k[1] for k in h.keys() if k[0] == 4]
    assert groups[:100] == list(range(100)) and groups[100:] == [201]
    assert h.subs[1].track_set == frozenset(range(5))


def test_unsubscribe_keeps_queue_until_sent():
    h = Harness(bps=8_000_000)
    h.at(0, h.relay.ingest, obj(0, 0, 0))
    h.at(0, h.relay.ingest, obj(0, 0, 1))
    h.at(10, h.relay.on_control, wire.ControlMessage(wire.ControlKind.UNSUBSCRIBE, 1))
    h.at(20, h.relay.ingest, obj(0, 0, 2))
    h.sim.run_until(10**6)
    assert h.keys() == [(0, 0, 0, 0), (0, 0, 0, 1)]


def test_unknown_subscriber_ignored(caplog):
    h = Harness()
    h.relay.on_control(wire.ControlMessage(wire.ControlKind.UPDATE_TIMEOUT, 99,
                                           delivery_timeout=5), 0)
    assert "unknown subscriber" in caplog.text
    assert h.relay.controls_applied == []


def test_forced_drop_hook():
    h = Harness()
    h.subs[1].forced.add((0, 0, 0, 1))
    for o in range(3):
        h.at(0, h.relay.ingest, obj(0, 0, o))
    h.sim.run_until(1)
    assert h.keys() == [(0, 0, 0, 0), (0, 0, 0, 2)]
    assert [d.key for d in h.relay.drops] == [(0, 0, 0, 1)]


def test_sweep_expires_without_traffic():
    h = Harness(bps=8_000_000, delivery_timeout=2000)
    h.at(0, h.relay.ingest, obj(0, 0, 0, size=10_000))
    h.at(0, h.relay.ingest, obj(0, 0, 1))
    h.relay.start_sweeps(3000)
    h.sim.run_until(3000)
    assert [(d.key, d.time) for d in h.relay.drops] == [((0, 0, 0, 1), 3000)]


# -- properties over random small workloads ---------------------------------

workload = st.lists(st.tuples(st.integers(0, 4000), st.integers(0, 2), st.integers(0, 3),
                              st.integers(1, 3000)), min_size=1, max_size=60)


def run_workload(items, tau, bps=8_000_000, prop=100):
    h = Harness(bps=bps, prop=prop, delivery_timeout=tau)
    next_id = {}
    objs = []
    for t, g, s, size in sorted(items):
        o = next_id.get(g, 0)
        next_id[g] = o + 1
        ob = obj(g, s, o, size=size, index=len(objs))
        objs.append((t, ob))
        h.at(t, h.relay.ingest, ob)
    h.relay.start_sweeps(20_000)
    h.sim.run_until(20_000)
    return h, objs


def test_subset_monotonicity_is_not_universal():
    # Expiring an object early frees the link for a later one that a longer
    # timeout would starve; the subset relation is checked per scenario in
    # the acceptance suite instead.
    items = [(0, 0, 0, 830), (0, 0, 0, 830), (1, 0, 0, 1)]
    h1, _ = run_workload(items, 829)
    h2, _ = run_workload(items, 830)
    assert set(h1.keys()) - set(h2.keys()) == {(0, 0, 0, 2)}


def test_subset_monotonicity_fails_for_window_batches_too():
    # equal-size window batches: expiring at 1 ms lets a later window through
    sizes = [1, 1, 1, 1, 1, 1, 1, 3, 2, 1]
    delivered = []
    for tau in (1000, 2000):
        h = Harness(bps=8_000_000, prop=100, delivery_timeout=tau)
        next_id = {}
        for w, n in enumerate(sizes):
            g = w // 4
            for s in range(n):
                o = next_id.get(g, 0)
                next_id[g] = o + 1
                h.at((w + 1) * 2000, h.relay.ingest, obj(g, s, o))
        h.relay.start_sweeps(40_000)
        h.sim.run_until(40_000)
        delivered.append(set(h.keys()))
    assert not delivered[0] <= delivered[1]


@settings(max_examples=80, deadline=None)
@given(workload, st.one_of(st.none(), st.integers(1, 3000)))
def test_conservation_order_and_latency_bound(items, tau):
    h, objs = run_workload(items, tau)
    sub = h.subs[1]
    receipt = {o.key: t for t, o in objs}
    size = {o.key: o.size for _, o in objs}
    assert sub.ingested == len(objs)
    assert sub.ingested == sub.forwarded + sub.expired + sub.backlog()
    assert sub.expired == len(h.relay.drops)
    last = {}
    for _, key, start, done, arrival in h.sent:
        stream = key[:3]
        assert key[3] > last.get(stream, -1)
        last[stream] = key[3]
        r = receipt[key]
        if tau is not None:
            trace = sub.link.trace
            assert arrival - r <= tau + transmit_duration(size[key], trace, start) + trace.propagation_delay
    if tau is None:
        assert h.relay.drops == []


@settings(max_examples=40, deadline=None)
@given(workload)
def test_link_never_exceeds_capacity(items):
    h, _ = run_workload(items, None)
    spans = [(start, done) for *_, start, done, _ in h.sent]
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert b0 >= a1
    sent_bits = h.subs[1].link.bytes_sent * 8
    if spans:
        assert sent_bits * 10**6 <= 8_000_000 * (spans[-1][1] - spans[0][0])
