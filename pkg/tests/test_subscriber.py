import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evstream import wire
from evstream.events import EVENT_DTYPE
from evstream.partition import EventObject
from evstream.subscriber import (CORRUPT, DECODED, DISCARDED, EpochStats, Receiver,
                                 TimeoutController, TimeoutControllerConfig,
                                 TimeoutControllerState, TrackControllerConfig,
                                 TrackControllerState, timeout_controller_step,
                                 track_controller_step)


def events(ts):
    arr = np.zeros(len(ts), dtype=EVENT_DTYPE)
    arr["t"] = ts
    return arr


def make_chain(group, subgroup, oids, mode="chained", start=0):
    ctx = wire.ChainContext()
    out = {}
    for k, o in enumerate(oids):
        ev = events([start + 10 * k, start + 10 * k + 3])
        h = wire.ObjectHeader(group, subgroup, o, len(ev))
        out[o] = wire.encode_object(h, ev, mode, ctx)
    return out


def meta(g, s, o, emit=0, index=0):
    return EventObject(g, s, o, 0, 0, events([]), emit_time=emit, index=index)


def test_plain_any_order_decodes():
    objs = make_chain(0, 0, [0, 1, 2], mode="plain")
    rx = Receiver(1)
    assert [rx.on_object(objs[o], 100, meta(0, 0, o)) for o in (2, 0, 1)] == [DECODED] * 3


def test_gap_discards_rest_of_subgroup():
    objs = make_chain(0, 1, [5, 7, 9])
    rx = Receiver(1)
    assert rx.on_object(objs[5], 100, meta(0, 1, 5)) == DECODED
    # 7 expired at the relay; 9 depends on it
    assert rx.on_object(objs[9], 120, meta(0, 1, 9)) == DISCARDED
    assert rx.outcomes == [DECODED, DISCARDED]


def test_new_group_decodes_again():
    rx = Receiver(1)
    g0 = make_chain(0, 0, [0, 1, 2])
    rx.on_object(g0[0], 10, meta(0, 0, 0))
    rx.on_object(g0[2], 10, meta(0, 0, 2))
    g1 = make_chain(1, 0, [0, 1], start=1_000_000)
    assert rx.on_object(g1[0], 1_000_010, meta(1, 0, 0)) == DECODED
    assert rx.on_object(g1[1], 1_000_020, meta(1, 0, 1)) == DECODED


def test_other_subgroups_unaffected():
    rx = Receiver(1)
    a = make_chain(0, 0, [0, 2, 4])
    b = make_chain(0, 1, [1, 3])
    rx.on_object(a[0], 1, meta(0, 0, 0))
    assert rx.on_object(a[4], 2, meta(0, 0, 4)) == DISCARDED
    assert rx.on_object(b[1], 3, meta(0, 1, 1)) == DECODED
    assert rx.on_object(b[3], 4, meta(0, 1, 3)) == DECODED


def test_corrupt_object_counted():
    rx = Receiver(1)
    assert rx.on_object(b"\x00" * 5, 1) == CORRUPT
    objs = make_chain(0, 0, [0], mode="plain")
    assert rx.on_object(objs[0][:-3], 1) == CORRUPT
    assert len(rx.outcomes) == 2


def test_latency_samples():
    rx = Receiver(1)
    objs = make_chain(0, 0, [0], mode="plain", start=1000)
    rx.on_object(objs[0], 5000, meta(0, 0, 0, emit=2000))
    (s,) = rx.samples()
    assert s.object_latency == 3000
    assert s.oldest_event_latency == 4000
    assert list(rx.event_latencies[0]) == [4000, 3997]


def test_epoch_stats_and_fraction():
    rx = Receiver(1)
    objs = make_chain(0, 0, [0, 1, 2, 3], mode="plain")
    for o, lat in ((0, 10), (1, 20), (3, 30)):
        rx.on_object(objs[o], lat, meta(0, 0, o))
    st_ = rx.take_stats()
    assert st_.n_objects == 3
    assert st_.p95_latency == 30
    assert st_.mean_latency == 20
    assert st_.delivered_fraction == pytest.approx(3 / 4)
    empty = rx.take_stats()
    assert empty.n_objects == 0 and empty.p95_latency is None and empty.delivered_fraction == 1.0


CFG = TimeoutControllerConfig(target_us=50_000)


def stats(p95, frac=1.0, mean=None):
    return EpochStats(10, p95, mean if mean is not None else p95, frac)


def test_timeout_steady_state_no_message():
    assert timeout_controller_step(CFG, stats(20_000), 50_000, TimeoutControllerState()) is None


def test_timeout_decrease():
    assert timeout_controller_step(CFG, stats(100_000), 50_000, TimeoutControllerState()) == 35_000


def test_timeout_decrease_from_infinite_and_floor():
    assert timeout_controller_step(CFG, stats(100_000), None, TimeoutControllerState()) == 700_000
    assert timeout_controller_step(CFG, stats(100_000), 1000, TimeoutControllerState()) is None


def test_timeout_increase_after_dwell():
    state = TimeoutControllerState()
    out = [timeout_controller_step(CFG, stats(10_000, 0.9), 30_000, state) for _ in range(10)]
    assert out[:9] == [None] * 9 and out[9] == 40_000
    assert state.dwell == 0


def test_timeout_full_delivery_blocks_increase():
    state = TimeoutControllerState()
    out = [timeout_controller_step(CFG, stats(10_000, 1.0), 30_000, state) for _ in range(30)]
    assert out == [None] * 30


def test_timeout_dwell_resets_in_band():
    state = TimeoutControllerState()
    for _ in range(9):
        timeout_controller_step(CFG, stats(10_000, 0.9), 30_000, state)
    timeout_controller_step(CFG, stats(40_000, 0.9), 30_000, state)
    assert timeout_controller_step(CFG, stats(10_000, 0.9), 30_000, state) is None


def test_timeout_controller_emits_control():
    c = TimeoutController(CFG, 7, 50_000)
    msg = c.step(stats(100_000))
    assert msg == wire.ControlMessage(wire.ControlKind.UPDATE_TIMEOUT, 7, delivery_timeout=35_000)
    assert c.tau == 35_000


def test_controller_config_validation():
    with pytest.raises(ValueError):
        TimeoutControllerConfig(target_us=1, beta=1.0)
    with pytest.raises(ValueError):
        TimeoutControllerConfig(target_us=1, min_us=10, max_us=5)
    with pytest.raises(ValueError):
        TrackControllerConfig(target_us=1, resubscribe_fraction=1.5)


TCFG = TrackControllerConfig(target_us=50_000)


def test_track_unsubscribe_highest():
    out = track_controller_step(TCFG, stats(0, mean=75_000), frozenset(range(5)), 5,
                                TrackControllerState())
    assert out == frozenset(range(4))


def test_track_keeps_last_track():
    assert track_controller_step(TCFG, stats(0, mean=75_000), frozenset({0}), 5,
                                 TrackControllerState()) is None


def test_track_resubscribe_after_dwell():
    state = TrackControllerState()
    first = track_controller_step(TCFG, stats(0, mean=10_000), frozenset({0, 1}), 5, state)
    second = track_controller_step(TCFG, stats(0, mean=10_000), frozenset({0, 1}), 5, state)
    assert first is None and second == frozenset({0, 1, 2})


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 200_000), min_size=1, max_size=40), st.floats(0, 1),
       st.one_of(st.none(), st.integers(1000, 1_000_000)))
def test_timeout_controller_stays_in_bounds(p95s, frac, tau):
    state = TimeoutControllerState()
    for p in p95s:
        new = timeout_controller_step(CFG, stats(p, frac), tau, state)
        if new is not None:
            assert CFG.min_us <= new <= CFG.max_us
            assert new != tau
            tau = new


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 200_000), min_size=1, max_size=40), st.integers(1, 8))
def test_track_controller_keeps_valid_sets(means, n):
    state = TrackControllerState()
    tracks = frozenset(range(n))
    for m in means:
        new = track_controller_step(TCFG, stats(0, mean=m), tracks, n, state)
        if new is not None:
            assert new and new <= frozenset(range(n)) and new != tracks
            tracks = new
