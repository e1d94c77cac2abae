"""Bit-exact little-endian serialization.

Layouts
-------
packed event (8 bytes)
    ``u32 t | u16 x (bit 15 = 0) | u16 y (bits 0-14) + p (bit 15)``
object header (23 bytes)
    ``u64 group | u16 subgroup | u64 object | u32 event_count | u8 flags``
plain object
    header followed by ``event_count`` packed events
chained object (flags bit 0 set)
    header, then a LEB128 *predecessor gap* (``object_id`` minus the object id
    of the previous object in the same group/subgroup, 0 when there is none),
    then one record per event: a LEB128 timestamp delta from the previous
    event of the subgroup followed by the 4 coordinate/polarity bytes.  When
    the subgroup has no earlier event in this group, the first record carries
    an absolute ``u32`` timestamp instead of a delta.
control message (17 bytes)
    ``u8 kind | u64 subscriber_id | u64 payload`` where the payload is the
    delivery timeout in microseconds (``2**64 - 1`` = infinite) or a track
    bitmask.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from evstream import kernels
from evstream.errors import DependencyError, FormatError
from evstream.events import EVENT_DTYPE, Event, to_array

__all__ = [
    "DependencyError", "FormatError", "ObjectHeader", "ChainContext",
    "ControlKind", "ControlMessage", "encode_event", "decode_event",
    "pack_events", "unpack_events", "encode_object", "decode_object",
    "decode_header", "encode_control", "decode_control",
]

EVENT_SIZE = 8
HEADER_SIZE = 23
CONTROL_SIZE = 17
FLAG_CHAINED = 0x01
INFINITE = (1 << 64) - 1

_EVENT = struct.Struct("<IHH")
_HEADER = struct.Struct("<QHQIB")
_CONTROL = struct.Struct("<BQQ")

pack_events = kernels.pack_events
unpack_events = kernels.unpack_events


def encode_event(e: Event) -> bytes:
    if not (0 <= e.x < 1 << 15 and 0 <= e.y < 1 << 15 and e.p in (0, 1)
            and 0 <= e.t < 1 << 32):
        raise ValueError(f"invalid event {e}")
    return _EVENT.pack(e.t, e.x, e.y | (e.p << 15))


def decode_event(data: bytes) -> Event:
    if len(data) != EVENT_SIZE:
        raise FormatError(f"packed event must be 8 bytes, got {len(data)}")
    t, x, yp = _EVENT.unpack(data)
    if x & 0x8000:
        raise FormatError("x has bit 15 set")
    return Event(x=x, y=yp & 0x7FFF, t=t, p=yp >> 15)


@dataclass(frozen=True)
class ObjectHeader:
    group_id: int
    subgroup_id: int
    object_id: int
    event_count: int = 0
    flags: int = 0

    @property
    def chained(self) -> bool:
        return bool(self.flags & FLAG_CHAINED)

    def encode(self) -> bytes:
        if self.flags & ~FLAG_CHAINED:
            raise ValueError("reserved flag bits must be zero")
        return _HEADER.pack(self.group_id, self.subgroup_id, self.object_id,
                            self.event_count, self.flags)


def decode_header(data, offset: int = 0) -> ObjectHeader:
    if len(data) - offset < HEADER_SIZE:
        raise FormatError(f"offset {offset}: truncated object header")
    g, s, o, n, flags = _HEADER.unpack_from(data, offset)
    if flags & ~FLAG_CHAINED:
        raise FormatError(f"offset {offset + 22}: reserved flag bits set")
    return ObjectHeader(g, s, o, n, flags)


class ChainContext:
    """Per (group, subgroup) chain state: last object id and last timestamp.

    State is keyed by group, so the first object of every subgroup in a new
    group starts from a fresh context.  Groups more than ``keep_groups`` behind
    the newest one seen are forgotten.
    """

    keep_groups = 4

    def __init__(self):
        self._state: dict[tuple[int, int], tuple[int, int]] = {}
        self._group = -1

    def _enter(self, group_id: int) -> None:
        if group_id > self._group:
            self._group = group_id
            floor = group_id - self.keep_groups
            self._state = {k: v for k, v in self._state.items() if k[0] > floor}

    def get(self, group_id: int, subgroup_id: int):
        return self._state.get((group_id, subgroup_id))

    def update(self, group_id: int, subgroup_id: int, object_id: int, last_t: int) -> None:
        self._enter(group_id)
        self._state[(group_id, subgroup_id)] = (object_id, last_t)

    def __len__(self):
        return len(self._state)


def _put_varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _get_varint(data, offset: int) -> tuple[int, int]:
    value = shift = 0
    for i in range(10):
        if offset + i >= len(data):
            raise FormatError(f"offset {offset}: truncated varint")
        b = data[offset + i]
        value |= (b & 0x7F) << shift
        shift += 7
        if not b & 0x80:
            return value, offset + i + 1
    raise FormatError(f"offset {offset}: varint too long")


def _as_array(events) -> np.ndarray:
    if isinstance(events, np.ndarray):
        return np.ascontiguousarray(events, dtype=EVENT_DTYPE)
    return to_array(events)


def encode_object(header: ObjectHeader, events, mode: str = "plain",
                  ctx: ChainContext | None = None) -> bytes:
    """Serialize one object. In chained mode ``ctx`` is advanced."""
    ev = _as_array(events)
    if header.event_count != len(ev):
        header = ObjectHeader(header.group_id, header.subgroup_id, header.object_id,
                              len(ev), header.flags)
    if mode == "plain":
        header = ObjectHeader(header.group_id, header.subgroup_id, header.object_id,
                              len(ev), header.flags & ~FLAG_CHAINED)
        return header.encode() + pack_events(ev)
    if mode != "chained":
        raise ValueError(f"unknown payload mode {mode!r}")
    if ctx is None:
        raise ValueError("chained mode needs a ChainContext")
    g, s, o = header.group_id, header.subgroup_id, header.object_id
    header = ObjectHeader(g, s, o, len(ev), header.flags | FLAG_CHAINED)
    prev = ctx.get(g, s)
    if prev is None:
        gap, prev_t = 0, -1
    else:
        if o <= prev[0]:
            raise ValueError(f"object id {o} not above predecessor {prev[0]}")
        gap, prev_t = o - prev[0], prev[1]
    body = kernels.encode_chained(ev, prev_t)
    last_t = int(ev["t"][-1]) if len(ev) else prev_t
    ctx.update(g, s, o, last_t)
    return header.encode() + _put_varint(gap) + body


def decode_object(data, ctx: ChainContext | None = None):
    """Parse one object; returns ``(header, events)``.

    Raises :class:`DependencyError` when a chained object's predecessor was
    not decoded into ``ctx``; the context is left untouched in that case.
    """
    header = decode_header(data)
    n = header.event_count
    if not header.chained:
        need = HEADER_SIZE + EVENT_SIZE * n
        if len(data) != need:
            raise FormatError(f"plain object is {len(data)} bytes, expected {need}")
        return header, unpack_events(data, HEADER_SIZE, n)
    if ctx is None:
        raise ValueError("chained object needs a ChainContext")
    gap, pos = _get_varint(data, HEADER_SIZE)
    g, s, o = header.group_id, header.subgroup_id, header.object_id
    prev = ctx.get(g, s)
    if gap == 0:
        if prev is not None:
            raise DependencyError(f"object {(g, s, o)} restarts a chain already in progress")
        prev_t = -1
    else:
        if prev is None or prev[0] != o - gap:
            raise DependencyError(
                f"object {(g, s, o)} depends on object {o - gap}, which was not decoded"
            )
        prev_t = prev[1]
    ev, end = kernels.decode_chained(data, pos, n, prev_t)
    if end != len(data):
        raise FormatError(f"offset {end}: {len(data) - end} trailing bytes")
    ctx.update(g, s, o, int(ev["t"][-1]) if n else prev_t)
    return header, ev


class ControlKind(enum.IntEnum):
    SUBSCRIBE = 1
    UNSUBSCRIBE = 2
    UPDATE_TIMEOUT = 3
    SUBSCRIBE_TRACKS = 4


_TIMEOUT_KINDS = (ControlKind.SUBSCRIBE, ControlKind.UPDATE_TIMEOUT)


@dataclass(frozen=True)
class ControlMessage:
    kind: ControlKind
    subscriber_id: int
    delivery_timeout: int | None = None  # microseconds, None = infinite
    track_set: frozenset[int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ControlKind(self.kind))
        if self.kind in _TIMEOUT_KINDS:
            if self.delivery_timeout is not None and not 0 < self.delivery_timeout < INFINITE:
                raise ValueError("delivery timeout must be > 0 or infinite")
        elif self.track_set is not None:
            ts = frozenset(self.track_set)
            if any(not 0 <= i < 64 for i in ts):
                raise ValueError("track ids must be in 0..63")
            object.__setattr__(self, "track_set", ts)


def track_mask(tracks) -> int:
    mask = 0
    for i in tracks:
        mask |= 1 << i
    return mask


def mask_tracks(mask: int) -> frozenset[int]:
    return frozenset(i for i in range(64) if mask >> i & 1)


def encode_control(msg: ControlMessage) -> bytes:
    if msg.kind in _TIMEOUT_KINDS:
        payload = INFINITE if msg.delivery_timeout is None else msg.delivery_timeout
    else:
        payload = track_mask(msg.track_set or ())
    return _CONTROL.pack(int(msg.kind), msg.subscriber_id, payload)


def decode_control(data: bytes) -> ControlMessage:
    if len(data) != CONTROL_SIZE:
        raise FormatError(f"control message must be {CONTROL_SIZE} bytes, got {len(data)}")
    kind, sub, payload = _CONTROL.unpack(data)
    try:
        kind = ControlKind(kind)
    except ValueError:
        raise FormatError(f"unknown control kind 0x{kind:02X}") from None
    if kind in _TIMEOUT_KINDS:
        if payload == 0:
            raise FormatError("delivery timeout of 0")
        return ControlMessage(kind, sub, None if payload == INFINITE else payload)
    return ControlMessage(kind, sub, track_set=mask_tracks(payload))
