"""Event types, synthetic sources, file ingestion and random dropping.

Event streams are carried as numpy structured arrays with dtype
:data:`EVENT_DTYPE` (fields ``t``, ``x``, ``y``, ``p``).  A single sample is
an :class:`Event`; :func:`to_array` and :func:`to_list` convert between them.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
COORD_LIMIT = 1 << 15
T_LIMIT = 1 << 32

# length of one generation slot; block size bounds buffered memory
SLOT_US = 1_000
BLOCK_US = 1_000_000

SOURCE_KINDS = ("constant-poisson", "bursty", "file")


class ParseError(ValueError):
    """A file record could not be parsed under the declared format."""


class ValidationError(ValueError):
    """An event violates the event invariants or the sensor geometry."""


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class SensorGeometry:
    width: int = 1280
    height: int = 720

    def __post_init__(self):
        if not (0 < self.width <= COORD_LIMIT and 0 < self.height <= COORD_LIMIT):
            raise ValidationError(
                f"geometry {self.width}x{self.height} outside 1..{COORD_LIMIT}"
            )


@dataclass(frozen=True)
class SourceModel:
    kind: str = "constant-poisson"
    rate: float = 100_000.0
    burst_profile: tuple[tuple[int, int, float], ...] = ()
    seed: int = 0
    geometry: SensorGeometry = field(default_factory=SensorGeometry)
    path: str | None = None
    file_format: str = "csv"

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.rate < 0:
            raise ValueError("rate must be >= 0")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must fit in 64 bits")
        prev_end = None
        for start, end, mult in self.burst_profile:
            if end <= start or mult < 0:
                raise ValueError(f"bad burst interval {(start, end, mult)}")
            if prev_end is not None and start < prev_end:
                raise ValueError("burst intervals must be sorted and non-overlapping")
            prev_end = end
        if self.kind == "file" and not self.path:
            raise ValueError("file source needs a path")
        object.__setattr__(self, "burst_profile", tuple(tuple(b) for b in self.burst_profile))


def empty() -> np.ndarray:
    return np.empty(0, dtype=EVENT_DTYPE)


def to_array(events: Iterable[Event]) -> np.ndarray:
    rows = [(e.t, e.x, e.y, e.p) for e in events]
    return np.array(rows, dtype=EVENT_DTYPE) if rows else empty()


def to_list(arr: np.ndarray) -> list[Event]:
    return [Event(int(x), int(y), int(t), int(p)) for t, x, y, p in arr.tolist()]


def validate(arr: np.ndarray, geometry: SensorGeometry | None = None) -> None:
    """Raise :class:`ValidationError` naming the first offending record."""
    if len(arr) == 0:
        return
    w = geometry.width if geometry else COORD_LIMIT
    h = geometry.height if geometry else COORD_LIMIT
    bad = np.flatnonzero((arr["x"] >= w) | (arr["y"] >= h) | (arr["p"] > 1))
    if len(bad):
        i = int(bad[0])
        raise ValidationError(f"record {i}: event {tuple(arr[i].tolist())} out of range")
    unsorted = np.flatnonzero(np.diff(arr["t"].astype(np.int64)) < 0)
    if len(unsorted):
        i = int(unsorted[0]) + 1
        raise ValidationError(f"record {i}: timestamp decreases")


def _t_key(end: int):
    # a python int would make searchsorted upcast the whole uint32 column
    if end >= T_LIMIT:
        return np.uint64(end)
    return np.uint32(max(end, 0))


class EventSource:
    """Incremental view of a :class:`SourceModel`.

    ``take(end)`` returns every event with ``t < end`` not yet returned.  The
    stream is identical no matter how it is sliced: randomness is drawn
    element-wise from independent per-field generators in time order, and slot
    counts are drawn per fixed one-second block.
    """

    def __init__(self, model: SourceModel):
        self.model = model
        self._pos = 0
        if model.kind == "file":
            self._file = load_events(model.path, model.file_format, model.geometry)
            return
        self._file = None
        seq = np.random.SeedSequence(model.seed)
        self._rng_n, self._rng_t, self._rng_x, self._rng_y, self._rng_p = (
            np.random.Generator(np.random.PCG64(s)) for s in seq.spawn(5)
        )
        self._block = -1
        self._buf = empty()
        self._buf_t = self._buf["t"]
        self._bpos = 0

    def _segments(self, lo: int, hi: int):
        cuts = set(range(lo, hi, SLOT_US))
        if self.model.kind == "bursty":
            for start, end, _ in self.model.burst_profile:
                for c in (start, end):
                    if lo < c < hi:
                        cuts.add(int(c))
        starts = np.array(sorted(cuts), dtype=np.int64)
        ends = np.append(starts[1:], hi)
        mults = np.ones(len(starts))
        if self.model.kind == "bursty":
            for start, end, mult in self.model.burst_profile:
                mults[(starts >= start) & (starts < end)] *= mult
        return starts, (ends - starts), mults

    def _fill_block(self, block: int) -> np.ndarray:
        lo, hi = block * BLOCK_US, (block + 1) * BLOCK_US
        starts, lens, mults = self._segments(lo, hi)
        lam = self.model.rate * mults * lens / 1e6
        counts = self._rng_n.poisson(lam)
        n = int(counts.sum())
        out = np.empty(n, dtype=EVENT_DTYPE)
        if n:
            base = np.repeat(starts, counts)
            span = np.repeat(lens, counts)
            # truncating casts of non-negative values equal floor()
            off = self._rng_t.random(n)
            off *= span
            t = base + off.astype(np.int64)
            t.sort()
            if t[-1] >= T_LIMIT:
                raise ValidationError("timestamps exceed the 32-bit range")
            g = self.model.geometry
            out["t"] = t
            for name, rng, size in (("x", self._rng_x, g.width), ("y", self._rng_y, g.height)):
                u = rng.random(n)
                u *= size
                out[name] = u.astype(np.uint16)
            out["p"] = self._rng_p.random(n) < 0.5
        return out

    def take(self, end: int) -> np.ndarray:
        if self._file is not None:
            arr = self._file
            stop = int(np.searchsorted(arr["t"], _t_key(end), side="left"))
            stop = max(stop, self._pos)
            chunk = arr[self._pos:stop]
            self._pos = stop
            return chunk
        parts = []
        while True:
            buf, t = self._buf, self._buf_t
            if self._bpos < len(buf):
                stop = int(np.searchsorted(t, _t_key(end), side="left"))
                stop = max(stop, self._bpos)
                parts.append(buf[self._bpos:stop])
                self._bpos = stop
                if stop < len(buf):
                    break
            if (self._block + 1) * BLOCK_US >= end:
                break
            self._block += 1
            self._buf = self._fill_block(self._block)
            self._buf_t = np.ascontiguousarray(self._buf["t"])
            self._bpos = 0
        if not parts:
            return empty()
        return parts[0] if len(parts) == 1 else np.concatenate(parts)


def generate(model: SourceModel, duration: int) -> np.ndarray:
    """All events of ``model`` with ``t < duration`` (microseconds)."""
    if duration < 0:
        raise ValueError("duration must be >= 0")
    if model.kind != "file" and model.rate == 0:
        return empty()
    return EventSource(model).take(duration)


def load_events(path: str | os.PathLike, format: str = "csv",
                geometry: SensorGeometry | None = None) -> np.ndarray:
    """Read a CSV (``t,x,y,p`` rows, header optional) or packed binary file."""
    geometry = geometry or SensorGeometry(COORD_LIMIT, COORD_LIMIT)
    if format == "csv":
        with open(path, newline="") as fh:
            arr = parse_csv(fh)
    elif format in ("bin", "packed-binary"):
        from evstream import wire
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) % wire.EVENT_SIZE:
            raise ParseError(
                f"offset {len(data) - len(data) % wire.EVENT_SIZE}: truncated record"
            )
        try:
            arr = wire.unpack_events(data)
        except wire.FormatError as exc:
            raise ParseError(str(exc)) from exc
    else:
        raise ValueError(f"unknown event file format {format!r}")
    validate(arr, geometry)
    return arr


def parse_csv(fh: io.TextIOBase) -> np.ndarray:
    rows = []
    for lineno, row in enumerate(csv.reader(fh), start=1):
        if not row or not "".join(row).strip():
            continue
        if lineno == 1 and row[0].strip().lower() == "t":
            continue
        if len(row) != 4:
            raise ParseError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            t, x, y, p = (int(v) for v in row)
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer field in {row!r}") from None
        if not (0 <= t < T_LIMIT):
            raise ValidationError(f"line {lineno}: timestamp {t} outside 32-bit range")
        if not (0 <= x < COORD_LIMIT and 0 <= y < COORD_LIMIT):
            raise ValidationError(f"line {lineno}: coordinate ({x}, {y}) out of range")
        if p not in (0, 1):
            raise ValidationError(f"line {lineno}: polarity {p} not in {{0, 1}}")
        rows.append((t, x, y, p))
    return np.array(rows, dtype=EVENT_DTYPE) if rows else empty()


def write_csv(arr: np.ndarray, fh: io.TextIOBase) -> None:
    fh.write("t,x,y,p\n")
    if len(arr):
        cols = np.column_stack([arr["t"], arr["x"], arr["y"], arr["p"]]).astype(np.int64)
        np.savetxt(fh, cols, fmt="%d", delimiter=",")


def random_drop(events: np.ndarray | Sequence[Event], keep_probability: float,
                seed: int = 0):
    """Keep each event independently with probability ``keep_probability``."""
    if not 0.0 <= keep_probability <= 1.0:
        raise ValueError(f"keep_probability {keep_probability} outside [0, 1]")
    as_list = not isinstance(events, np.ndarray)
    arr = to_array(events) if as_list else events
    rng = np.random.default_rng(seed)
    kept = arr[rng.random(len(arr)) < keep_probability]
    return to_list(kept) if as_list else kept
