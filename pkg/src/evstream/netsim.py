"""Discrete-event simulation core with integer microsecond time.

A :class:`Simulator` runs scheduled callbacks in ``(time, insertion order)``
sequence.  A :class:`Link` serializes payloads FIFO over a
:class:`LinkTrace` of piecewise-constant bandwidth plus a fixed propagation
delay.
"""
from __future__ import annotations

import bisect
import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Callable, Sequence

US_PER_S = 1_000_000


class SchedulingError(RuntimeError):
    """An action was scheduled before the current simulated time."""


@dataclass(frozen=True)
class LinkTrace:
    """Bandwidth segments ``(start_us, bits_per_s)``; ``None`` bandwidth is ideal.

    The first segment must start at 0 and the last one is open-ended.
    """

    segments: tuple[tuple[int, int | None], ...] = ((0, None),)
    propagation_delay: int = 0
    _starts: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        segs = tuple((int(s), None if b is None else int(b)) for s, b in self.segments)
        if not segs or segs[0][0] != 0:
            raise ValueError("link trace must start at t=0")
        if any(b[0] >= a[0] for b, a in zip(segs, segs[1:])):
            raise ValueError("link trace segments must be strictly increasing in start time")
        if any(b is not None and b <= 0 for _, b in segs):
            raise ValueError("bandwidth must be > 0")
        if self.propagation_delay < 0:
            raise ValueError("propagation delay must be >= 0")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "_starts", tuple(s for s, _ in segs))

    @classmethod
    def constant(cls, bits_per_s: int | None, propagation_delay: int = 0) -> "LinkTrace":
        return cls(((0, bits_per_s),), propagation_delay)

    @classmethod
    def from_mbps(cls, pairs: Sequence[tuple[float, float]], propagation_delay_ms: float = 0):
        """Build from ``(time_ms, Mbps)`` pairs as written in scenario files."""
        segs = [(round(ms * 1000), round(mbps * 1e6)) for ms, mbps in pairs]
        return cls(tuple(segs), round(propagation_delay_ms * 1000))

    @classmethod
    def sawtooth(cls, mean_bps: float, amplitude: float, period_us: int, step_us: int,
                 duration_us: int, propagation_delay: int = 0) -> "LinkTrace":
        """Linear ramps from ``mean*(1-a)`` to ``mean*(1+a)`` repeated every period."""
        steps = max(1, period_us // step_us)
        segs = []
        for start in range(0, duration_us, step_us):
            phase = (start % period_us) // step_us
            frac = phase / (steps - 1) if steps > 1 else 0.5
            segs.append((start, round(mean_bps * (1 - amplitude + 2 * amplitude * frac))))
        return cls(tuple(segs) or ((0, round(mean_bps)),), propagation_delay)

    @property
    def ideal(self) -> bool:
        return all(b is None for _, b in self.segments)

    def bandwidth_at(self, t: int) -> int | None:
        return self.segments[bisect.bisect_right(self._starts, t) - 1][1]

    def mean_bandwidth(self, start: int, end: int) -> float | None:
        """Time-averaged bandwidth over ``[start, end)``; ``None`` if any part is ideal."""
        if end <= start:
            return self.bandwidth_at(start)
        total = 0
        i = bisect.bisect_right(self._starts, start) - 1
        t = start
        while t < end:
            seg_end = self._starts[i + 1] if i + 1 < len(self._starts) else end
            stop = min(seg_end, end)
            bw = self.segments[i][1]
            if bw is None:
                return None
            total += bw * (stop - t)
            t = stop
            i += 1
        return total / (end - start)


def transmit_duration(size: int, trace: LinkTrace, start: int) -> int:
    """Microseconds from ``start`` until the last bit of ``size`` bytes is sent.

    Integrates the piecewise-constant bandwidth exactly (integer bit-microsecond
    arithmetic) and rounds the final partial microsecond up.
    """
    if size < 0:
        raise ValueError("size must be >= 0")
    if size == 0:
        return 0
    need = size * 8 * US_PER_S  # bits * us/s
    starts = trace._starts
    i = bisect.bisect_right(starts, start) - 1
    t = start
    while True:
        bw = trace.segments[i][1]
        if bw is None:
            return t - start
        if i + 1 < len(starts):
            span = starts[i + 1] - t
            cap = bw * span
            if cap < need:
                need -= cap
                t = starts[i + 1]
                i += 1
                continue
        return t + -(-need // bw) - start


class Link:
    """FIFO serializer: one payload on the wire at a time."""

    def __init__(self, trace: LinkTrace):
        self.trace = trace
        self.busy_until = 0
        self.bytes_sent = 0

    def idle(self, now: int) -> bool:
        return self.busy_until <= now

    def send(self, size: int, now: int) -> tuple[int, int, int]:
        """Queue ``size`` bytes at ``now``; returns ``(start, done, arrival)``."""
        start = max(now, self.busy_until)
        done = start + transmit_duration(size, self.trace, start)
        self.busy_until = done
        self.bytes_sent += size
        return start, done, done + self.trace.propagation_delay


class Simulator:
    """Deterministic event loop.

    ``trace=True`` folds every executed action (time, sequence number, name)
    into a BLAKE2 digest exposed as :attr:`trace_digest`.
    """

    def __init__(self, trace: bool = False):
        self.now = 0
        self._queue: list = []
        self._seq = 0
        self.executed = 0
        self._hash = hashlib.blake2b(digest_size=16) if trace else None

    def schedule(self, at: int, action: Callable, *args) -> None:
        if at < self.now:
            raise SchedulingError(f"cannot schedule at {at} before now={self.now}")
        heapq.heappush(self._queue, (at, self._seq, action, args))
        self._seq += 1

    def pending(self) -> int:
        return len(self._queue)

    def next_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def run_until(self, t: int) -> None:
        """Execute every action scheduled at or before ``t``; the clock ends at ``t``."""
        q = self._queue
        h = self._hash
        while q and q[0][0] <= t:
            at, seq, action, args = heapq.heappop(q)
            self.now = at
            if h is not None:
                h.update(f"{at}:{seq}:{getattr(action, '__qualname__', action)};".encode())
            action(*args)
            self.executed += 1
        if t > self.now:
            self.now = t

    @property
    def trace_digest(self) -> str | None:
        return self._hash.hexdigest() if self._hash is not None else None
