"""Independent reference computations used to freeze expected values.

Nothing here imports the package; each function re-derives a result from
first principles so tests compare two separate routes.
"""
from __future__ import annotations

import math


def pack_event_bytes(t: int, x: int, y: int, p: int) -> bytes:
    return (t.to_bytes(4, "little") + x.to_bytes(2, "little")
            + (y + p * 32768).to_bytes(2, "little"))


def leb128(n: int) -> bytes:
    out = []
    while True:
        low = n % 128
        n //= 128
        out.append(low + 128 if n else low)
        if not n:
            return bytes(out)


def header_bytes(g: int, s: int, o: int, n: int, flags: int) -> bytes:
    return (g.to_bytes(8, "little") + s.to_bytes(2, "little") + o.to_bytes(8, "little")
            + n.to_bytes(4, "little") + bytes([flags]))


def chained_object(g, s, o, events, gap, prev_t):
    """Chained payload for ``events`` (list of (t, x, y, p)); ``prev_t=None`` = fresh."""
    body = bytearray(header_bytes(g, s, o, len(events), 1))
    body += leb128(gap)
    last = prev_t
    for t, x, y, p in events:
        if last is None:
            body += t.to_bytes(4, "little")
        else:
            body += leb128(t - last)
        body += x.to_bytes(2, "little") + (y + p * 32768).to_bytes(2, "little")
        last = t
    return bytes(body)


def tx_us(size: int, bits_per_s: int) -> int:
    """Serialization time on a constant link, rounded up to whole microseconds."""
    return -(-size * 8 * 1_000_000 // bits_per_s)


def tandem_fifo_latencies(emits, sizes, ingress_bps, egress_bps, ingress_prop=0, egress_prop=0):
    """Arrival minus emission for objects crossing two FIFO links in order."""
    out = []
    in_free = eg_free = 0
    for emit, size in zip(emits, sizes):
        start = max(emit, in_free)
        in_free = start + (0 if ingress_bps is None else tx_us(size, ingress_bps))
        receipt = in_free + ingress_prop
        start = max(receipt, eg_free)
        eg_free = start + tx_us(size, egress_bps)
        out.append(eg_free + egress_prop - emit)
    return out


def poisson_halfwidth(mean: float, sigmas: float = 3.0) -> float:
    return sigmas * math.sqrt(mean)


def binomial_halfwidth(n: int, p: float, sigmas: float = 3.0) -> float:
    return sigmas * math.sqrt(n * p * (1 - p))


def nearest_rank(values, pct):
    v = sorted(values)
    k = math.ceil(pct * len(v) / 100)
    return v[max(k, 1) - 1]
