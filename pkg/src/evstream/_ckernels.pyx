# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled codec kernels; byte-for-byte equivalent to ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint16_t, uint32_t, int64_t, uint64_t
from libc.string cimport memcpy

from evstream.errors import FormatError

cnp.import_array()

EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])

BACKEND = "cython"

DEF MAX_VARINT = 5

cdef packed struct event_t:
    uint32_t t
    uint16_t x
    uint16_t y
    uint8_t p


cdef inline void put16(uint8_t* o, uint16_t v) noexcept nogil:
    o[0] = v & 0xFF
    o[1] = v >> 8


cdef inline void put32(uint8_t* o, uint32_t v) noexcept nogil:
    o[0] = v & 0xFF
    o[1] = (v >> 8) & 0xFF
    o[2] = (v >> 16) & 0xFF
    o[3] = v >> 24


cdef inline uint16_t get16(const uint8_t* b) noexcept nogil:
    return b[0] | (<uint16_t>b[1] << 8)


cdef inline uint32_t get32(const uint8_t* b) noexcept nogil:
    return b[0] | (<uint32_t>b[1] << 8) | (<uint32_t>b[2] << 16) | (<uint32_t>b[3] << 24)


def pack_events(event_t[::1] ev):
    cdef Py_ssize_t n = ev.shape[0], i
    out = bytearray(8 * n)
    cdef uint8_t[::1] o = out
    for i in range(n):
        put32(&o[8 * i], ev[i].t)
        put16(&o[8 * i + 4], ev[i].x)
        put16(&o[8 * i + 6], ev[i].y | (<uint16_t>ev[i].p << 15))
    return bytes(out)


def unpack_events(buf, Py_ssize_t offset=0, count=None):
    cdef const uint8_t[::1] b = buf
    cdef Py_ssize_t avail = (b.shape[0] - offset) // 8
    cdef Py_ssize_t n, i
    if count is None:
        n = avail
    else:
        n = count
        if n > avail:
            raise FormatError(
                f"offset {offset}: need {8 * n} bytes, have {b.shape[0] - offset}")
    arr = np.empty(n, dtype=EVENT_DTYPE)
    cdef event_t[::1] ev = arr
    cdef const uint8_t* r
    cdef uint16_t x, yp
    for i in range(n):
        r = &b[offset + 8 * i]
        x = get16(r + 4)
        if x & 0x8000:
            raise FormatError(f"offset {offset + 8 * i}: x has bit 15 set")
        yp = get16(r + 6)
        ev[i].t = get32(r)
        ev[i].x = x
        ev[i].y = yp & 0x7FFF
        ev[i].p = yp >> 15
    return arr


def encode_chained(event_t[::1] ev, int64_t prev_t):
    cdef Py_ssize_t n = ev.shape[0], i, pos = 0
    cdef uint64_t d
    cdef int64_t prev = prev_t
    if n == 0:
        return b""
    out = bytearray(n * (MAX_VARINT + 4))
    cdef uint8_t[::1] o = out
    for i in range(n):
        if prev < 0:
            put32(&o[pos], ev[i].t)
            pos += 4
        else:
            if ev[i].t < prev:
                raise ValueError("events must be sorted by timestamp")
            d = ev[i].t - prev
            while d >= 0x80:
                o[pos] = (d & 0x7F) | 0x80
                d >>= 7
                pos += 1
            o[pos] = d
            pos += 1
        put16(&o[pos], ev[i].x)
        put16(&o[pos + 2], ev[i].y | (<uint16_t>ev[i].p << 15))
        pos += 4
        prev = ev[i].t
    return bytes(out[:pos])


def decode_chained(buf, Py_ssize_t offset, Py_ssize_t count, int64_t prev_t):
    """Decode ``count`` chained records; returns ``(events, end_offset)``."""
    cdef const uint8_t[::1] b = buf
    cdef Py_ssize_t m = b.shape[0], p = offset, i, k
    cdef uint64_t d, t
    cdef uint8_t byte
    cdef uint16_t x, yp
    cdef int64_t prev = prev_t
    arr = np.empty(count, dtype=EVENT_DTYPE)
    cdef event_t[::1] ev = arr
    for i in range(count):
        if prev < 0:
            if p + 8 > m:
                raise FormatError(f"offset {p}: truncated chained record")
            t = get32(&b[p])
            p += 4
        else:
            d = 0
            k = 0
            while True:
                if p >= m:
                    raise FormatError(f"offset {p}: truncated chained record")
                if k >= MAX_VARINT:
                    raise FormatError(f"offset {p}: bad or truncated varint")
                byte = b[p]
                d |= <uint64_t>(byte & 0x7F) << (7 * k)
                p += 1
                k += 1
                if not (byte & 0x80):
                    break
            t = <uint64_t>prev + d
            if t >= (<uint64_t>1 << 32):
                raise FormatError(f"offset {offset}: timestamp overflows 32 bits")
            if p + 4 > m:
                raise FormatError(f"offset {m}: truncated chained record")
        x = get16(&b[p])
        if x & 0x8000:
            raise FormatError(f"offset {p}: x has bit 15 set")
        yp = get16(&b[p + 2])
        p += 4
        ev[i].t = <uint32_t>t
        ev[i].x = x
        ev[i].y = yp & 0x7FFF
        ev[i].p = yp >> 15
        prev = t
    return arr, p
