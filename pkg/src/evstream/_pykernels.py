"""numpy implementations of the codec kernels.

Used when the compiled ``_ckernels`` extension is unavailable.  Both backends
expose the same four functions and must produce identical bytes.
"""
import numpy as np

from evstream.errors import FormatError

EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
WIRE_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("yp", "<u2")])
MAX_VARINT = 5

BACKEND = "python"


def pack_events(ev):
    out = np.empty(len(ev), dtype=WIRE_DTYPE)
    out["t"] = ev["t"]
    out["x"] = ev["x"]
    out["yp"] = ev["y"] | (ev["p"].astype(np.uint16) << 15)
    return out.tobytes()


def _split(wire_arr, offset):
    bad = np.flatnonzero(wire_arr["x"] & 0x8000)
    if len(bad):
        raise FormatError(f"offset {offset + 8 * int(bad[0])}: x has bit 15 set")
    ev = np.empty(len(wire_arr), dtype=EVENT_DTYPE)
    ev["t"] = wire_arr["t"]
    ev["x"] = wire_arr["x"]
    ev["y"] = wire_arr["yp"] & 0x7FFF
    ev["p"] = wire_arr["yp"] >> 15
    return ev


def unpack_events(buf, offset=0, count=None):
    avail = (len(buf) - offset) // 8
    if count is None:
        count = avail
    elif count > avail:
        raise FormatError(f"offset {offset}: need {8 * count} bytes, have {len(buf) - offset}")
    return _split(np.frombuffer(buf, dtype=WIRE_DTYPE, count=count, offset=offset), offset)


def _varint_lengths(d):
    nb = np.ones(len(d), dtype=np.int64)
    for k in range(1, MAX_VARINT):
        nb += d >= (1 << (7 * k))
    return nb


def encode_chained(ev, prev_t):
    n = len(ev)
    if n == 0:
        return b""
    t = ev["t"].astype(np.int64)
    prev = np.empty(n, dtype=np.int64)
    prev[0] = prev_t if prev_t >= 0 else t[0]
    prev[1:] = t[:-1]
    d = t - prev
    if (d < 0).any():
        raise ValueError("events must be sorted by timestamp")
    nb = _varint_lengths(d)
    absolute = prev_t < 0
    if absolute:
        nb[0] = 4
    pos = np.zeros(n, dtype=np.int64)
    np.cumsum(nb[:-1] + 4, out=pos[1:])
    out = np.zeros(int(pos[-1] + nb[-1] + 4), dtype=np.uint8)
    vi = np.arange(1 if absolute else 0, n)
    for k in range(MAX_VARINT):
        sel = vi[nb[vi] > k]
        if not len(sel):
            break
        byte = (d[sel] >> (7 * k)) & 0x7F
        byte |= np.where(nb[sel] > k + 1, 0x80, 0)
        out[pos[sel] + k] = byte
    if absolute:
        out[0:4] = np.frombuffer(int(t[0]).to_bytes(4, "little"), dtype=np.uint8)
    cpos = pos + nb
    x = ev["x"].astype(np.int64)
    yp = ev["y"].astype(np.int64) | (ev["p"].astype(np.int64) << 15)
    out[cpos] = x & 0xFF
    out[cpos + 1] = x >> 8
    out[cpos + 2] = yp & 0xFF
    out[cpos + 3] = yp >> 8
    return out.tobytes()


def decode_chained(buf, offset, count, prev_t):
    """Decode ``count`` chained records starting at ``offset``.

    Returns ``(events, end_offset)``.
    """
    raw = np.frombuffer(buf, dtype=np.uint8)[offset:]
    m = len(raw)
    if count == 0:
        return np.empty(0, dtype=EVENT_DTYPE), offset
    starts = np.empty(count, dtype=np.int64)
    lens = np.empty(count, dtype=np.int64)
    p = 0
    first = 0
    if prev_t < 0:
        if m < 8:
            raise FormatError(f"offset {offset}: truncated chained record")
        starts[0], lens[0] = 0, 4
        p, first = 8, 1
    cont = np.ones(m + MAX_VARINT, dtype=bool)
    cont[:m] = (raw & 0x80) != 0
    vlen = np.full(m, MAX_VARINT + 1, dtype=np.int64)
    for k in range(MAX_VARINT - 1, -1, -1):
        vlen[~cont[k:k + m]] = k + 1
    vl = vlen.tolist()
    for i in range(first, count):
        if p >= m:
            raise FormatError(f"offset {offset + p}: truncated chained record")
        n = vl[p]
        if n > MAX_VARINT:
            raise FormatError(f"offset {offset + p}: bad or truncated varint")
        starts[i] = p
        lens[i] = n
        p += n + 4
        if p > m:
            raise FormatError(f"offset {offset + m}: truncated chained record")
    r = raw.astype(np.int64)
    d = np.zeros(count, dtype=np.int64)
    vs, vls = starts[first:], lens[first:]
    for k in range(MAX_VARINT):
        sel = vls > k
        if not sel.any():
            break
        d[first:][sel] |= (r[vs[sel] + k] & 0x7F) << (7 * k)
    if first:
        t = np.cumsum(d)
        t += int.from_bytes(bytes(raw[0:4]), "little")
    else:
        t = np.cumsum(d) + prev_t
    if t[-1] >= 1 << 32:
        raise FormatError(f"offset {offset}: timestamp overflows 32 bits")
    cpos = starts + lens
    x = r[cpos] | (r[cpos + 1] << 8)
    yp = r[cpos + 2] | (r[cpos + 3] << 8)
    if (x & 0x8000).any():
        i = int(np.flatnonzero(x & 0x8000)[0])
        raise FormatError(f"offset {offset + int(cpos[i])}: x has bit 15 set")
    ev = np.empty(count, dtype=EVENT_DTYPE)
    ev["t"] = t
    ev["x"] = x
    ev["y"] = yp & 0x7FFF
    ev["p"] = yp >> 15
    return ev, offset + p
