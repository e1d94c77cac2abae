"""Codec kernel backend selected at import.

The compiled ``_ckernels`` extension is preferred.  Set ``EVSTREAM_PURE=1``
to force the numpy fallback (also used automatically when the extension was
not built).
"""
import os

from evstream import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("EVSTREAM_PURE"):
    try:
        from evstream import _ckernels as compiled_backend
    except ImportError:  # pragma: no cover - depends on build
        compiled_backend = None

_active = compiled_backend or python_backend

BACKEND = _active.BACKEND
pack_events = _active.pack_events
unpack_events = _active.unpack_events
encode_chained = _active.encode_chained
decode_chained = _active.decode_chained
