"""Scalable event-camera streaming over a MoQ-style publish/relay/subscribe path."""
from evstream.events import Event, EventSource, SensorGeometry, SourceModel, generate, load_events, random_drop
from evstream.kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Event", "EventSource", "SensorGeometry", "SourceModel",
    "generate", "load_events", "random_drop",
]
