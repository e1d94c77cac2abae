"""Rate calculators, run aggregation and report export."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

CSV_COLUMNS = (
    "scenario_id", "subscriber_id", "mode", "bandwidth_mbps",
    "delivered_event_fraction", "mean_obj_latency_us", "p95_obj_latency_us",
    "control_msgs", "max_skew_us",
)


class AggregationError(ValueError):
    """The run log is missing a stream required for aggregation."""


def framed_rate(width: int, height: int, bit_depth: int, fps: float) -> float:
    """Raw bit rate of an uncompressed framed camera."""
    if min(width, height, bit_depth, fps) < 0:
        raise ValueError("arguments must be >= 0")
    return width * height * bit_depth * fps


def event_raw_rate(events_per_second: float, bytes_per_event: float) -> float:
    """Raw bit rate of an event stream."""
    if events_per_second < 0 or bytes_per_event < 0:
        raise ValueError("arguments must be >= 0")
    return events_per_second * bytes_per_event * 8


def nearest_rank(sorted_values, pct: float):
    """Nearest-rank percentile of an already sorted sequence."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("no samples")
    rank = max(1, math.ceil(pct / 100 * n))
    return sorted_values[rank - 1]


@dataclass
class LatencyStats:
    count: int
    mean: float
    p50: int
    p95: int
    p99: int
    max: int

    @classmethod
    def of(cls, values) -> "LatencyStats | None":
        arr = np.asarray(values, dtype=np.int64)
        n = len(arr)
        if n == 0:
            return None
        ranks = [max(1, math.ceil(p / 100 * n)) - 1 for p in (50, 95, 99)]
        part = np.partition(arr, ranks + [n - 1])
        mean = float(arr.sum()) / n
        return cls(n, mean, int(part[ranks[0]]), int(part[ranks[1]]),
                   int(part[ranks[2]]), int(part[n - 1]))


@dataclass
class ClassFraction:
    id: int
    published: int
    delivered: int
    fraction: float


@dataclass
class SecondFraction:
    second: int
    source_events: int
    decoded_events: int


@dataclass
class SubscriberReport:
    subscriber_id: int
    mode: str
    bandwidth_mbps: float | None
    published_objects: int
    delivered_objects: int
    expired_objects: int
    unsubscribed_objects: int
    in_flight_objects: int
    decoded_objects: int
    discarded_objects: int
    corrupt_objects: int
    source_events: int
    published_events: int
    delivered_events: int
    decoded_events: int
    delivered_event_fraction: float
    object_latency: LatencyStats | None
    event_latency: LatencyStats | None
    control_msgs: int
    per_subgroup: list[ClassFraction]
    per_track: list[ClassFraction]
    skew_series_us: list[list[int]]
    max_skew_us: int | None
    bytes_on_wire: int
    per_second: list[SecondFraction]

    def conserved(self) -> bool:
        return self.published_objects == (self.delivered_objects + self.expired_objects
                                          + self.unsubscribed_objects + self.in_flight_objects)


@dataclass
class RunReport:
    scenario_id: str
    seed: int
    duration_us: int
    mode: str
    config: dict[str, Any]
    trace_digest: str | None
    subscribers: list[SubscriberReport] = field(default_factory=list)

    def subscriber(self, subscriber_id: int) -> SubscriberReport:
        for s in self.subscribers:
            if s.subscriber_id == subscriber_id:
                return s
        raise KeyError(subscriber_id)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        subs = []
        for s in d["subscribers"]:
            s = dict(s)
            for k in ("object_latency", "event_latency"):
                s[k] = LatencyStats(**s[k]) if s[k] is not None else None
            s["per_subgroup"] = [ClassFraction(**c) for c in s["per_subgroup"]]
            s["per_track"] = [ClassFraction(**c) for c in s["per_track"]]
            s["per_second"] = [SecondFraction(**c) for c in s["per_second"]]
            subs.append(SubscriberReport(**s))
        top = {f.name: d[f.name] for f in fields(cls) if f.name != "subscribers"}
        return cls(subscribers=subs, **top)


@dataclass
class SubscriberLog:
    """Everything one subscription produced during a run.

    ``arrivals`` columns are parallel lists ``index``, ``arrival``,
    ``outcome``, ``object_latency``; ``drops`` holds ``(index, reason, time)``.
    """

    subscriber_id: int
    mode: str
    bandwidth_mbps: float | None
    arrivals: dict[str, list]
    drops: list[tuple[int, str, int]]
    controls: list[tuple[int, str, int]]
    event_latencies: list[np.ndarray]
    bytes_on_wire: int
    backlog_at_end: int | None = None


@dataclass
class RunLog:
    """Raw output of one simulation run, consumed by :func:`aggregate`.

    ``published`` holds parallel columns, one row per emitted object:
    ``track``, ``group``, ``subgroup``, ``object``, ``window``, ``n_events``,
    ``size``, ``emit``, ``receipt``.  ``window_events`` counts source events
    per window.
    """

    scenario_id: str
    seed: int
    duration_us: int
    window_us: int
    mode: str
    config: dict[str, Any]
    published: dict[str, list] | None
    window_events: list[int] | None
    subscribers: list[SubscriberLog] | None
    trace_digest: str | None = None


_PUBLISHED_COLUMNS = ("track", "group", "subgroup", "object", "window", "n_events",
                      "size", "emit")
_ARRIVAL_COLUMNS = ("index", "arrival", "outcome", "object_latency")


def _classes(ids: np.ndarray, delivered_mask: np.ndarray) -> list[ClassFraction]:
    out = []
    if not len(ids):
        return out
    n = int(ids.max()) + 1
    pub = np.bincount(ids, minlength=n)
    dlv = np.bincount(ids[delivered_mask], minlength=n)
    for i in range(n):
        if pub[i]:
            out.append(ClassFraction(i, int(pub[i]), int(dlv[i]), float(dlv[i] / pub[i])))
    return out


def _aggregate_subscriber(log: RunLog, sub: SubscriberLog, pub: dict[str, np.ndarray],
                          source_events: int) -> SubscriberReport:
    for col in _ARRIVAL_COLUMNS:
        if col not in sub.arrivals:
            raise AggregationError(f"subscriber {sub.subscriber_id}: missing arrivals.{col}")
    n_pub = len(pub["emit"])
    idx = np.asarray(sub.arrivals["index"], dtype=np.int64)
    arrival = np.asarray(sub.arrivals["arrival"], dtype=np.int64)
    outcome = np.asarray(sub.arrivals["outcome"], dtype=object)
    decoded = outcome == "decoded"
    expired = sum(1 for _, r, _ in sub.drops if r == "timeout-expired")
    unsub = sum(1 for _, r, _ in sub.drops if r == "unsubscribed-track")
    delivered = len(idx)
    in_flight = n_pub - delivered - expired - unsub
    if in_flight < 0:
        raise AggregationError(f"subscriber {sub.subscriber_id}: more outcomes than objects")
    if sub.backlog_at_end is not None and sub.backlog_at_end != in_flight:
        raise AggregationError(
            f"subscriber {sub.subscriber_id}: conservation broken "
            f"({in_flight} unaccounted, relay reports {sub.backlog_at_end})")
    n_events = pub["n_events"]
    decoded_events = int(n_events[idx[decoded]].sum()) if delivered else 0
    delivered_mask = np.zeros(n_pub, dtype=bool)
    delivered_mask[idx] = True

    skew = []
    if delivered:
        win = pub["window"][idx]
        order = np.lexsort((arrival, win))
        w_sorted, a_sorted = win[order], arrival[order]
        cuts = np.flatnonzero(np.diff(w_sorted)) + 1
        for w_grp, a_grp in zip(np.split(w_sorted, cuts), np.split(a_sorted, cuts)):
            if len(a_grp) > 1:
                skew.append([int(w_grp[0]), int(a_grp[-1] - a_grp[0])])

    per_second = []
    if log.window_events is not None and log.window_us:
        we = np.asarray(log.window_events, dtype=np.int64)
        sec_of_window = (np.arange(len(we)) * log.window_us) // 1_000_000
        n_sec = int(sec_of_window.max()) + 1 if len(we) else 0
        src = np.bincount(sec_of_window, weights=we, minlength=n_sec)
        dec = np.zeros(n_sec)
        if delivered and decoded.any():
            wins = pub["window"][idx[decoded]]
            dec = np.bincount(sec_of_window[wins], weights=n_events[idx[decoded]],
                              minlength=n_sec)
        per_second = [SecondFraction(i, int(src[i]), int(dec[i])) for i in range(n_sec)]

    ev_lat = np.concatenate(sub.event_latencies) if sub.event_latencies else []
    fraction = decoded_events / source_events if source_events else 1.0
    return SubscriberReport(
        subscriber_id=sub.subscriber_id,
        mode=sub.mode,
        bandwidth_mbps=sub.bandwidth_mbps,
        published_objects=n_pub,
        delivered_objects=delivered,
        expired_objects=expired,
        unsubscribed_objects=unsub,
        in_flight_objects=in_flight,
        decoded_objects=int(decoded.sum()),
        discarded_objects=int((outcome == "dependency-discarded").sum()),
        corrupt_objects=int((outcome == "corrupt").sum()),
        source_events=source_events,
        published_events=int(n_events.sum()),
        delivered_events=int(n_events[idx].sum()) if delivered else 0,
        decoded_events=decoded_events,
        delivered_event_fraction=fraction,
        object_latency=LatencyStats.of(sub.arrivals["object_latency"]),
        event_latency=LatencyStats.of(ev_lat),
        control_msgs=len(sub.controls),
        per_subgroup=_classes(pub["subgroup"], delivered_mask) if log.mode == "subgroup" else [],
        per_track=_classes(pub["track"], delivered_mask) if log.mode == "multitrack" else [],
        skew_series_us=skew,
        max_skew_us=max((s for _, s in skew), default=None),
        bytes_on_wire=sub.bytes_on_wire,
        per_second=per_second,
    )


def aggregate(log: RunLog) -> RunReport:
    for name in ("published", "window_events", "subscribers"):
        if getattr(log, name) is None:
            raise AggregationError(f"run log is missing the {name!r} stream")
    for col in _PUBLISHED_COLUMNS:
        if col not in log.published:
            raise AggregationError(f"run log is missing published.{col}")
    pub = {k: np.asarray(log.published[k], dtype=np.int64) for k in _PUBLISHED_COLUMNS}
    source_events = int(sum(log.window_events))
    report = RunReport(log.scenario_id, log.seed, log.duration_us, log.mode, log.config,
                       log.trace_digest)
    for sub in log.subscribers:
        report.subscribers.append(_aggregate_subscriber(log, sub, pub, source_events))
    return report


def to_json(report: RunReport) -> str:
    return json.dumps(asdict(report), sort_keys=True, indent=1) + "\n"


def from_json(text: str) -> RunReport:
    return RunReport.from_dict(json.loads(text))


def csv_rows(report: RunReport) -> list[list]:
    rows = []
    for s in report.subscribers:
        ol = s.object_latency
        rows.append([
            report.scenario_id, s.subscriber_id, s.mode,
            "" if s.bandwidth_mbps is None else repr(s.bandwidth_mbps),
            repr(s.delivered_event_fraction),
            "" if ol is None else repr(ol.mean),
            "" if ol is None else ol.p95,
            s.control_msgs,
            "" if s.max_skew_us is None else s.max_skew_us,
        ])
    return rows


def to_csv(reports: list[RunReport] | RunReport, header: bool = True) -> str:
    if isinstance(reports, RunReport):
        reports = [reports]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerows(csv_rows(r))
    return buf.getvalue()


def export(report: RunReport, format: str = "json") -> bytes:
    if format == "json":
        return to_json(report).encode()
    if format == "csv":
        return to_csv(report).encode()
    raise ValueError(f"unknown report format {format!r}")
