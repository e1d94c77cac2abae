"""Scenario configuration and the end-to-end simulation runner.

A scenario is a nested mapping (usually loaded from YAML) with all times in
milliseconds and bandwidths in Mbps.  Unknown keys are rejected.  Example::

    scenario_id: baseline
    seed: 7
    duration_s: 30
    source: {kind: constant-poisson, rate: 100000}
    partition: {mode: subgroup, events_per_object: 250, window_ms: 50, group_ms: 1000}
    ingress: {bandwidth_mbps: 100}
    subscribers:
      - id: 1
        egress: {bandwidth_mbps: 100, propagation_ms: 5}
        delivery_timeout_ms: null      # infinite
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any

import yaml

from evstream import metrics, wire
from evstream.events import EventSource, SensorGeometry, SourceModel
from evstream.netsim import Link, LinkTrace, Simulator
from evstream.partition import (EventObject, SubgroupConfig, SubgroupPartitioner,
                                TrackConfig, TrackPartitioner)
from evstream.relay import MULTITRACK, SUBGROUP, Relay, Subscription
from evstream.subscriber import (Receiver, TimeoutController, TimeoutControllerConfig,
                                 TrackController, TrackControllerConfig)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid scenario configuration; the message names the key."""


_TOP_KEYS = {"scenario_id", "seed", "duration_s", "drain_s", "source", "partition",
             "ingress", "relay", "subscribers"}
_SOURCE_KEYS = {"kind", "rate", "width", "height", "bursts", "path", "format"}
_PARTITION_KEYS = {"mode", "events_per_object", "window_ms", "group_ms", "base_capacity",
                   "growth", "max_subgroups", "payload", "assignment", "num_tracks",
                   "interval_ms"}
_LINK_KEYS = {"bandwidth_mbps", "segments", "sawtooth", "propagation_ms"}
_SAWTOOTH_KEYS = {"mean_mbps", "amplitude", "period_ms", "step_ms"}
_RELAY_KEYS = {"policy", "sweep_ms"}
_SUB_KEYS = {"id", "egress", "delivery_timeout_ms", "tracks", "controller",
             "forced_drops", "keep_events"}
_CTRL_KEYS = {
    "none": {"type"},
    "timeout": {"type", "target_ms", "epoch_ms", "beta", "alpha", "step_ms", "dwell",
                "min_ms", "max_ms"},
    "track": {"type", "target_ms", "interval_ms", "resubscribe_fraction", "dwell"},
}


def _check_keys(d: Any, allowed: set[str], where: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key")
    return d


def _ms(v) -> int:
    return round(float(v) * 1000)


@dataclass
class SubscriberConfig:
    id: int
    egress: LinkTrace
    delivery_timeout: int | None
    tracks: frozenset[int] | None
    controller: str
    controller_cfg: Any
    forced_drops: list[tuple[int, int, int, int]] = field(default_factory=list)
    keep_events: bool = False


@dataclass
class ScenarioConfig:
    scenario_id: str
    seed: int
    duration_us: int
    drain_us: int
    source: SourceModel
    mode: str
    partition: SubgroupConfig | TrackConfig
    ingress: LinkTrace
    policy: str
    sweep_us: int
    subscribers: list[SubscriberConfig]
    raw: dict

    @property
    def window_us(self) -> int:
        return self.partition.window_us


def _link(d: Any, where: str, duration_us: int) -> LinkTrace:
    d = _check_keys(d, _LINK_KEYS, where)
    prop = d.get("propagation_ms", 0)
    if prop is None or float(prop) < 0:
        raise ConfigError(f"{where}.propagation_ms: must be >= 0")
    given = [k for k in ("bandwidth_mbps", "segments", "sawtooth") if k in d]
    if len(given) > 1:
        raise ConfigError(f"{where}.{given[1]}: conflicts with {given[0]}")
    try:
        if "segments" in d:
            pairs = [tuple(p) for p in d["segments"]]
            if any(len(p) != 2 for p in pairs):
                raise ConfigError(f"{where}.segments: entries must be [time_ms, mbps]")
            return LinkTrace.from_mbps(pairs, prop)
        if "sawtooth" in d:
            st = _check_keys(d["sawtooth"], _SAWTOOTH_KEYS, f"{where}.sawtooth")
            missing = sorted(_SAWTOOTH_KEYS - set(st))
            if missing:
                raise ConfigError(f"{where}.sawtooth.{missing[0]}: required")
            return LinkTrace.sawtooth(float(st["mean_mbps"]) * 1e6, float(st["amplitude"]),
                                      _ms(st["period_ms"]), _ms(st["step_ms"]),
                                      max(duration_us, _ms(st["period_ms"])), _ms(prop))
        bw = d.get("bandwidth_mbps")
        if bw is not None and float(bw) <= 0:
            raise ConfigError(f"{where}.bandwidth_mbps: must be > 0")
        return LinkTrace.constant(None if bw is None else round(float(bw) * 1e6), _ms(prop))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict, seed: int | None = None) -> ScenarioConfig:
    """Validate a scenario mapping; ``seed`` overrides the configured seed."""
    raw = copy.deepcopy(raw)
    _check_keys(raw, _TOP_KEYS, "config")
    if seed is not None:
        raw["seed"] = seed
    try:
        seed_v = int(raw.get("seed", 0))
        duration_us = round(float(raw.get("duration_s", 10)) * 1_000_000)
        drain_us = round(float(raw.get("drain_s", 2)) * 1_000_000)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None
    if duration_us <= 0:
        raise ConfigError("config.duration_s: must be > 0")
    if drain_us < 0:
        raise ConfigError("config.drain_s: must be >= 0")

    src = _check_keys(raw.get("source"), _SOURCE_KEYS, "source")
    try:
        geometry = SensorGeometry(int(src.get("width", 1280)), int(src.get("height", 720)))
        source = SourceModel(
            kind=src.get("kind", "constant-poisson"),
            rate=float(src.get("rate", 100_000)),
            burst_profile=tuple((_ms(a), _ms(b), float(m)) for a, b, m in src.get("bursts", [])),
            seed=seed_v,
            geometry=geometry,
            path=src.get("path"),
            file_format=src.get("format", "csv"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"source: {exc}") from None

    part = _check_keys(raw.get("partition"), _PARTITION_KEYS, "partition")
    mode = part.get("mode", SUBGROUP)
    try:
        if mode == SUBGROUP:
            for k in ("num_tracks", "interval_ms"):
                if k in part:
                    raise ConfigError(f"partition.{k}: only valid in multitrack mode")
            pcfg: SubgroupConfig | TrackConfig = SubgroupConfig(
                events_per_object=int(part.get("events_per_object", 250)),
                window_ms=int(part.get("window_ms", 50)),
                group_ms=int(part.get("group_ms", 1000)),
                base_capacity=int(part.get("base_capacity", 1)),
                growth=float(part.get("growth", 1)),
                max_subgroups=part.get("max_subgroups"),
                mode=part.get("payload", "plain"),
                assignment=part.get("assignment", "sequential"),
            )
        elif mode == MULTITRACK:
            for k in ("window_ms", "group_ms", "base_capacity", "growth", "max_subgroups",
                      "assignment"):
                if k in part:
                    raise ConfigError(f"partition.{k}: only valid in subgroup mode")
            pcfg = TrackConfig(
                events_per_object=int(part.get("events_per_object", 250)),
                num_tracks=int(part.get("num_tracks", 5)),
                interval_ms=int(part.get("interval_ms", 50)),
                mode=part.get("payload", "plain"),
            )
        else:
            raise ConfigError(f"partition.mode: must be {SUBGROUP!r} or {MULTITRACK!r}")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        key = "group_ms" if "group_ms" in str(exc) else "partition"
        raise ConfigError(f"partition.{key}: {exc}" if key != "partition"
                          else f"partition: {exc}") from None

    ingress = _link(raw.get("ingress"), "ingress", duration_us)
    rel = _check_keys(raw.get("relay"), _RELAY_KEYS, "relay")
    policy = rel.get("policy", "oldest-group-first")
    if policy not in ("oldest-group-first", "newest-group-first"):
        raise ConfigError("relay.policy: unknown scheduling policy")
    sweep_us = _ms(rel.get("sweep_ms", 1))
    if sweep_us <= 0:
        raise ConfigError("relay.sweep_ms: must be > 0")

    subs_raw = raw.get("subscribers")
    if not subs_raw:
        raise ConfigError("subscribers: at least one subscriber is required")
    subs = []
    seen = set()
    for i, s in enumerate(subs_raw):
        where = f"subscribers[{i}]"
        s = _check_keys(s, _SUB_KEYS, where)
        sid = int(s.get("id", i + 1))
        if sid in seen:
            raise ConfigError(f"{where}.id: duplicate subscriber id {sid}")
        seen.add(sid)
        egress = _link(s.get("egress"), f"{where}.egress", duration_us)
        tau_ms = s.get("delivery_timeout_ms")
        if tau_ms is not None and float(tau_ms) <= 0:
            raise ConfigError(f"{where}.delivery_timeout_ms: must be > 0 or null")
        tau = None if tau_ms is None else _ms(tau_ms)
        tracks = None
        if "tracks" in s:
            if mode != MULTITRACK:
                raise ConfigError(f"{where}.tracks: only valid in multitrack mode")
            tracks = frozenset(int(t) for t in s["tracks"])
            if not tracks or any(not 0 <= t < pcfg.num_tracks for t in tracks):
                raise ConfigError(f"{where}.tracks: must be a non-empty subset of 0..N-1")
        if mode == MULTITRACK and tracks is None:
            tracks = frozenset(range(pcfg.num_tracks))
        c = s.get("controller") or {"type": "none"}
        ctype = c.get("type", "none") if isinstance(c, dict) else None
        if ctype not in _CTRL_KEYS:
            raise ConfigError(f"{where}.controller.type: must be one of {sorted(_CTRL_KEYS)}")
        _check_keys(c, _CTRL_KEYS[ctype], f"{where}.controller")
        ccfg = None
        try:
            if ctype == "timeout":
                if mode != SUBGROUP:
                    raise ConfigError(f"{where}.controller.type: timeout needs subgroup mode")
                ccfg = TimeoutControllerConfig(
                    target_us=_ms(c["target_ms"]),
                    epoch_us=_ms(c.get("epoch_ms", 1000)),
                    beta=float(c.get("beta", 0.7)),
                    alpha=float(c.get("alpha", 0.5)),
                    step_us=_ms(c.get("step_ms", 10)),
                    dwell=int(c.get("dwell", 10)),
                    min_us=_ms(c.get("min_ms", 1)),
                    max_us=_ms(c.get("max_ms", 1000)),
                )
            elif ctype == "track":
                if mode != MULTITRACK:
                    raise ConfigError(f"{where}.controller.type: track needs multitrack mode")
                ccfg = TrackControllerConfig(
                    target_us=_ms(c["target_ms"]),
                    interval_us=_ms(c.get("interval_ms", 50)),
                    resubscribe_fraction=float(c.get("resubscribe_fraction", 0.8)),
                    dwell=int(c.get("dwell", 2)),
                )
        except KeyError as exc:
            raise ConfigError(f"{where}.controller.{exc.args[0]}: required") from None
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.controller: {exc}") from None
        forced = []
        for k in s.get("forced_drops", []):
            k = [int(v) for v in k]
            if len(k) == 3:
                k = [0] + k
            if len(k) != 4:
                raise ConfigError(f"{where}.forced_drops: entries are [group, subgroup, object]")
            forced.append(tuple(k))
        subs.append(SubscriberConfig(sid, egress, tau, tracks, ctype, ccfg, forced,
                                     bool(s.get("keep_events", False))))

    return ScenarioConfig(
        scenario_id=str(raw.get("scenario_id", "scenario")),
        seed=seed_v,
        duration_us=duration_us,
        drain_us=drain_us,
        source=source,
        mode=mode,
        partition=pcfg,
        ingress=ingress,
        policy=policy,
        sweep_us=sweep_us,
        subscribers=subs,
        raw=raw,
    )


def load_config(path, seed: int | None = None) -> ScenarioConfig:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw or {}, seed=seed)


def with_egress_bandwidth(raw: dict, mbps: float) -> dict:
    """Copy of ``raw`` with every subscriber's egress set to a constant rate."""
    raw = copy.deepcopy(raw)
    for s in raw.get("subscribers", []):
        egress = {k: v for k, v in (s.get("egress") or {}).items() if k == "propagation_ms"}
        egress["bandwidth_mbps"] = mbps
        s["egress"] = egress
    return raw


class Run:
    """One deterministic simulation; build with a config, then :meth:`execute`."""

    def __init__(self, cfg: ScenarioConfig, trace: bool = True):
        self.cfg = cfg
        self.sim = Simulator(trace=trace)
        self.source = EventSource(cfg.source)
        if cfg.mode == SUBGROUP:
            self.partitioner = SubgroupPartitioner(cfg.partition)
        else:
            self.partitioner = TrackPartitioner(cfg.partition)
        self.ingress = Link(cfg.ingress)
        self.relay = Relay(self.sim, self._on_deliver, cfg.sweep_us)
        self.receivers: dict[int, Receiver] = {}
        self.controllers: dict[int, Any] = {}
        self.controls: dict[int, list[tuple[int, str, int]]] = {}
        self.published: dict[str, list] = {k: [] for k in
                                           ("track", "group", "subgroup", "object", "window",
                                            "n_events", "size", "emit", "receipt")}
        self.objects_meta: list[tuple] = []
        self.window_events: list[int] = []
        self.truncated = 0
        self.forwarded: dict[int, dict[int, tuple[int, int]]] = {}
        for sc in cfg.subscribers:
            sub = Subscription(sc.id, sc.egress, cfg.mode, sc.delivery_timeout, sc.tracks,
                               cfg.policy)
            sub.forced.update(sc.forced_drops)
            self.relay.add_subscription(sub)
            self.receivers[sc.id] = Receiver(sc.id, keep_events=sc.keep_events)
            self.controls[sc.id] = []
            self.forwarded[sc.id] = {}
            if sc.controller == "timeout":
                self.controllers[sc.id] = TimeoutController(sc.controller_cfg, sc.id,
                                                            sc.delivery_timeout)
            elif sc.controller == "track":
                self.controllers[sc.id] = TrackController(sc.controller_cfg, sc.id, sc.tracks,
                                                          cfg.partition.num_tracks)

    # publisher -----------------------------------------------------------
    def _window_end(self, w: int) -> None:
        now = self.sim.now
        events = self.source.take(min(now, self.cfg.duration_us))
        self.window_events.append(len(events))
        batch = self.partitioner.window(events, w)
        self.truncated += batch.truncated
        pub = self.published
        for obj in batch.objects:
            obj.emit_time = now
            obj.index = len(pub["emit"])
            _, _, arrival = self.ingress.send(obj.size, now)
            pub["track"].append(obj.track_id)
            pub["group"].append(obj.group_id)
            pub["subgroup"].append(obj.subgroup_id)
            pub["object"].append(obj.object_id)
            pub["window"].append(w)
            pub["n_events"].append(obj.n_events)
            pub["size"].append(obj.size)
            pub["emit"].append(now)
            pub["receipt"].append(arrival)
            # the relay and receiver work from the payload only
            obj.events = obj.events[:0]
            self.sim.schedule(arrival, self.relay.ingest, obj)

    # relay -> subscriber ---------------------------------------------------
    def _on_deliver(self, sub: Subscription, obj: EventObject, start: int, done: int,
                    arrival: int) -> None:
        self.forwarded[sub.subscriber_id][obj.index] = (start, done)
        self.sim.schedule(arrival, self.receivers[sub.subscriber_id].on_object,
                          obj.payload, arrival, obj)

    # controllers -----------------------------------------------------------
    def _control_tick(self, sid: int, until: int) -> None:
        ctrl = self.controllers[sid]
        msg = ctrl.step(self.receivers[sid].take_stats())
        now = self.sim.now
        if msg is not None:
            self._send_control(sid, msg)
        nxt = now + ctrl.period_us
        if nxt <= until:
            self.sim.schedule(nxt, self._control_tick, sid, until)

    def _send_control(self, sid: int, msg: wire.ControlMessage) -> None:
        now = self.sim.now
        value = msg.delivery_timeout if msg.track_set is None else wire.track_mask(msg.track_set)
        self.controls[sid].append((now, msg.kind.name, -1 if value is None else value))
        back = self.relay.subscriptions[sid].link.trace.propagation_delay
        self.sim.schedule(now + back, self.relay.on_control, wire.encode_control(msg))

    def execute(self) -> tuple[metrics.RunReport, metrics.RunLog]:
        cfg = self.cfg
        W = cfg.window_us
        n_windows = -(-cfg.duration_us // W)
        end = cfg.duration_us + cfg.drain_us
        log.info("scenario %s: seed %d, %d windows, mode %s", cfg.scenario_id, cfg.seed,
                 n_windows, cfg.mode)
        for sid, sub in self.relay.subscriptions.items():
            self.relay.on_control(wire.ControlMessage(wire.ControlKind.SUBSCRIBE, sid,
                                                      sub.delivery_timeout), 0)
            if sub.mode == MULTITRACK:
                self.relay.on_control(wire.ControlMessage(wire.ControlKind.SUBSCRIBE_TRACKS,
                                                          sid, track_set=sub.track_set), 0)
        for w in range(n_windows):
            self.sim.schedule((w + 1) * W, self._window_end, w)
        for sid, ctrl in self.controllers.items():
            self.sim.schedule(ctrl.period_us, self._control_tick, sid, end)
        self.relay.start_sweeps(end)
        self.sim.run_until(end)
        log.debug("scenario %s: %d objects published, %d events truncated", cfg.scenario_id,
                  len(self.published["emit"]), self.truncated)
        return self._collect(end)

    def _collect(self, end: int):
        cfg = self.cfg
        drops_by_sub: dict[int, list] = {sid: [] for sid in self.receivers}
        for d in self.relay.drops:
            drops_by_sub[d.subscriber_id].append((d.index, d.reason, d.time))
        not_ingested = sum(1 for r in self.published["receipt"] if r > end)
        subs = []
        for sc in cfg.subscribers:
            rx = self.receivers[sc.id]
            sub = self.relay.subscriptions[sc.id]
            arrived = len(rx.indices)
            on_wire = sub.forwarded + (1 if sub.sending else 0) - arrived
            bw = sc.egress.mean_bandwidth(0, cfg.duration_us)
            subs.append(metrics.SubscriberLog(
                subscriber_id=sc.id,
                mode=cfg.mode,
                bandwidth_mbps=None if bw is None else bw / 1e6,
                arrivals={"index": rx.indices, "arrival": rx.arrivals,
                          "outcome": rx.outcomes, "object_latency": rx.object_latency,
                          "oldest_event_latency": rx.oldest_latency},
                drops=drops_by_sub[sc.id],
                controls=self.controls[sc.id],
                event_latencies=rx.event_latencies,
                bytes_on_wire=sub.link.bytes_sent,
                backlog_at_end=sub.queued + on_wire + not_ingested,
            ))
        runlog = metrics.RunLog(
            scenario_id=cfg.scenario_id,
            seed=cfg.seed,
            duration_us=cfg.duration_us,
            window_us=cfg.window_us,
            mode=cfg.mode,
            config=cfg.raw,
            published=self.published,
            window_events=self.window_events,
            subscribers=subs,
            trace_digest=self.sim.trace_digest,
        )
        return metrics.aggregate(runlog), runlog


def run_scenario(cfg: ScenarioConfig | dict, trace: bool = True):
    """Run one scenario; returns ``(RunReport, RunLog)``."""
    if isinstance(cfg, dict):
        cfg = parse_config(cfg)
    return Run(cfg, trace=trace).execute()
