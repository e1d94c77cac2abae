"""Command-line front end: ``evstream {run,sweep,gen,rates}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from evstream import metrics
from evstream.events import SensorGeometry, SourceModel, generate, write_csv
from evstream.scenario import ConfigError, load_config, parse_config, run_scenario, \
    with_egress_bandwidth
from evstream import wire


def _write(data: bytes, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        with open(out, "wb") as fh:
            fh.write(data)


def cmd_run(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    report, _ = run_scenario(cfg)
    _write(metrics.export(report, args.format), args.out)
    return 0


def _sweep_one(raw: dict, mbps: float, seed: int | None) -> metrics.RunReport:
    cfg = parse_config(with_egress_bandwidth(raw, mbps), seed=seed)
    return run_scenario(cfg)[0]


def cmd_sweep(args) -> int:
    base = load_config(args.config, seed=args.seed)
    bandwidths = [float(b) for part in args.bandwidths for b in part.split(",") if b]
    if not bandwidths:
        raise ConfigError("sweep: at least one bandwidth is required")
    for b in bandwidths:
        if b <= 0:
            raise ConfigError(f"sweep: bandwidth {b} must be > 0")
    raw, seed = base.raw, base.seed
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(_sweep_one, [raw] * len(bandwidths), bandwidths,
                                    [seed] * len(bandwidths)))
    else:
        reports = [_sweep_one(raw, b, seed) for b in bandwidths]
    _write(metrics.to_csv(reports).encode(), args.out)
    return 0


def cmd_gen(args) -> int:
    bursts = []
    for item in args.burst or []:
        try:
            start, end, mult = item.split(":")
            bursts.append((round(float(start) * 1000), round(float(end) * 1000), float(mult)))
        except ValueError:
            raise SystemExit(f"evstream gen: bad --burst {item!r}, expected START_MS:END_MS:MULT")
    model = SourceModel(kind="bursty" if bursts else "constant-poisson", rate=args.rate,
                        burst_profile=tuple(bursts), seed=args.seed,
                        geometry=SensorGeometry(args.width, args.height))
    events = generate(model, round(args.duration * 1000))
    if args.format == "csv":
        if args.out in (None, "-"):
            write_csv(events, sys.stdout)
        else:
            with open(args.out, "w", newline="") as fh:
                write_csv(events, fh)
    else:
        _write(wire.pack_events(events), args.out)
    return 0


def _num(v: str):
    f = float(v)
    return int(f) if f.is_integer() else f


def cmd_rates(args, parser) -> int:
    if bool(args.framed) == bool(args.event):
        parser.error("rates: give exactly one of --framed or --event")
    if args.framed:
        w, h, depth, fps = (_num(v) for v in args.framed)
        value = metrics.framed_rate(w, h, depth, fps)
    else:
        eps, bpe = (_num(v) for v in args.event)
        value = metrics.event_raw_rate(eps, bpe)
    print(int(value) if float(value).is_integer() else value)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evstream", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and print its report")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--format", choices=("json", "csv"), default="json")
    run.add_argument("--seed", type=int)

    sw = sub.add_parser("sweep", help="run a scenario at several egress bandwidths")
    sw.add_argument("--config", required=True)
    sw.add_argument("--bandwidths", nargs="+", required=True, metavar="MBPS",
                    help="egress bandwidths in Mbps (space or comma separated)")
    sw.add_argument("--out")
    sw.add_argument("--format", choices=("csv",), default="csv")
    sw.add_argument("--seed", type=int)
    sw.add_argument("--jobs", type=int, default=1)

    gen = sub.add_parser("gen", help="write a synthetic event stream")
    gen.add_argument("--rate", type=float, default=100_000, help="events per second")
    gen.add_argument("--duration", type=float, default=1000, help="milliseconds")
    gen.add_argument("--width", type=int, default=1280)
    gen.add_argument("--height", type=int, default=720)
    gen.add_argument("--burst", action="append", metavar="START_MS:END_MS:MULT")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--format", choices=("csv", "bin"), default="csv")
    gen.add_argument("--out")

    rates = sub.add_parser("rates", help="raw data-rate calculators (bits/s)")
    rates.add_argument("--framed", nargs=4, metavar=("WIDTH", "HEIGHT", "BITS", "FPS"))
    rates.add_argument("--event", nargs=2, metavar=("EVENTS_PER_S", "BYTES_PER_EVENT"))
    return p


def main(argv=None) -> int:
    level = os.environ.get("EVSTREAM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "gen":
            return cmd_gen(args)
        return cmd_rates(args, parser)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"evstream {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
