"""Command-line entry point: ``proxicast <command> ...``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import threading
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Sequence

from .analytics import dwell_distribution, hits_report, resident_visitor_split, routes_report, visits_from_events
from .clock import UTC, ScriptedClock, parse_ts
from .errors import ProxicastError
from .gateway.service import RuleRejected, Service, ServiceConfig
from .ruledsl import RuleError, parse_rule, pretty_print
from .wire_capture import (
    DetectionLog,
    WalkByScenario,
    detected_fraction,
    ingest,
    parse_probe_record,
    read_events,
    simulate_walkby,
)

logger = logging.getLogger("proxicast")

REPLAY_SALT = b"proxicast-replay"


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _parse_monitors(text: str) -> tuple[tuple[str, timedelta], ...]:
    """``m1:0,m2:60`` -> monitor ids with travel seconds from the previous one."""
    out = []
    for part in text.split(","):
        name, _, secs = part.partition(":")
        out.append((name, timedelta(seconds=float(secs or 0))))
    return tuple(out)


def _monitor_map(args) -> dict[str, str]:
    mapping: dict[str, str] = {}
    if args.monitor_map:
        mapping.update(json.loads(Path(args.monitor_map).read_text(encoding="utf-8")))
    for item in args.monitor or []:
        mid, sep, loc = item.partition("=")
        if not sep:
            raise ValueError(f"--monitor expects id=location, got {item!r}")
        mapping[mid] = loc
    return mapping


def _salt(env_name: str) -> bytes:
    value = os.environ.get(env_name, "")
    if not value:
        raise ProxicastError(f"environment variable {env_name} is empty or unset")
    return value.encode()


def _open_out(path: str | None):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8", newline="")


# -- commands --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    scenario = WalkByScenario(
        device_count=args.devices,
        probes_per_device=args.probes,
        detection_probability=args.p,
        monitors=_parse_monitors(args.monitors),
        rng_seed=args.seed,
        start=parse_ts(args.start),
    )
    records = simulate_walkby(scenario)
    with _open_out(args.out) as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    frac = detected_fraction(records, scenario)
    print(f"{len(records)} records, detected fraction {frac:.4f}", file=sys.stderr)
    return 0


def cmd_ingest(args) -> int:
    salt = _salt(args.salt_env)
    monitors = _monitor_map(args)
    log = DetectionLog(args.out) if args.out else DetectionLog()
    bad = 0
    with open(args.log, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                event = ingest(parse_probe_record(line), salt, monitors, log)
            except ProxicastError as exc:
                bad += 1
                print(f"line {lineno}: {type(exc).__name__}: {exc}", file=sys.stderr)
                continue
            if not args.out:
                print(event.to_json())
    print(f"{len(log)} events ingested, {bad} rejected", file=sys.stderr)
    return 1 if bad else 0


def _load_rules_dir(path: Path) -> list[tuple[str, str, str]]:
    """``<dir>/<topic_id>/<rule_id>.rule`` -> (topic_id, rule_id, text)."""
    out = []
    for f in sorted(path.glob("*/*.rule")):
        out.append((f.parent.name, f.stem, f.read_text(encoding="utf-8")))
    return out


def cmd_replay(args) -> int:
    setup = json.loads(Path(args.setup).read_text(encoding="utf-8")) if args.setup else {}
    events = list(read_events(args.log)) if args.log else []
    if "start" in setup:
        start = parse_ts(setup["start"])
    elif events:
        start = min(e.ts for e in events)
    else:
        start = datetime(1970, 1, 1, tzinfo=UTC)
    clock = ScriptedClock(start)
    salt = os.environ.get(args.salt_env, "").encode() or REPLAY_SALT
    service = Service(ServiceConfig.from_dict(setup.get("config", {})), salt=salt, clock=clock)
    service.load_setup(setup)
    if args.rules:
        for topic_id, rule_id, text in _load_rules_dir(Path(args.rules)):
            admin = service.registry.get_topic(topic_id).admin_id
            service.add_rule(topic_id, text, admin, rule_id)

    fired = []
    for ev in sorted(events, key=lambda e: e.ts):
        clock.set(ev.ts)
        fired.extend(service.ingest_events([ev]).fired)
    for rec in setup.get("detections", []):
        fired.extend(service.ingest_records([rec]).fired)
    if setup.get("until"):
        service.tick(parse_ts(setup["until"]))

    with _open_out(args.out) as fh:
        for f in fired:
            fh.write(json.dumps(f.to_dict(), sort_keys=True) + "\n")
    if args.delivered:
        Path(args.delivered).write_text(service.backend.export_delivered(), encoding="utf-8")
    return 0


def cmd_rules_check(args) -> int:
    text = Path(args.file).read_bytes()
    if args.store:
        service = Service(ServiceConfig(storage_path=Path(args.store)), salt=REPLAY_SALT)
        try:
            ast = service.check_rule(args.topic or "", text.decode("utf-8", "replace"))
        except RuleRejected as exc:
            for d in exc.diagnostics:
                print(f"{d.kind}: {d.message}", file=sys.stderr)
            return 1
    else:
        try:
            ast = parse_rule(text, topic_id=args.topic or "")
        except RuleError as exc:
            return _fail(f"{exc.kind}: {exc}")
    print(pretty_print(ast))
    return 0


def cmd_rules_add(args) -> int:
    service = Service(ServiceConfig(storage_path=Path(args.store)), salt=REPLAY_SALT)
    text = Path(args.file).read_text(encoding="utf-8")
    try:
        ast = service.add_rule(args.topic, text, args.admin, args.rule_id)
    except RuleRejected as exc:
        for d in exc.diagnostics:
            print(f"{d.kind}: {d.message}", file=sys.stderr)
        return 1
    print(json.dumps({"rule_id": ast.rule_id, "topic_id": ast.topic_id, "text": pretty_print(ast)}))
    return 0


def _write_rows(rows: list[dict], fmt: str, out) -> None:
    if fmt == "json":
        json.dump(rows, out, indent=1)
        out.write("\n")
        return
    if not rows:
        return
    writer = csv.DictWriter(out, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)


def cmd_report(args) -> int:
    events = list(read_events(args.log))
    kind = args.kind
    if kind == "hits":
        if not (args.location and args.start and args.end):
            return _fail("hits needs --location, --start and --end")
        rows = [
            b.to_dict()
            for b in hits_report(
                events,
                args.location,
                timedelta(minutes=args.bucket_minutes),
                parse_ts(args.start),
                parse_ts(args.end),
            )
        ]
    elif kind == "split":
        if not (args.location and args.end_day):
            return _fail("split needs --location and --end-day")
        split = resident_visitor_split(
            events,
            args.location,
            args.window_days,
            args.min_days,
            end_day=date.fromisoformat(args.end_day),
            timezone=args.timezone,
        )
        rows = [{"device": d, "class": "resident"} for d in sorted(split.residents)]
        rows += [{"device": d, "class": "visitor"} for d in sorted(split.visitors)]
    elif kind == "dwell":
        if not args.location:
            return _fail("dwell needs --location")
        hist = dwell_distribution(
            visits_from_events(events, timedelta(minutes=args.gap_minutes)),
            args.location,
            parse_ts(args.start) if args.start else None,
            parse_ts(args.end) if args.end else None,
            timedelta(minutes=args.granularity_minutes),
        )
        rows = hist.to_dict()["bins"]
        rows.append({"from_min": None, "to_min": None, "visits": hist.unmeasurable})
    else:
        distances = {}
        for item in args.distance or []:
            a, b, meters = item.split(":")
            distances[(a, b)] = float(meters)
        report = routes_report(events, timedelta(seconds=args.max_gap_seconds), distances)
        rows = [t.to_dict() for t in report.transitions]
    with _open_out(args.out) as fh:
        _write_rows(rows, args.format, fh)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .gateway.http import create_app

    cfg = ServiceConfig.from_dict(
        json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    )
    if args.storage:
        cfg.storage_path = Path(args.storage)
    if args.salt_env:
        cfg.salt_env = args.salt_env
    service = Service(cfg)
    stop = threading.Event()

    def ticker():
        while not stop.wait(args.tick_seconds):
            try:
                service.tick()
            except Exception:
                logger.exception("scheduler tick failed")

    threading.Thread(target=ticker, name="scheduler", daemon=True).start()
    try:
        uvicorn.run(create_app(service), host=args.host or cfg.host, port=args.port or cfg.port)
    finally:
        stop.set()
    return 0


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxicast", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the HTTP API")
    s.add_argument("--config", help="JSON service config")
    s.add_argument("--storage", help="directory for detections.jsonl and state.json")
    s.add_argument("--salt-env", help="environment variable holding the salt")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.add_argument("--tick-seconds", type=float, default=1.0)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("simulate", help="generate synthetic walk-by probe records")
    s.add_argument("--devices", type=int, required=True)
    s.add_argument("--probes", type=int, default=1)
    s.add_argument("--p", type=float, default=0.70)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--monitors", default="m1:0", help="ids with travel seconds, e.g. m1:0,m2:60")
    s.add_argument("--start", default="2013-04-01T12:00:00Z")
    s.add_argument("--out", help="output JSONL (default stdout)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ingest", help="anonymize a raw detection log")
    s.add_argument("--log", required=True, help="raw probe records, one JSON object per line")
    s.add_argument("--salt-env", default="PROXICAST_SALT")
    s.add_argument("--monitor", action="append", help="monitor=location (repeatable)")
    s.add_argument("--monitor-map", help="JSON file mapping monitor ids to locations")
    s.add_argument("--out", help="anonymized event log to append to (default stdout)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("replay", help="run rules over a recorded event log")
    s.add_argument("--log", help="anonymized event log")
    s.add_argument("--rules", help="directory laid out as <topic_id>/<rule_id>.rule")
    s.add_argument("--setup", help="scenario JSON (monitors, topics, messages, subscriptions, ...)")
    s.add_argument("--salt-env", default="PROXICAST_SALT")
    s.add_argument("--out", help="fired rules JSONL (default stdout)")
    s.add_argument("--delivered", help="also write the mock backend's delivered log here")
    s.set_defaults(func=cmd_replay)

    rules = sub.add_parser("rules", help="check or add production rules")
    rsub = rules.add_subparsers(dest="rules_command", required=True)
    s = rsub.add_parser("check")
    s.add_argument("--file", required=True)
    s.add_argument("--topic")
    s.add_argument("--store", help="validate references against this service store")
    s.set_defaults(func=cmd_rules_check)
    s = rsub.add_parser("add")
    s.add_argument("--topic", required=True)
    s.add_argument("--file", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--admin", required=True)
    s.add_argument("--rule-id")
    s.set_defaults(func=cmd_rules_add)

    s = sub.add_parser("report", help="analytics over an anonymized event log")
    s.add_argument("kind", choices=["hits", "split", "dwell", "routes"])
    s.add_argument("--log", required=True)
    s.add_argument("--location")
    s.add_argument("--start")
    s.add_argument("--end")
    s.add_argument("--bucket-minutes", type=int, default=60)
    s.add_argument("--end-day")
    s.add_argument("--window-days", type=int, default=7)
    s.add_argument("--min-days", type=int, default=5)
    s.add_argument("--timezone", default="UTC")
    s.add_argument("--gap-minutes", type=float, default=30)
    s.add_argument("--granularity-minutes", type=int, default=5)
    s.add_argument("--max-gap-seconds", type=float, default=600)
    s.add_argument("--distance", action="append", help="from:to:meters (repeatable)")
    s.add_argument("--format", choices=["json", "csv"], default="json")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ProxicastError, ValueError, OSError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
