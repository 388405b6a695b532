"""The running service: one object wiring capture, presence, rules and delivery.

Detection pipeline per record::

    parse -> anonymize/ingest -> sessionize -> engine -> enqueue -> scheduler

All public methods serialize on one service lock. With ``storage_path`` set,
detections go to ``detections.jsonl`` and everything else to a ``state.json``
snapshot rewritten after each mutating call.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping
from zoneinfo import ZoneInfo

from .. import analytics
from ..clock import SystemClock, parse_ts
from ..dispatch import Attempt, DeliveryJob, DeliveryPolicy, Dispatcher, MockPushBackend
from ..engine import Engine, FiredRule
from ..errors import (
    Conflict,
    EmptySalt,
    ProxicastError,
    UnknownMessage,
    UnknownMonitor,
    UnknownRule,
)
from ..presence import PresenceStore, Visit
from ..registry import Message, Registry, SubscriptionRecord, Topic
from ..ruledsl import Diagnostic, RuleAst, RuleError, parse_rule, pretty_print, validate
from ..wire_capture import (
    DetectionLog,
    ProbeEvent,
    anonymize,
    ingest,
    parse_probe_record,
    record_from_dict,
)

logger = logging.getLogger(__name__)


class BatchRejected(ProxicastError):
    def __init__(self, errors: list[dict]):
        self.errors = errors
        super().__init__(f"{len(errors)} record(s) rejected")


class RuleRejected(ProxicastError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(d.message for d in diagnostics))


@dataclass
class ServiceConfig:
    salt_env: str = "PROXICAST_SALT"
    session_gap: timedelta = timedelta(minutes=30)
    group_window: timedelta = timedelta(minutes=5)
    timezone: str = "UTC"
    week_start: int = 0
    storage_path: Path | None = None
    host: str = "127.0.0.1"
    port: int = 8080
    retention: timedelta | None = None

    def __post_init__(self):
        for name in ("session_gap", "group_window"):
            if getattr(self, name) <= timedelta(0):
                raise ValueError(f"{name} must be positive")
        if self.retention is not None and self.retention <= timedelta(0):
            raise ValueError("retention must be positive")
        ZoneInfo(self.timezone)
        if self.storage_path is not None:
            self.storage_path = Path(self.storage_path)

    def load_salt(self, environ: Mapping[str, str] = os.environ) -> bytes:
        salt = environ.get(self.salt_env, "")
        if not salt:
            raise EmptySalt(f"environment variable {self.salt_env} is empty or unset")
        return salt.encode()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ServiceConfig:
        kw: dict[str, Any] = {}
        for key in ("salt_env", "timezone", "week_start", "host", "port"):
            if key in d:
                kw[key] = d[key]
        if "session_gap_minutes" in d:
            kw["session_gap"] = timedelta(minutes=d["session_gap_minutes"])
        if "group_window_minutes" in d:
            kw["group_window"] = timedelta(minutes=d["group_window_minutes"])
        if d.get("retention_days") is not None:
            kw["retention"] = timedelta(days=d["retention_days"])
        if d.get("storage_path"):
            kw["storage_path"] = Path(d["storage_path"])
        return cls(**kw)


@dataclass
class IngestResult:
    accepted: int = 0
    fired: list[FiredRule] = field(default_factory=list)
    jobs: list[DeliveryJob] = field(default_factory=list)
    attempts: list[Attempt] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "fired": [f.to_dict() for f in self.fired],
            "jobs": [j.job_id for j in self.jobs],
            "attempts": len(self.attempts),
        }


class Service:
    def __init__(
        self,
        config: ServiceConfig | None = None,
        *,
        salt: bytes | None = None,
        clock: Callable[[], datetime] | None = None,
    ):
        self.config = config or ServiceConfig()
        self.salt = salt if salt is not None else self.config.load_salt()
        if not self.salt:
            raise EmptySalt("salt must be non-empty")
        self.clock = clock or SystemClock()
        cfg = self.config
        self.registry = Registry(self.clock)
        self.presence = PresenceStore(cfg.session_gap)
        self.engine = Engine(
            self.presence,
            self.registry,
            timezone=cfg.timezone,
            week_start=cfg.week_start,
            group_window=cfg.group_window,
        )
        self.backend = MockPushBackend(self.clock)
        self.dispatcher = Dispatcher(self.registry, self.backend, timezone=cfg.timezone)
        self._lock = threading.RLock()
        log_path = None
        if cfg.storage_path is not None:
            cfg.storage_path.mkdir(parents=True, exist_ok=True)
            log_path = cfg.storage_path / "detections.jsonl"
        self.log = DetectionLog(log_path)
        if cfg.storage_path is not None and self.state_path.exists():
            self._load()

    # -- persistence ---------------------------------------------------------

    @property
    def state_path(self) -> Path:
        return self.config.storage_path / "state.json"

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "registry": self.registry.to_dict(),
                "rules": [
                    {"rule_id": r.rule_id, "topic_id": r.topic_id, "text": pretty_print(r)}
                    for r in self.engine.rules
                ],
                "visits": [v.to_dict() for v in self.presence.visits()],
                "fired": [list(k) for k in self.engine.fired_keys()],
                "dispatch": self.dispatcher.to_dict(),
                "backend": self.backend.to_dict(),
            }

    def save(self) -> None:
        if self.config.storage_path is None:
            return
        data = json.dumps(self.snapshot(), sort_keys=True, indent=1)
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(data, encoding="utf-8")
        os.replace(tmp, self.state_path)

    def _load(self) -> None:
        d = json.loads(self.state_path.read_text(encoding="utf-8"))
        self.registry.load_dict(d["registry"])
        self.engine.set_rules(
            [parse_rule(r["text"], rule_id=r["rule_id"], topic_id=r["topic_id"]) for r in d["rules"]]
        )
        self.presence.load_visits(Visit.from_dict(v) for v in d["visits"])
        self.engine.restore_fired(tuple(k) for k in d.get("fired", []))
        self.dispatcher.load_dict(d["dispatch"])
        self.backend.load_dict(d["backend"])
        # sightings for group-size queries are rebuilt from the log
        for ev in self.log.snapshot():
            self.presence.add_sighting(ev)

    def _mutated(self) -> None:
        self.save()

    # -- monitors and topics ---------------------------------------------------

    def register_monitor(self, monitor_id: str, location_id: str) -> None:
        with self._lock:
            self.registry.register_monitor(monitor_id, location_id)
            self._mutated()

    def create_topic(self, topic_id: str, location_id: str, title: str, admin_id: str) -> Topic:
        with self._lock:
            topic = self.registry.create_topic(topic_id, location_id, title, admin_id)
            self._mutated()
            return topic

    def put_topic(self, topic_id: str, location_id: str, title: str, admin_id: str) -> Topic:
        with self._lock:
            topic = self.registry.put_topic(topic_id, location_id, title, admin_id)
            self._mutated()
            return topic

    def delete_topic(self, topic_id: str, admin_id: str) -> None:
        with self._lock:
            self.registry.delete_topic(topic_id, admin_id)
            self.engine.set_rules([r for r in self.engine.rules if r.topic_id != topic_id])
            self._mutated()

    # -- messages and policies -------------------------------------------------

    def put_message(
        self,
        topic_id: str,
        payload: bytes,
        admin_id: str,
        message_id: str | None = None,
        policy_id: str | None = None,
    ) -> Message:
        with self._lock:
            if not message_id:
                n = len(self.registry.list_messages(topic_id)) + 1
                while self.registry.find_message(f"{topic_id}-m{n}") is not None:
                    n += 1
                message_id = f"{topic_id}-m{n}"
            msg = self.registry.put_message(topic_id, message_id, payload, admin_id, policy_id)
            self._mutated()
            return msg

    def edit_message(
        self, topic_id: str, message_id: str, payload: bytes, admin_id: str, policy_id: str | None = None
    ) -> Message:
        with self._lock:
            self._message_in_topic(topic_id, message_id)
            msg = self.registry.edit_message(message_id, payload, admin_id, policy_id)
            self._mutated()
            return msg

    def delete_message(self, topic_id: str, message_id: str, admin_id: str) -> None:
        with self._lock:
            self._message_in_topic(topic_id, message_id)
            self.registry.delete_message(message_id, admin_id)
            self._mutated()

    def _message_in_topic(self, topic_id: str, message_id: str) -> Message:
        self.registry.get_topic(topic_id)
        msg = self.registry.get_message(message_id)
        if msg.topic_id != topic_id:
            raise UnknownMessage(f"message {message_id!r} is not in topic {topic_id!r}")
        return msg

    def put_policy(self, policy_id: str, policy: DeliveryPolicy) -> None:
        with self._lock:
            self.dispatcher.policies[policy_id] = policy
            self._mutated()

    # -- subscriptions ---------------------------------------------------------

    def subscribe(
        self,
        registration_id: str,
        topic_ids: Iterable[str],
        *,
        device: str | None = None,
        mac: str | None = None,
    ) -> SubscriptionRecord:
        """Store a subscription; a raw ``mac`` is hashed here and then dropped."""
        if (device is None) == (mac is None):
            raise ProxicastError("give exactly one of device or mac")
        if mac is not None:
            device = anonymize(mac, self.salt)
        with self._lock:
            rec = self.registry.subscribe(registration_id, device, topic_ids)
            self.backend.register(registration_id)
            self._mutated()
            return rec

    def unsubscribe(self, registration_id: str) -> SubscriptionRecord:
        with self._lock:
            rec = self.registry.unsubscribe(registration_id)
            self._mutated()
            return rec

    def set_active(self, registration_id: str, active: bool) -> SubscriptionRecord:
        with self._lock:
            rec = self.registry.set_active(registration_id, active)
            self._mutated()
            return rec

    # -- rules -----------------------------------------------------------------

    def check_rule(self, topic_id: str, text: str, rule_id: str = "") -> RuleAst:
        try:
            ast = parse_rule(text, rule_id=rule_id, topic_id=topic_id)
        except RuleError as exc:
            raise RuleRejected([Diagnostic(exc.kind, str(exc))]) from None
        diags = validate(ast, self.registry)
        if diags:
            raise RuleRejected(diags)
        return ast

    def add_rule(
        self, topic_id: str, text: str, admin_id: str, rule_id: str | None = None
    ) -> RuleAst:
        with self._lock:
            self.registry._check_admin(topic_id, admin_id)
            taken = {r.rule_id for r in self.engine.rules}
            if rule_id in taken:
                raise Conflict(f"rule {rule_id!r} already exists")
            if not rule_id:
                n = 1
                while f"{topic_id}-r{n}" in taken:
                    n += 1
                rule_id = f"{topic_id}-r{n}"
            ast = self.check_rule(topic_id, text, rule_id)
            self.engine.add_rule(ast)
            self._mutated()
            return ast

    def put_rule(self, topic_id: str, rule_id: str, text: str, admin_id: str) -> RuleAst:
        with self._lock:
            self.registry._check_admin(topic_id, admin_id)
            existing = self.find_rule(rule_id)
            if existing is not None and existing.topic_id != topic_id:
                raise Conflict(f"rule {rule_id!r} belongs to another topic")
            ast = self.check_rule(topic_id, text, rule_id)
            self.engine.add_rule(ast)
            self._mutated()
            return ast

    def delete_rule(self, topic_id: str, rule_id: str, admin_id: str) -> None:
        with self._lock:
            self.registry._check_admin(topic_id, admin_id)
            rule = self.find_rule(rule_id)
            if rule is None or rule.topic_id != topic_id:
                raise UnknownRule(f"unknown rule {rule_id!r}")
            self.engine.remove_rule(rule_id)
            self._mutated()

    def find_rule(self, rule_id: str) -> RuleAst | None:
        leaf = self.engine.network.leaf_nodes.get(rule_id)
        return leaf.rule if leaf is not None else None

    def list_rules(self, topic_id: str) -> list[RuleAst]:
        self.registry.get_topic(topic_id)
        return [r for r in self.engine.rules if r.topic_id == topic_id]

    # -- detection pipeline ----------------------------------------------------

    def ingest_records(self, records: Iterable[Any]) -> IngestResult:
        """Validate a whole batch, then run every record through the pipeline.

        ``records`` may hold JSON lines or already-decoded objects. A batch with
        any bad record is rejected as a whole with per-index errors.
        """
        with self._lock:
            now = self.clock()
            horizon = self.config.retention
            parsed = []
            errors = []
            for i, rec in enumerate(records):
                try:
                    if isinstance(rec, str):
                        raw = parse_probe_record(rec, now=now, horizon=horizon)
                    else:
                        raw = record_from_dict(rec, now=now, horizon=horizon)
                    if raw.monitor_id not in self.registry.monitors:
                        raise UnknownMonitor(f"monitor {raw.monitor_id!r} is not registered")
                    parsed.append(raw)
                except ProxicastError as exc:
                    errors.append({"index": i, "error": type(exc).__name__, "detail": str(exc)})
            if errors:
                raise BatchRejected(errors)
            result = IngestResult()
            for raw in parsed:
                event = ingest(raw, self.salt, self.registry.monitors, self.log)
                self._process(event, result)
            if result.accepted:
                result.attempts.extend(self.dispatcher.advance_to(self.clock()))
                self._mutated()
            return result

    def ingest_events(self, events: Iterable[ProbeEvent]) -> IngestResult:
        """Feed already-anonymized events (replay of a detection log)."""
        with self._lock:
            result = IngestResult()
            for event in events:
                self.log.append(event)
                self._process(event, result)
            self._mutated()
            return result

    def _process(self, event: ProbeEvent, result: IngestResult) -> None:
        result.attempts.extend(self.dispatcher.advance_to(event.ts))
        self.presence.sessionize(event)
        if self.config.retention is not None:
            self.presence.prune(event.ts - self.config.retention)
        fired = self.engine.on_detection(event)
        for f in fired:
            result.fired.append(f)
            for sub in self.registry.active_registrations(f.device, f.topic_id):
                result.jobs.append(self.dispatcher.enqueue(f, sub.registration_id))
        result.attempts.extend(self.dispatcher.advance_to(event.ts))
        result.accepted += 1

    def tick(self, now: datetime | None = None) -> list[Attempt]:
        with self._lock:
            attempts = self.dispatcher.advance_to(now or self.clock())
            if attempts:
                self._mutated()
            return attempts

    # -- mock push backend controls ---------------------------------------------

    def set_online(self, registration_id: str, online: bool) -> int:
        with self._lock:
            n = self.backend.set_online(registration_id, online, self.clock())
            self._mutated()
            return n

    def delivered(self, registration_id: str) -> list[dict]:
        return self.backend.delivered(registration_id)

    # -- reports -----------------------------------------------------------------

    def hits(self, location: str, bucket: timedelta, start: datetime, end: datetime):
        return analytics.hits_report(self.log.snapshot(), location, bucket, start, end)

    def split(self, location: str, window_days: int, min_days: int, end_day: date):
        return analytics.resident_visitor_split(
            self.log.snapshot(),
            location,
            window_days,
            min_days,
            end_day=end_day,
            timezone=self.config.timezone,
        )

    def dwell(self, location: str, start=None, end=None, granularity=timedelta(minutes=5)):
        return analytics.dwell_distribution(
            self.presence.visits(location=location), location, start, end, granularity
        )

    def routes(self, max_gap: timedelta, distances: Mapping[tuple[str, str], float] | None = None):
        return analytics.routes_report(self.log.snapshot(), max_gap, distances)

    # -- scenarios ------------------------------------------------------------------

    def load_setup(self, setup: Mapping[str, Any]) -> None:
        """Apply a scenario's registry section (monitors, topics, messages, ...)."""
        with self._lock:
            for monitor_id, location in setup.get("monitors", {}).items():
                self.registry.register_monitor(monitor_id, location)
            for t in setup.get("topics", []):
                self.registry.put_topic(t["topic_id"], t["location_id"], t.get("title", ""), t["admin_id"])
            for pid, p in setup.get("policies", {}).items():
                self.dispatcher.policies[pid] = DeliveryPolicy.from_dict(p)
            for m in setup.get("messages", []):
                self.registry.put_message(
                    m["topic_id"], m["message_id"], message_payload(m), m["admin_id"], m.get("policy_id")
                )
            for s in setup.get("subscriptions", []):
                self.subscribe(
                    s["registration_id"], s["topic_ids"], device=s.get("device"), mac=s.get("mac")
                )
                if "online" in s:
                    self.backend.set_online(s["registration_id"], s["online"], self.clock())
                if s.get("active") is False:
                    self.registry.set_active(s["registration_id"], False)
            for r in setup.get("rules", []):
                admin = self.registry.get_topic(r["topic_id"]).admin_id
                self.add_rule(r["topic_id"], r["text"], admin, r.get("rule_id"))
            self._mutated()

    def run_scenario(self, scenario: Mapping[str, Any]) -> str:
        """Set up, replay the scenario's raw detections, run the scheduler to
        ``until`` and return the delivered log as JSONL."""
        self.load_setup(scenario)
        records = scenario.get("detections", [])
        for rec in records:
            self.ingest_records([rec])
        until = scenario.get("until")
        if until is not None:
            self.tick(parse_ts(until))
        return self.backend.export_delivered()


def message_payload(d: Mapping[str, Any]) -> bytes:
    """Payload bytes from a JSON body: ``payload`` (UTF-8 text) or ``payload_b64``."""
    if "payload_b64" in d:
        try:
            return base64.b64decode(d["payload_b64"], validate=True)
        except (binascii.Error, TypeError, ValueError):
            raise ProxicastError("payload_b64 is not valid base64") from None
    if isinstance(d.get("payload"), str):
        return d["payload"].encode("utf-8")
    raise ProxicastError("payload (text) or payload_b64 is required")
