"""Delivery scheduling and the mock cloud-push backend.

Fired rules become :class:`DeliveryJob` objects. A job is attempted
``repeat_count`` times, ``repeat_interval`` apart, and only inside its daily
window when one is set. The backend keeps a per-registration FIFO queue for
offline devices and drains it when the device comes back online.
"""

from __future__ import annotations

import base64
import enum
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from typing import Callable
from zoneinfo import ZoneInfo

from .clock import UTC, SystemClock, format_ts, parse_ts
from .engine import FiredRule
from .errors import (
    MessageDeleted,
    PayloadTooLarge,
    SubscriptionInactive,
    UnknownRegistration,
)
from .registry import MAX_PAYLOAD, Registry

logger = logging.getLogger(__name__)


# -- policies ------------------------------------------------------------------

@dataclass(frozen=True)
class DeliveryPolicy:
    repeat_count: int = 1
    repeat_interval: timedelta | None = None
    window: tuple[time, time] | None = None
    stop_on_delivery: bool = False
    drop_if_missed: bool = False

    def __post_init__(self):
        if self.repeat_count < 1:
            raise ValueError("repeat_count must be >= 1")
        if self.repeat_count > 1 and (
            self.repeat_interval is None or self.repeat_interval <= timedelta(0)
        ):
            raise ValueError("repeat_interval must be positive when repeat_count > 1")
        if self.window is not None and not self.window[0] < self.window[1]:
            raise ValueError("window start must be before window end")

    def to_dict(self) -> dict:
        return {
            "repeat_count": self.repeat_count,
            "repeat_interval_s": (
                self.repeat_interval.total_seconds() if self.repeat_interval else None
            ),
            "window": (
                [self.window[0].isoformat("minutes"), self.window[1].isoformat("minutes")]
                if self.window
                else None
            ),
            "stop_on_delivery": self.stop_on_delivery,
            "drop_if_missed": self.drop_if_missed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DeliveryPolicy:
        interval = d.get("repeat_interval_s")
        window = d.get("window")
        return cls(
            repeat_count=int(d.get("repeat_count", 1)),
            repeat_interval=timedelta(seconds=interval) if interval is not None else None,
            window=(time.fromisoformat(window[0]), time.fromisoformat(window[1]))
            if window
            else None,
            stop_on_delivery=bool(d.get("stop_on_delivery", False)),
            drop_if_missed=bool(d.get("drop_if_missed", False)),
        )


DEFAULT_POLICY = DeliveryPolicy()


def in_window(ts: datetime, window: tuple[time, time] | None, tz: ZoneInfo) -> bool:
    if window is None:
        return True
    local = ts.astimezone(tz).time()
    return window[0] <= local < window[1]


def next_window_start(ts: datetime, window: tuple[time, time], tz: ZoneInfo) -> datetime:
    """Earliest instant >= ts inside the daily window."""
    if in_window(ts, window, tz):
        return ts
    day: date = ts.astimezone(tz).date()
    for offset in range(3):
        start = datetime.combine(day + timedelta(days=offset), window[0], tzinfo=tz)
        start = start.astimezone(UTC)
        if start >= ts:
            return start
    raise AssertionError("unreachable: a daily window opens within two days")


# -- mock push backend -----------------------------------------------------------

class PushResult(str, enum.Enum):
    ACCEPTED_ONLINE = "accepted-online"
    QUEUED_OFFLINE = "queued-offline"


@dataclass
class PushEndpointState:
    registration_id: str
    online: bool = True
    queued: list[bytes] = field(default_factory=list)
    delivered_log: list[tuple[bytes, datetime]] = field(default_factory=list)


def _payload_json(payload: bytes) -> dict:
    try:
        return {"payload": payload.decode("utf-8")}
    except UnicodeDecodeError:
        return {"payload_b64": base64.b64encode(payload).decode("ascii")}


class MockPushBackend:
    """In-process stand-in for a cloud push service.

    Pushes to an online endpoint land in its delivered log; pushes to an
    offline endpoint are queued and flushed in order when it comes online.
    """

    def __init__(self, clock: Callable[[], datetime] | None = None):
        self.clock = clock or SystemClock()
        self._endpoints: dict[str, PushEndpointState] = {}
        self._lock = threading.Lock()

    def register(self, registration_id: str, online: bool = True) -> PushEndpointState:
        with self._lock:
            ep = self._endpoints.get(registration_id)
            if ep is None:
                ep = self._endpoints[registration_id] = PushEndpointState(registration_id, online)
            return ep

    def unregister(self, registration_id: str) -> None:
        with self._lock:
            self._endpoints.pop(registration_id, None)

    def endpoint(self, registration_id: str) -> PushEndpointState:
        try:
            return self._endpoints[registration_id]
        except KeyError:
            raise UnknownRegistration(f"backend does not know {registration_id!r}") from None

    def push(self, registration_id: str, payload: bytes, ts: datetime | None = None) -> PushResult:
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload is {len(payload)} bytes, limit is {MAX_PAYLOAD}")
        with self._lock:
            ep = self.endpoint(registration_id)
            if ep.online:
                ep.delivered_log.append((bytes(payload), ts or self.clock()))
                return PushResult.ACCEPTED_ONLINE
            ep.queued.append(bytes(payload))
            return PushResult.QUEUED_OFFLINE

    def set_online(self, registration_id: str, online: bool, ts: datetime | None = None) -> int:
        with self._lock:
            ep = self.endpoint(registration_id)
            ep.online = bool(online)
            if not ep.online:
                return 0
            now = ts or self.clock()
            drained = len(ep.queued)
            ep.delivered_log.extend((p, now) for p in ep.queued)
            ep.queued.clear()
            return drained

    def delivered(self, registration_id: str) -> list[dict]:
        with self._lock:
            ep = self.endpoint(registration_id)
            return [
                {"registration_id": registration_id, "ts": format_ts(ts), **_payload_json(p)}
                for p, ts in ep.delivered_log
            ]

    def export_delivered(self) -> str:
        """Every delivered payload as JSONL, ordered by registration then arrival."""
        lines = []
        for reg in sorted(self._endpoints):
            for entry in self.delivered(reg):
                lines.append(json.dumps(entry, sort_keys=True, separators=(",", ":")))
        return "".join(line + "\n" for line in lines)

    def to_dict(self) -> dict:
        with self._lock:
            return {
                reg: {
                    "online": ep.online,
                    "queued": [p.hex() for p in ep.queued],
                    "delivered": [[p.hex(), format_ts(ts)] for p, ts in ep.delivered_log],
                }
                for reg, ep in sorted(self._endpoints.items())
            }

    def load_dict(self, d: dict) -> None:
        with self._lock:
            self._endpoints = {
                reg: PushEndpointState(
                    reg,
                    e["online"],
                    [bytes.fromhex(p) for p in e["queued"]],
                    [(bytes.fromhex(p), parse_ts(ts)) for p, ts in e["delivered"]],
                )
                for reg, e in d.items()
            }


class SmsFallback:
    """Backup channel stub: records what would have been sent."""

    def __init__(self):
        self.intents: list[tuple[str, bytes]] = []

    def send(self, phone_number: str, payload: bytes) -> None:
        self.intents.append((phone_number, bytes(payload)))


# -- jobs and scheduler ----------------------------------------------------------

class JobState(str, enum.Enum):
    PENDING = "pending"
    DELIVERED = "delivered"
    CANCELLED = "cancelled"
    EXHAUSTED = "exhausted"


@dataclass
class DeliveryJob:
    job_id: str
    registration_id: str
    message_id: str
    payload: bytes
    policy: DeliveryPolicy
    next_attempt_ts: datetime
    attempts_made: int = 0
    state: JobState = JobState.PENDING
    rule_id: str = ""
    attempt_log: list[tuple[datetime, PushResult | None]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "registration_id": self.registration_id,
            "message_id": self.message_id,
            "rule_id": self.rule_id,
            "payload_hex": self.payload.hex(),
            "policy": self.policy.to_dict(),
            "next_attempt_ts": format_ts(self.next_attempt_ts),
            "attempts_made": self.attempts_made,
            "state": self.state.value,
            "attempts": [
                [format_ts(ts), r.value if r is not None else None] for ts, r in self.attempt_log
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> DeliveryJob:
        return cls(
            job_id=d["job_id"],
            registration_id=d["registration_id"],
            message_id=d["message_id"],
            payload=bytes.fromhex(d["payload_hex"]),
            policy=DeliveryPolicy.from_dict(d["policy"]),
            next_attempt_ts=parse_ts(d["next_attempt_ts"]),
            attempts_made=d["attempts_made"],
            state=JobState(d["state"]),
            rule_id=d.get("rule_id", ""),
            attempt_log=[
                (parse_ts(ts), PushResult(r) if r is not None else None)
                for ts, r in d.get("attempts", [])
            ],
        )


@dataclass(frozen=True)
class Attempt:
    job_id: str
    registration_id: str
    message_id: str
    attempt: int
    ts: datetime
    result: PushResult | None


class Dispatcher:
    """Single logical scheduler actor; all methods serialize on one lock."""

    def __init__(
        self,
        registry: Registry,
        backend: MockPushBackend,
        *,
        timezone: str = "UTC",
        policies: dict[str, DeliveryPolicy] | None = None,
    ):
        self.registry = registry
        self.backend = backend
        self.tz = ZoneInfo(timezone)
        self.policies: dict[str, DeliveryPolicy] = dict(policies or {})
        self.jobs: dict[str, DeliveryJob] = {}
        self._seq = 0
        self._lock = threading.RLock()
        registry.listeners.message_deleted.append(self.cancel_for_message)
        registry.listeners.subscription_gone.append(self.cancel_for_registration)
        registry.listeners.subscription_paused.append(self.cancel_for_registration)

    def policy_for(self, message_id: str) -> DeliveryPolicy:
        msg = self.registry.find_message(message_id)
        if msg is None or msg.delivery_policy_id is None:
            return DEFAULT_POLICY
        return self.policies.get(msg.delivery_policy_id, DEFAULT_POLICY)

    def enqueue(
        self,
        fired: FiredRule,
        registration_id: str,
        policy: DeliveryPolicy | None = None,
        now: datetime | None = None,
    ) -> DeliveryJob:
        msg = self.registry.find_message(fired.message_id)
        if msg is None:
            raise MessageDeleted(f"message {fired.message_id!r} no longer exists")
        sub = self.registry.find_subscription(registration_id)
        if sub is None or not sub.active:
            raise SubscriptionInactive(f"registration {registration_id!r} is not active")
        policy = policy or self.policy_for(fired.message_id)
        now = now or fired.fired_ts
        with self._lock:
            self._seq += 1
            job = DeliveryJob(
                job_id=f"job-{self._seq}",
                registration_id=registration_id,
                message_id=msg.message_id,
                payload=msg.payload,
                policy=policy,
                next_attempt_ts=now,
                rule_id=fired.rule_id,
            )
            if policy.window is not None and not in_window(now, policy.window, self.tz):
                nxt = next_window_start(now, policy.window, self.tz)
                if policy.drop_if_missed and nxt.astimezone(self.tz).date() != now.astimezone(self.tz).date():
                    job.state = JobState.CANCELLED
                job.next_attempt_ts = nxt
            self.jobs[job.job_id] = job
            return job

    def pending(self) -> list[DeliveryJob]:
        with self._lock:
            return [j for j in self.jobs.values() if j.state is JobState.PENDING]

    def _cancel_where(self, pred: Callable[[DeliveryJob], bool]) -> int:
        n = 0
        with self._lock:
            for job in self.jobs.values():
                if job.state is JobState.PENDING and pred(job):
                    job.state = JobState.CANCELLED
                    n += 1
        return n

    def cancel_for_message(self, message_id: str) -> int:
        return self._cancel_where(lambda j: j.message_id == message_id)

    def cancel_for_registration(self, registration_id: str) -> int:
        return self._cancel_where(lambda j: j.registration_id == registration_id)

    def _still_wanted(self, job: DeliveryJob) -> bool:
        sub = self.registry.find_subscription(job.registration_id)
        return (
            sub is not None
            and sub.active
            and self.registry.find_message(job.message_id) is not None
        )

    def tick(self, now: datetime) -> list[Attempt]:
        """Attempt every due job once."""
        attempts: list[Attempt] = []
        with self._lock:
            due = sorted(
                (j for j in self.pending() if j.next_attempt_ts <= now),
                key=lambda j: (j.next_attempt_ts, int(j.job_id.split("-")[1])),
            )
            for job in due:
                policy = job.policy
                if not self._still_wanted(job):
                    job.state = JobState.CANCELLED
                    continue
                if not in_window(now, policy.window, self.tz):
                    if policy.drop_if_missed:
                        job.state = JobState.CANCELLED
                    else:
                        job.next_attempt_ts = next_window_start(now, policy.window, self.tz)
                    continue
                try:
                    result = self.backend.push(job.registration_id, job.payload, now)
                except UnknownRegistration:
                    result = None
                job.attempts_made += 1
                job.attempt_log.append((now, result))
                attempts.append(
                    Attempt(
                        job.job_id,
                        job.registration_id,
                        job.message_id,
                        job.attempts_made,
                        now,
                        result,
                    )
                )
                if policy.stop_on_delivery and result is PushResult.ACCEPTED_ONLINE:
                    job.state = JobState.DELIVERED
                elif job.attempts_made < policy.repeat_count:
                    nxt = job.next_attempt_ts + policy.repeat_interval
                    if policy.window is not None:
                        nxt = next_window_start(nxt, policy.window, self.tz)
                    job.next_attempt_ts = nxt
                else:
                    job.state = JobState.DELIVERED if result is not None else JobState.EXHAUSTED
        return attempts

    def advance_to(self, until: datetime) -> list[Attempt]:
        """Tick at each scheduled attempt time up to ``until``, in order."""
        attempts: list[Attempt] = []
        with self._lock:
            while True:
                due = [j.next_attempt_ts for j in self.pending() if j.next_attempt_ts <= until]
                if not due:
                    break
                attempts.extend(self.tick(min(due)))
        return attempts

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "seq": self._seq,
                "policies": {k: p.to_dict() for k, p in sorted(self.policies.items())},
                "jobs": [self.jobs[k].to_dict() for k in sorted(self.jobs, key=lambda k: int(k.split("-")[1]))],
            }

    def load_dict(self, d: dict) -> None:
        with self._lock:
            self._seq = d.get("seq", 0)
            self.policies = {k: DeliveryPolicy.from_dict(p) for k, p in d.get("policies", {}).items()}
            self.jobs = {j["job_id"]: DeliveryJob.from_dict(j) for j in d.get("jobs", [])}
