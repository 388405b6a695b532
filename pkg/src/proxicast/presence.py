"""Visit sessionization and the presence predicates used by rules.

A visit is a maximal run of detections of one device at one location whose
consecutive gaps are at most the session gap. Day/week/month intervals are
calendar-aligned in a configured timezone, and a visit belongs to the
interval that contains its start.
"""

from __future__ import annotations

import bisect
import enum
import threading
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from typing import Iterable
from zoneinfo import ZoneInfo

from .clock import UTC, format_ts, parse_ts
from .errors import NoCurrentVisit
from .wire_capture import DeviceId, ProbeEvent

DEFAULT_GAP = timedelta(minutes=30)
DEFAULT_GROUP_WINDOW = timedelta(minutes=5)


class IntervalCode(enum.IntEnum):
    ALL_TIME = 0
    DAY = 1
    WEEK = 2
    MONTH = 3


@dataclass(frozen=True)
class PresenceClock:
    now: datetime
    timezone: str = "UTC"
    week_start: int = 0  # Monday

    def __post_init__(self):
        ZoneInfo(self.timezone)
        if not 0 <= self.week_start <= 6:
            raise ValueError("week_start must be 0..6 (Monday=0)")

    @property
    def tz(self) -> ZoneInfo:
        return ZoneInfo(self.timezone)

    def _local_midnight(self, d: date) -> datetime:
        return datetime.combine(d, time(0), tzinfo=self.tz).astimezone(UTC)

    def interval_bounds(self, code: int) -> tuple[datetime, datetime] | None:
        """UTC [start, end) of the calendar interval containing ``now``.

        Returns None for all-time.
        """
        code = IntervalCode(code)
        if code is IntervalCode.ALL_TIME:
            return None
        today = self.now.astimezone(self.tz).date()
        if code is IntervalCode.DAY:
            first, nxt = today, today + timedelta(days=1)
        elif code is IntervalCode.WEEK:
            first = today - timedelta(days=(today.weekday() - self.week_start) % 7)
            nxt = first + timedelta(days=7)
        else:
            first = today.replace(day=1)
            nxt = (first + timedelta(days=32)).replace(day=1)
        return self._local_midnight(first), self._local_midnight(nxt)

    def contains(self, code: int, ts: datetime) -> bool:
        bounds = self.interval_bounds(code)
        if bounds is None:
            return True
        return bounds[0] <= ts < bounds[1]


@dataclass
class Visit:
    device: DeviceId
    location_id: str
    start_ts: datetime
    end_ts: datetime
    probe_count: int = 1
    visit_id: int = 0

    @property
    def dwell(self) -> timedelta:
        return self.end_ts - self.start_ts

    def to_dict(self) -> dict:
        return {
            "visit_id": self.visit_id,
            "device": self.device,
            "location_id": self.location_id,
            "start_ts": format_ts(self.start_ts),
            "end_ts": format_ts(self.end_ts),
            "probe_count": self.probe_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Visit:
        return cls(
            device=DeviceId(d["device"]),
            location_id=d["location_id"],
            start_ts=parse_ts(d["start_ts"]),
            end_ts=parse_ts(d["end_ts"]),
            probe_count=d["probe_count"],
            visit_id=d["visit_id"],
        )


@dataclass
class _Sightings:
    """Per-location sorted (ts, device) pairs for group-size queries."""

    ts: list[datetime] = field(default_factory=list)
    devices: list[DeviceId] = field(default_factory=list)

    def add(self, ts: datetime, device: DeviceId) -> None:
        i = bisect.bisect_right(self.ts, ts)
        self.ts.insert(i, ts)
        self.devices.insert(i, device)


class PresenceStore:
    """Visit history plus per-location sightings.

    Mutations and queries take one lock, so queries always see a consistent
    snapshot while ingestion runs on other threads.
    """

    def __init__(self, gap: timedelta = DEFAULT_GAP):
        if gap <= timedelta(0):
            raise ValueError("session gap must be positive")
        self.gap = gap
        self._visits: dict[tuple[str, str], list[Visit]] = {}
        self._sightings: dict[str, _Sightings] = {}
        self._next_id = 1
        self._lock = threading.RLock()

    # -- ingestion -----------------------------------------------------------

    def add_sighting(self, event: ProbeEvent) -> None:
        with self._lock:
            self._sightings.setdefault(event.location_id, _Sightings()).add(
                event.ts, event.device
            )

    def sessionize(self, event: ProbeEvent) -> Visit:
        """Fold one event into the visit history and return its visit."""
        with self._lock:
            self.add_sighting(event)
            visits = self._visits.setdefault((event.device, event.location_id), [])
            ts, gap = event.ts, self.gap
            # visits are disjoint and sorted by start; at most two can touch ts
            hi = bisect.bisect_right([v.start_ts for v in visits], ts + gap)
            touching = [v for v in visits[max(hi - 2, 0):hi] if v.end_ts >= ts - gap]
            if not touching:
                visit = Visit(event.device, event.location_id, ts, ts, 1, self._next_id)
                self._next_id += 1
                visits.insert(hi, visit)
                return visit
            visit = touching[0]
            visit.start_ts = min(visit.start_ts, ts)
            visit.end_ts = max(visit.end_ts, ts)
            visit.probe_count += 1
            for other in touching[1:]:
                # the event bridged two visits
                visit.start_ts = min(visit.start_ts, other.start_ts)
                visit.end_ts = max(visit.end_ts, other.end_ts)
                visit.probe_count += other.probe_count
                visit.visit_id = min(visit.visit_id, other.visit_id)
                visits.remove(other)
            return visit

    def load_visits(self, visits: Iterable[Visit]) -> None:
        """Restore persisted visits (sightings are not part of the snapshot)."""
        with self._lock:
            for v in visits:
                self._visits.setdefault((v.device, v.location_id), []).append(v)
                self._next_id = max(self._next_id, v.visit_id + 1)
            for vs in self._visits.values():
                vs.sort(key=lambda v: v.start_ts)

    def prune(self, before: datetime) -> int:
        """Drop visits that ended before ``before`` (retention horizon)."""
        dropped = 0
        with self._lock:
            for key, vs in list(self._visits.items()):
                keep = [v for v in vs if v.end_ts >= before]
                dropped += len(vs) - len(keep)
                self._visits[key] = keep
            for s in self._sightings.values():
                i = bisect.bisect_left(s.ts, before)
                del s.ts[:i]
                del s.devices[:i]
        return dropped

    # -- queries -------------------------------------------------------------

    def visits(self, device: str | None = None, location: str | None = None) -> list[Visit]:
        with self._lock:
            out = []
            for (dev, loc), vs in self._visits.items():
                if (device is None or dev == device) and (location is None or loc == location):
                    out.extend(Visit(**vars(v)) for v in vs)
        out.sort(key=lambda v: (v.start_ts, v.device, v.location_id))
        return out

    def current_visit(self, device: str, location: str, now: datetime) -> Visit | None:
        """The visit in progress at ``now``: started by now, last probe within the gap."""
        with self._lock:
            vs = self._visits.get((device, location), [])
            i = bisect.bisect_right([v.start_ts for v in vs], now)
            if i and now - vs[i - 1].end_ts <= self.gap:
                return vs[i - 1]
            return None

    def counter(self, device: str, location: str, interval: int, clock: PresenceClock) -> int:
        bounds = clock.interval_bounds(interval)
        with self._lock:
            vs = self._visits.get((device, location), [])
            if bounds is None:
                return len(vs)
            starts = [v.start_ts for v in vs]
            return bisect.bisect_left(starts, bounds[1]) - bisect.bisect_left(starts, bounds[0])

    def is_first(self, device: str, location: str, interval: int, clock: PresenceClock) -> bool:
        with self._lock:
            current = self.current_visit(device, location, clock.now)
            if current is None:
                raise NoCurrentVisit("FIRST evaluated outside a visit")
            if not clock.contains(interval, current.start_ts):
                return False
            vs = self._visits[(device, location)]
            bounds = clock.interval_bounds(interval)
            lo = bounds[0] if bounds else None
            return not any(
                v is not current
                and v.start_ts < current.start_ts
                and (lo is None or v.start_ts >= lo)
                for v in vs
            )

    def in_place(self, device: str, location: str, minutes: int, clock: PresenceClock) -> bool:
        if minutes < 1:
            raise ValueError("minutes must be a positive integer")
        with self._lock:
            current = self.current_visit(device, location, clock.now)
            if current is None or current.probe_count == 1:
                return False
            return current.dwell >= timedelta(minutes=minutes)

    def group_size(
        self, location: str, window: timedelta, clock: PresenceClock
    ) -> int:
        with self._lock:
            s = self._sightings.get(location)
            if s is None:
                return 0
            lo = bisect.bisect_left(s.ts, clock.now - window)
            hi = bisect.bisect_right(s.ts, clock.now)
            return len(set(s.devices[lo:hi]))
