"""Location-analytics reports over a detection-log snapshot.

Every report is a pure function of its inputs. A hashed device id plays the
role a cookie plays in web analytics: one new id in a bucket is one hit.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Iterable, Mapping
from zoneinfo import ZoneInfo

from .clock import format_ts
from .presence import DEFAULT_GAP, PresenceStore, Visit
from .wire_capture import DeviceId, ProbeEvent


@dataclass(frozen=True)
class TrafficBucket:
    bucket_start: datetime
    bucket_width: timedelta
    unique_devices: int
    total_probes: int

    def to_dict(self) -> dict:
        return {
            "bucket_start": format_ts(self.bucket_start),
            "bucket_width_s": self.bucket_width.total_seconds(),
            "unique_devices": self.unique_devices,
            "total_probes": self.total_probes,
        }


def hits_report(
    events: Iterable[ProbeEvent],
    location: str,
    bucket_width: timedelta,
    start: datetime,
    end: datetime,
) -> list[TrafficBucket]:
    """Distinct devices and probe totals per bucket over [start, end).

    Buckets are aligned to ``start``; empty buckets are included.
    """
    if bucket_width <= timedelta(0):
        raise ValueError("bucket_width must be positive")
    n = max(0, -(-(end - start) // bucket_width))
    devices: list[set[str]] = [set() for _ in range(n)]
    probes = [0] * n
    for ev in events:
        if ev.location_id != location or not start <= ev.ts < end:
            continue
        i = (ev.ts - start) // bucket_width
        devices[i].add(ev.device)
        probes[i] += 1
    return [
        TrafficBucket(start + i * bucket_width, bucket_width, len(devices[i]), probes[i])
        for i in range(n)
    ]


def time_of_day(
    events: Iterable[ProbeEvent], location: str, timezone: str = "UTC"
) -> list[TrafficBucket]:
    """Hourly hits folded onto a single day (hour 0..23 in local time).

    ``bucket_start`` of each entry is that hour on 1970-01-01 local time.
    """
    tz = ZoneInfo(timezone)
    devices: list[set[str]] = [set() for _ in range(24)]
    probes = [0] * 24
    for ev in events:
        if ev.location_id != location:
            continue
        h = ev.ts.astimezone(tz).hour
        devices[h].add(ev.device)
        probes[h] += 1
    base = datetime(1970, 1, 1, tzinfo=tz)
    return [
        TrafficBucket(base + timedelta(hours=h), timedelta(hours=1), len(devices[h]), probes[h])
        for h in range(24)
    ]


@dataclass(frozen=True)
class ResidentSplit:
    residents: frozenset[DeviceId]
    visitors: frozenset[DeviceId]

    def to_dict(self) -> dict:
        return {"residents": sorted(self.residents), "visitors": sorted(self.visitors)}


def resident_visitor_split(
    events: Iterable[ProbeEvent],
    location: str,
    window_days: int = 7,
    min_distinct_days: int = 5,
    *,
    end_day: date,
    timezone: str = "UTC",
) -> ResidentSplit:
    """Split devices seen in the trailing window into residents and visitors.

    The window is the ``window_days`` local calendar days ending with
    ``end_day`` inclusive. Residents were seen on at least
    ``min_distinct_days`` of them.
    """
    if not window_days >= min_distinct_days >= 1:
        raise ValueError("need window_days >= min_distinct_days >= 1")
    tz = ZoneInfo(timezone)
    first_day = end_day - timedelta(days=window_days - 1)
    days: dict[str, set[date]] = defaultdict(set)
    for ev in events:
        if ev.location_id != location:
            continue
        d = ev.ts.astimezone(tz).date()
        if first_day <= d <= end_day:
            days[ev.device].add(d)
    residents = frozenset(DeviceId(k) for k, v in days.items() if len(v) >= min_distinct_days)
    visitors = frozenset(DeviceId(k) for k in days if k not in residents)
    return ResidentSplit(residents, visitors)


@dataclass
class DwellHistogram:
    granularity: timedelta
    bins: dict[int, int] = field(default_factory=dict)  # lower edge in minutes -> count
    unmeasurable: int = 0

    def to_dict(self) -> dict:
        step = int(self.granularity.total_seconds() // 60)
        return {
            "granularity_min": step,
            "bins": [
                {"from_min": lo, "to_min": lo + step, "visits": n}
                for lo, n in sorted(self.bins.items())
            ],
            "unmeasurable": self.unmeasurable,
        }


def dwell_distribution(
    visits: Iterable[Visit],
    location: str,
    start: datetime | None = None,
    end: datetime | None = None,
    granularity: timedelta = timedelta(minutes=5),
) -> DwellHistogram:
    """Histogram of visit durations; single-probe visits have no measurable dwell."""
    if granularity < timedelta(minutes=1) or granularity % timedelta(minutes=1):
        raise ValueError("granularity must be a whole number of minutes")
    hist = DwellHistogram(granularity)
    step = int(granularity.total_seconds() // 60)
    for v in visits:
        if v.location_id != location:
            continue
        if (start is not None and v.start_ts < start) or (end is not None and v.start_ts >= end):
            continue
        if v.probe_count == 1:
            hist.unmeasurable += 1
            continue
        lo = (v.dwell // granularity) * step
        hist.bins[lo] = hist.bins.get(lo, 0) + 1
    return hist


def visits_from_events(events: Iterable[ProbeEvent], gap: timedelta = DEFAULT_GAP) -> list[Visit]:
    store = PresenceStore(gap)
    for ev in events:
        store.sessionize(ev)
    return store.visits()


@dataclass(frozen=True)
class RouteTransition:
    device: DeviceId
    from_monitor: str
    to_monitor: str
    depart_ts: datetime
    arrive_ts: datetime
    implied_speed: float | None = None  # distance units per second

    def to_dict(self) -> dict:
        return {
            "device": self.device,
            "from_monitor": self.from_monitor,
            "to_monitor": self.to_monitor,
            "depart_ts": format_ts(self.depart_ts),
            "arrive_ts": format_ts(self.arrive_ts),
            "implied_speed": self.implied_speed,
        }


@dataclass
class RoutesReport:
    transitions: list[RouteTransition]
    counts: dict[tuple[str, str], int]

    def to_dict(self) -> dict:
        return {
            "transitions": [t.to_dict() for t in self.transitions],
            "counts": [
                {"from_monitor": a, "to_monitor": b, "count": n}
                for (a, b), n in sorted(self.counts.items())
            ],
        }


def _distance(distances: Mapping[tuple[str, str], float], a: str, b: str) -> float | None:
    if (a, b) in distances:
        return distances[(a, b)]
    return distances.get((b, a))


def routes_report(
    events: Iterable[ProbeEvent],
    max_transition_gap: timedelta,
    monitor_pair_distances: Mapping[tuple[str, str], float] | None = None,
) -> RoutesReport:
    """Transitions between consecutive detections of a device at different monitors.

    Distances are looked up in either direction; pairs without a distance get
    no speed.
    """
    if max_transition_gap <= timedelta(0):
        raise ValueError("max_transition_gap must be positive")
    distances = monitor_pair_distances or {}
    by_device: dict[str, list[ProbeEvent]] = defaultdict(list)
    for ev in events:
        by_device[ev.device].append(ev)
    transitions: list[RouteTransition] = []
    for device in sorted(by_device):
        seq = sorted(by_device[device], key=lambda e: (e.ts, e.monitor_id))
        for a, b in zip(seq, seq[1:]):
            if a.monitor_id == b.monitor_id or b.ts - a.ts > max_transition_gap:
                continue
            gap_s = (b.ts - a.ts).total_seconds()
            dist = _distance(distances, a.monitor_id, b.monitor_id)
            speed = dist / gap_s if dist is not None and gap_s > 0 else None
            transitions.append(
                RouteTransition(DeviceId(device), a.monitor_id, b.monitor_id, a.ts, b.ts, speed)
            )
    counts = Counter((t.from_monitor, t.to_monitor) for t in transitions)
    return RoutesReport(transitions, dict(counts))
