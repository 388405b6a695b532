"""Probe-request records: parsing, anonymization, ingestion and simulation.

Only the source address of a probe request matters for presence detection.
It is replaced by a keyed digest at ingestion, so nothing downstream of
:func:`ingest` ever holds a raw hardware address.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import random
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NewType

from .clock import UTC, format_ts, parse_ts, to_ms
from .errors import (
    EmptySalt,
    InvalidMac,
    InvalidTimestamp,
    MalformedRecord,
    UnknownMonitor,
)

logger = logging.getLogger(__name__)

MAC_RE = re.compile(r"^([0-9a-f]{2}:){5}[0-9a-f]{2}$")
_LOOSE_MAC_RE = re.compile(r"^[0-9A-Fa-f]{2}([:-])([0-9A-Fa-f]{2}\1){4}[0-9A-Fa-f]{2}$")

# 128-bit digests, hex encoded
DIGEST_HEX_LEN = 32
DEVICE_ID_RE = re.compile(rf"^[0-9a-f]{{{DIGEST_HEX_LEN}}}$")

DeviceId = NewType("DeviceId", str)


def canonical_mac(mac: str) -> str:
    """Lowercase colon form of a MAC; ``-`` separators are accepted too."""
    if not isinstance(mac, str) or not _LOOSE_MAC_RE.match(mac):
        raise InvalidMac("not a 48-bit hardware address")
    return mac.lower().replace("-", ":")


def is_device_id(value: object) -> bool:
    return isinstance(value, str) and DEVICE_ID_RE.match(value) is not None


def anonymize(mac: str, salt: bytes) -> DeviceId:
    """Keyed digest of a canonical MAC (HMAC-SHA256 truncated to 128 bits).

    An unkeyed hash would be useless here: the 2**48 address space is small
    enough to enumerate.
    """
    if not salt:
        raise EmptySalt("salt must be non-empty")
    if isinstance(salt, str):
        salt = salt.encode()
    mac = canonical_mac(mac)
    digest = hmac.new(salt, mac.encode("ascii"), hashlib.sha256).hexdigest()
    return DeviceId(digest[:DIGEST_HEX_LEN])


@dataclass(frozen=True)
class RawProbeRecord:
    mac: str
    monitor_id: str
    ts: datetime
    ssid: str | None = None
    supported_rates: tuple[float, ...] | None = None
    vendor_info: bytes | None = None
    rssi: int | None = None

    def to_dict(self) -> dict:
        d: dict = {"mac": self.mac}
        if self.ssid is not None:
            d["ssid"] = self.ssid
        if self.supported_rates is not None:
            d["rates"] = list(self.supported_rates)
        if self.vendor_info is not None:
            d["vendor"] = self.vendor_info.hex()
        if self.rssi is not None:
            d["rssi"] = self.rssi
        d["monitor_id"] = self.monitor_id
        d["ts"] = format_ts(self.ts)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _check_horizon(ts: datetime, now: datetime | None, horizon: timedelta | None) -> None:
    if horizon is None or now is None:
        return
    if ts < now - horizon:
        raise InvalidTimestamp("timestamp is older than the retention horizon")


def record_from_dict(
    obj: Mapping, *, now: datetime | None = None, horizon: timedelta | None = None
) -> RawProbeRecord:
    if not isinstance(obj, Mapping):
        raise MalformedRecord("record must be a JSON object")
    for key in ("mac", "monitor_id", "ts"):
        if key not in obj:
            raise MalformedRecord(f"missing required key {key!r}")
    mac = canonical_mac(obj["mac"])

    monitor_id = obj["monitor_id"]
    if not isinstance(monitor_id, str) or not monitor_id:
        raise MalformedRecord("monitor_id must be a non-empty string")
    try:
        ts = parse_ts(obj["ts"])
    except ValueError as exc:
        raise InvalidTimestamp(str(exc)) from None
    _check_horizon(ts, now, horizon)

    ssid = obj.get("ssid")
    if ssid is not None and not isinstance(ssid, str):
        raise MalformedRecord("ssid must be a string")
    rates = obj.get("rates")
    if rates is not None:
        if not isinstance(rates, list) or not all(
            isinstance(r, (int, float)) and not isinstance(r, bool) for r in rates
        ):
            raise MalformedRecord("rates must be a list of numbers")
        rates = tuple(float(r) for r in rates)
    rssi = obj.get("rssi")
    if rssi is not None and (not isinstance(rssi, int) or isinstance(rssi, bool)):
        raise MalformedRecord("rssi must be an integer")
    vendor = obj.get("vendor")
    if vendor is not None:
        try:
            vendor = bytes.fromhex(vendor)
        except (TypeError, ValueError):
            raise MalformedRecord("vendor must be a hex string") from None

    return RawProbeRecord(
        mac=mac,
        monitor_id=monitor_id,
        ts=ts,
        ssid=ssid,
        supported_rates=rates,
        vendor_info=vendor,
        rssi=rssi,
    )


def parse_probe_record(
    line: str, *, now: datetime | None = None, horizon: timedelta | None = None
) -> RawProbeRecord:
    """Parse one detection-log line into a validated :class:`RawProbeRecord`."""
    try:
        obj = json.loads(line)
    except (TypeError, ValueError):
        raise MalformedRecord("line is not valid JSON") from None
    return record_from_dict(obj, now=now, horizon=horizon)


@dataclass(frozen=True)
class ProbeEvent:
    device: DeviceId
    monitor_id: str
    location_id: str
    ts: datetime
    rssi: int | None = None

    def to_dict(self) -> dict:
        d = {
            "device": self.device,
            "monitor_id": self.monitor_id,
            "location_id": self.location_id,
            "ts": format_ts(self.ts),
        }
        if self.rssi is not None:
            d["rssi"] = self.rssi
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> ProbeEvent:
        return cls(
            device=DeviceId(d["device"]),
            monitor_id=d["monitor_id"],
            location_id=d["location_id"],
            ts=parse_ts(d["ts"]),
            rssi=d.get("rssi"),
        )


class DetectionLog:
    """Append-only ProbeEvent log, optionally mirrored to a JSONL file."""

    def __init__(self, path: Path | str | None = None):
        self.path = Path(path) if path is not None else None
        self._events: list[ProbeEvent] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._events = list(read_events(self.path))

    def append(self, event: ProbeEvent) -> None:
        with self._lock:
            self._events.append(event)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(event.to_json() + "\n")

    def snapshot(self) -> list[ProbeEvent]:
        with self._lock:
            return list(self._events)

    def __len__(self) -> int:
        return len(self._events)


def read_events(path: Path | str) -> Iterator[ProbeEvent]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield ProbeEvent.from_dict(json.loads(line))


def ingest(
    record: RawProbeRecord,
    salt: bytes,
    monitor_registry: Mapping[str, str],
    log: DetectionLog | None = None,
) -> ProbeEvent:
    location = monitor_registry.get(record.monitor_id)
    if location is None:
        raise UnknownMonitor(f"monitor {record.monitor_id!r} is not registered")
    event = ProbeEvent(
        device=anonymize(record.mac, salt),
        monitor_id=record.monitor_id,
        location_id=location,
        ts=record.ts,
        rssi=record.rssi,
    )
    if log is not None:
        log.append(event)
    return event


# -- synthetic walk-by streams -------------------------------------------------

@dataclass(frozen=True)
class WalkByScenario:
    """Devices walking past an ordered chain of monitors.

    ``monitors`` pairs each monitor id with the travel time from the previous
    monitor (the first entry's travel time is ignored). Each probe is detected
    independently with ``detection_probability``.
    """

    device_count: int
    probes_per_device: int
    detection_probability: float = 0.70
    monitors: tuple[tuple[str, timedelta], ...] = (("m1", timedelta(0)),)
    rng_seed: int = 0
    start: datetime = datetime(2013, 4, 1, 12, 0, tzinfo=UTC)
    arrival_spread: timedelta = timedelta(hours=1)
    probe_interval: timedelta = timedelta(seconds=20)

    def __post_init__(self):
        if self.device_count < 1:
            raise ValueError("device_count must be >= 1")
        if self.probes_per_device < 1:
            raise ValueError("probes_per_device must be >= 1")
        if not 0.0 <= self.detection_probability <= 1.0:
            raise ValueError("detection_probability must be in [0, 1]")
        if not self.monitors:
            raise ValueError("at least one monitor is required")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")
        object.__setattr__(
            self, "monitors", tuple((m, td) for m, td in self.monitors)
        )


def _random_mac(rng: random.Random) -> str:
    raw = rng.getrandbits(48).to_bytes(6, "big")
    return ":".join(f"{b:02x}" for b in raw)


def simulate_walkby(scenario: WalkByScenario) -> list[RawProbeRecord]:
    """Generate the probe records a monitor chain would capture.

    Every random draw happens in a fixed order regardless of the detection
    probability, so a seed reproduces the same stream bit for bit.
    """
    rng = random.Random(scenario.rng_seed)
    spread_ms = int(scenario.arrival_spread / timedelta(milliseconds=1))
    interval_ms = int(scenario.probe_interval / timedelta(milliseconds=1))
    start = to_ms(scenario.start)
    seen: set[str] = set()
    records: list[RawProbeRecord] = []

    for _ in range(scenario.device_count):
        mac = _random_mac(rng)
        while mac in seen:
            mac = _random_mac(rng)
        seen.add(mac)
        at = start + timedelta(milliseconds=rng.randint(0, max(spread_ms, 0)))
        for i, (monitor_id, travel) in enumerate(scenario.monitors):
            if i:
                at = at + travel
            for k in range(scenario.probes_per_device):
                jitter = rng.randint(0, max(interval_ms // 4, 0))
                detected = rng.random() < scenario.detection_probability
                if detected:
                    ts = at + timedelta(milliseconds=k * interval_ms + jitter)
                    records.append(
                        RawProbeRecord(
                            mac=mac,
                            monitor_id=monitor_id,
                            ts=ts,
                            rssi=-40 - rng.randint(0, 50),
                        )
                    )
                else:
                    # keep the draw count independent of the outcome
                    rng.randint(0, 50)
            at = at + timedelta(milliseconds=(scenario.probes_per_device - 1) * interval_ms)

    records.sort(key=lambda r: (r.ts, r.monitor_id, r.mac))
    return records


def detected_fraction(
    records: Iterable[RawProbeRecord], scenario: WalkByScenario, per: str = "probe"
) -> float:
    """Share of emitted probes (``per="probe"``) or walking devices (``per="device"``)
    that ended up in ``records``."""
    records = list(records)
    if per == "probe":
        emitted = scenario.device_count * scenario.probes_per_device * len(scenario.monitors)
        return len(records) / emitted
    if per == "device":
        return len({r.mac for r in records}) / scenario.device_count
    raise ValueError("per must be 'probe' or 'device'")
