"""Clock sources and timestamp helpers.

All time-dependent code reads "now" from a clock object so tests can script
time. Timestamps are timezone-aware UTC datetimes at millisecond precision.
"""

from __future__ import annotations

import re
import threading
from datetime import datetime, timedelta, timezone

UTC = timezone.utc


def to_ms(ts: datetime) -> datetime:
    """Normalize to UTC and truncate below the millisecond."""
    ts = ts.astimezone(UTC)
    return ts.replace(microsecond=ts.microsecond - ts.microsecond % 1000)


_RFC3339 = re.compile(
    r"(\d{4}-\d{2}-\d{2})[Tt ](\d{2}:\d{2}:\d{2})(?:\.(\d+))?([Zz]|[+-]\d{2}:\d{2})"
)


def parse_ts(text: str) -> datetime:
    """Parse an RFC3339 timestamp. Raises ValueError on bad input or a missing offset."""
    if not isinstance(text, str):
        raise ValueError("timestamp must be a string")
    m = _RFC3339.fullmatch(text.strip())
    if m is None:
        raise ValueError(f"not an RFC3339 timestamp: {text!r}")
    date, clock, frac, offset = m.groups()
    frac = ((frac or "") + "000000")[:6]
    if offset in ("Z", "z"):
        offset = "+00:00"
    return to_ms(datetime.fromisoformat(f"{date}T{clock}.{frac}{offset}"))


def format_ts(ts: datetime) -> str:
    ts = ts.astimezone(UTC)
    return ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


class SystemClock:
    def __call__(self) -> datetime:
        return to_ms(datetime.now(UTC))


class ScriptedClock:
    """A clock that only moves when told to."""

    def __init__(self, start: datetime):
        self._now = to_ms(start)
        self._lock = threading.Lock()

    def __call__(self) -> datetime:
        with self._lock:
            return self._now

    def set(self, ts: datetime) -> None:
        with self._lock:
            self._now = to_ms(ts)

    def advance(self, delta: timedelta) -> datetime:
        with self._lock:
            self._now = self._now + delta
            return self._now
