"""Slow, obviously-correct reference implementations used only by tests.

Nothing here imports the package's algorithms. Everything is a linear scan
over plain tuples so a disagreement points at the optimized code.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from datetime import date, datetime, timedelta
from zoneinfo import ZoneInfo

# An event is (device, location, monitor, ts).


@dataclass
class OVisit:
    device: str
    location: str
    start: datetime
    end: datetime
    count: int


def visits_of(events, device, location, gap):
    ts = sorted(e[3] for e in events if e[0] == device and e[1] == location)
    out: list[OVisit] = []
    for t in ts:
        if out and t - out[-1].end <= gap:
            out[-1].end = t
            out[-1].count += 1
        else:
            out.append(OVisit(device, location, t, t, 1))
    return out


def all_visits(events, gap):
    keys = sorted({(e[0], e[1]) for e in events})
    out = []
    for d, loc in keys:
        out.extend(visits_of(events, d, loc, gap))
    return out


def same_interval(code, ts, now, tz_name="UTC", week_start=0):
    if code == 0:
        return True
    tz = ZoneInfo(tz_name)
    a, b = ts.astimezone(tz).date(), now.astimezone(tz).date()
    if code == 1:
        return a == b
    if code == 2:
        def week(d: date) -> date:
            return d - timedelta(days=(d.weekday() - week_start) % 7)

        return week(a) == week(b)
    return (a.year, a.month) == (b.year, b.month)


def current_visit(visits, now, gap):
    best = None
    for v in visits:
        if v.start <= now and now - v.end <= gap:
            if best is None or v.start > best.start:
                best = v
    return best


def counter(visits, code, now, tz="UTC", week_start=0):
    return sum(1 for v in visits if same_interval(code, v.start, now, tz, week_start))


def is_first(visits, code, now, gap, tz="UTC", week_start=0):
    """None when there is no current visit."""
    cur = current_visit(visits, now, gap)
    if cur is None:
        return None
    if not same_interval(code, cur.start, now, tz, week_start):
        return False
    for v in visits:
        if v is not cur and v.start < cur.start and same_interval(code, v.start, now, tz, week_start):
            return False
    return True


def in_place(visits, minutes, now, gap):
    cur = current_visit(visits, now, gap)
    if cur is None or cur.count == 1:
        return False
    return (cur.end - cur.start) >= timedelta(minutes=minutes)


def group_size(events, location, now, window):
    return len({e[0] for e in events if e[1] == location and now - window <= e[3] <= now})


# -- rule evaluation --------------------------------------------------------------

RELOPS = {
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


def eval_condition(node, *, history, device, location, now, gap, window, subscribed, tz="UTC"):
    """Evaluate a condition given as nested tuples:

    ("AND", [..]) | ("OR", [..]) | ("NOT", x) | ("CMP", code, op, k) | ("FN", name, arg)
    """
    kind = node[0]
    kw = dict(
        history=history, device=device, location=location, now=now, gap=gap,
        window=window, subscribed=subscribed, tz=tz,
    )
    if kind == "AND":
        return all(eval_condition(c, **kw) for c in node[1])
    if kind == "OR":
        return any(eval_condition(c, **kw) for c in node[1])
    if kind == "NOT":
        return not eval_condition(node[1], **kw)
    visits = visits_of(history, device, location, gap)
    if kind == "CMP":
        return RELOPS[node[2]](counter(visits, node[1], now, tz), node[3])
    name, arg = node[1], node[2]
    if name == "FIRST":
        return bool(is_first(visits, arg, now, gap, tz))
    if name == "IN_PLACE":
        return in_place(visits, arg, now, gap)
    if name == "IN_GROUP_OF":
        return group_size(history, location, now, window) >= arg
    if name == "SUBSCRIBED_TO":
        return (device, arg) in subscribed
    raise ValueError(name)


def fired_rules(events, rules, topics, subscribed, *, gap, window, tz="UTC"):
    """Reference firing for an in-order event stream.

    ``rules`` are (rule_id, topic_id, message_id, condition tuple), ``topics``
    maps topic_id -> location, ``subscribed`` is a set of (device, topic_id).
    Returns a Counter of (rule_id, device, topic_id, message_id, ts).
    """
    events = sorted(events, key=lambda e: e[3])
    done = set()
    out = Counter()
    for i, ev in enumerate(events):
        device, location, _, now = ev
        history = events[: i + 1]
        visits = visits_of(history, device, location, gap)
        cur = current_visit(visits, now, gap)
        for topic_id, loc in sorted(topics.items()):
            if loc != location or (device, topic_id) not in subscribed:
                continue
            for rule_id, rtopic, message_id, cond in sorted(rules):
                if rtopic != topic_id:
                    continue
                key = (rule_id, device, cur.start)
                if key in done:
                    continue
                if eval_condition(
                    cond, history=history, device=device, location=location, now=now,
                    gap=gap, window=window, subscribed=subscribed, tz=tz,
                ):
                    done.add(key)
                    out[(rule_id, device, topic_id, message_id, now)] += 1
    return out


# -- analytics ------------------------------------------------------------------------


def hits(events, location, width, start, end):
    out = []
    t = start
    while t < end:
        hi = min(t + width, end)
        sel = [e for e in events if e[1] == location and t <= e[3] < hi]
        out.append((t, len({e[0] for e in sel}), len(sel)))
        t += width
    return out


def split(events, location, window_days, min_days, end_day, tz="UTC"):
    z = ZoneInfo(tz)
    wanted = {end_day - timedelta(days=k) for k in range(window_days)}
    residents, visitors = set(), set()
    for d in {e[0] for e in events}:
        days = {e[3].astimezone(z).date() for e in events if e[0] == d and e[1] == location}
        days &= wanted
        if not days:
            continue
        (residents if len(days) >= min_days else visitors).add(d)
    return residents, visitors


def dwell(visits, location, granularity_min, start=None, end=None):
    bins: Counter = Counter()
    unmeasurable = 0
    for v in visits:
        if v.location != location:
            continue
        if start is not None and v.start < start:
            continue
        if end is not None and v.start >= end:
            continue
        if v.count == 1:
            unmeasurable += 1
            continue
        secs = (v.end - v.start).total_seconds()
        k = 0
        while (k + 1) * granularity_min * 60 <= secs:
            k += 1
        bins[k * granularity_min] += 1
    return dict(bins), unmeasurable


def routes(events, max_gap, distances):
    """Events carry the monitor at index 2."""
    out = []
    for d in sorted({e[0] for e in events}):
        seq = sorted((e for e in events if e[0] == d), key=lambda e: (e[3], e[2]))
        for i in range(len(seq) - 1):
            a, b = seq[i], seq[i + 1]
            if a[2] == b[2]:
                continue
            gap = b[3] - a[3]
            if gap > max_gap:
                continue
            dist = distances.get((a[2], b[2]), distances.get((b[2], a[2])))
            secs = gap.total_seconds()
            speed = dist / secs if dist is not None and secs > 0 else None
            out.append((d, a[2], b[2], a[3], b[3], speed))
    return out
