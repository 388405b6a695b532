from datetime import datetime, timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import G, T0, W, dev, event
from proxicast.clock import UTC
from proxicast.errors import NoCurrentVisit
from proxicast.presence import IntervalCode, PresenceClock, PresenceStore

D1, D2, D3 = dev(1), dev(2), dev(3)


def store_with(*events, gap=G):
    s = PresenceStore(gap)
    for e in events:
        s.sessionize(e)
    return s


def test_gap_boundary_is_inclusive():
    s = store_with(event(D1, "L", T0), event(D1, "L", T0 + G))
    assert len(s.visits()) == 1
    s = store_with(event(D1, "L", T0), event(D1, "L", T0 + G + timedelta(milliseconds=1)))
    assert len(s.visits()) == 2


def test_out_of_order_event_bridges_two_visits():
    s = store_with(
        event(D1, "L", T0),
        event(D1, "L", T0 + timedelta(minutes=50)),
        event(D1, "L", T0 + timedelta(minutes=25)),
    )
    (v,) = s.visits()
    assert (v.start_ts, v.end_ts, v.probe_count) == (T0, T0 + timedelta(minutes=50), 3)
    assert v.visit_id == 1


def test_locations_and_devices_are_separate():
    s = store_with(event(D1, "A", T0), event(D1, "B", T0), event(D2, "A", T0))
    assert len(s.visits()) == 3
    assert len(s.visits(device=D1)) == 2
    assert len(s.visits(location="A")) == 2


def test_interval_bounds_in_local_time():
    now = datetime(2013, 4, 17, 1, 30, tzinfo=UTC)  # Wednesday
    c = PresenceClock(now, "Europe/Moscow")
    day = c.interval_bounds(IntervalCode.DAY)
    assert day == (datetime(2013, 4, 16, 20, tzinfo=UTC), datetime(2013, 4, 17, 20, tzinfo=UTC))
    week = c.interval_bounds(IntervalCode.WEEK)
    assert week[0] == datetime(2013, 4, 14, 20, tzinfo=UTC)
    month = c.interval_bounds(IntervalCode.MONTH)
    assert month == (datetime(2013, 3, 31, 20, tzinfo=UTC), datetime(2013, 4, 30, 20, tzinfo=UTC))
    assert c.interval_bounds(IntervalCode.ALL_TIME) is None
    sunday_weeks = PresenceClock(now, "UTC", week_start=6)
    assert sunday_weeks.interval_bounds(2)[0] == datetime(2013, 4, 14, tzinfo=UTC)


def test_bad_clock_arguments():
    with pytest.raises(ValueError):
        PresenceClock(T0, week_start=7)
    with pytest.raises(Exception):
        PresenceClock(T0, "Not/AZone")
    with pytest.raises(ValueError):
        PresenceStore(timedelta(0))


def test_worked_history_counts():
    days = [3, 10, 17]
    s = store_with(*(event(D1, "L", datetime(2013, 4, d, 12, tzinfo=UTC)) for d in days))
    c = PresenceClock(datetime(2013, 4, 17, 12, tzinfo=UTC))
    assert s.counter(D1, "L", 3, c) == 3
    assert s.counter(D1, "L", 2, c) == 1
    assert s.counter(D1, "L", 1, c) == 1
    assert s.is_first(D1, "L", 2, c)
    assert not s.is_first(D1, "L", 3, c)
    assert s.is_first(D1, "L", 1, c)


def test_is_first_needs_a_current_visit():
    s = store_with(event(D1, "L", T0))
    with pytest.raises(NoCurrentVisit):
        s.is_first(D1, "L", 0, PresenceClock(T0 + G + timedelta(seconds=1)))


def test_in_place_single_probe_is_false():
    s = store_with(event(D1, "L", T0))
    assert not s.in_place(D1, "L", 1, PresenceClock(T0))
    s.sessionize(event(D1, "L", T0 + timedelta(minutes=1)))
    assert s.in_place(D1, "L", 1, PresenceClock(T0 + timedelta(minutes=1)))
    with pytest.raises(ValueError):
        s.in_place(D1, "L", 0, PresenceClock(T0))


def test_group_size_window():
    s = store_with(
        event(D1, "L", T0),
        event(D2, "L", T0 + timedelta(minutes=3)),
        event(D3, "L", T0 + timedelta(minutes=6)),
        event(D3, "M", T0 + timedelta(minutes=6)),
    )
    assert s.group_size("L", W, PresenceClock(T0 + timedelta(minutes=5))) == 2
    assert s.group_size("L", W, PresenceClock(T0 + timedelta(minutes=6))) == 2
    assert s.group_size("L", W, PresenceClock(T0 + timedelta(minutes=8))) == 2
    assert s.group_size("nowhere", W, PresenceClock(T0)) == 0


def test_prune_drops_old_visits():
    s = store_with(event(D1, "L", T0), event(D1, "L", T0 + timedelta(days=2)))
    assert s.prune(T0 + timedelta(days=1)) == 1
    assert len(s.visits()) == 1


# -- properties against the linear-scan oracle -------------------------------------

offsets = st.integers(0, 60 * 24 * 70)  # minutes over ten weeks
histories = st.lists(
    st.tuples(st.sampled_from([1, 2, 3]), st.sampled_from(["A", "B"]), offsets), min_size=1, max_size=40
)


def _events(raw):
    return [event(dev(d), loc, T0 + timedelta(minutes=m)) for d, loc, m in raw]


@settings(max_examples=150, deadline=None)
@given(histories, st.randoms(use_true_random=False))
def test_visits_match_oracle_in_any_order(raw, rnd):
    evs = _events(raw)
    rnd.shuffle(evs)
    got = sorted(
        (v.device, v.location_id, v.start_ts, v.end_ts, v.probe_count)
        for v in store_with(*evs).visits()
    )
    tuples = [(e.device, e.location_id, e.monitor_id, e.ts) for e in evs]
    want = sorted((v.device, v.location, v.start, v.end, v.count) for v in oracles.all_visits(tuples, G))
    assert got == want


@settings(max_examples=150, deadline=None)
@given(
    histories,
    offsets,
    st.sampled_from(["UTC", "America/New_York", "Asia/Tokyo"]),
    st.integers(0, 6),
)
def test_predicates_match_oracle(raw, now_min, tz, week_start):
    evs = _events(raw)
    s = store_with(*evs)
    now = T0 + timedelta(minutes=now_min)
    clock = PresenceClock(now, tz, week_start)
    tuples = [(e.device, e.location_id, e.monitor_id, e.ts) for e in evs]
    for d in (dev(1), dev(2)):
        visits = oracles.visits_of(tuples, d, "A", G)
        for code in range(4):
            assert s.counter(d, "A", code, clock) == oracles.counter(visits, code, now, tz, week_start)
            want = oracles.is_first(visits, code, now, G, tz, week_start)
            if want is None:
                with pytest.raises(NoCurrentVisit):
                    s.is_first(d, "A", code, clock)
            else:
                assert s.is_first(d, "A", code, clock) == want
        for m in (1, 5, 30):
            assert s.in_place(d, "A", m, clock) == oracles.in_place(visits, m, now, G)
    assert s.group_size("A", W, clock) == oracles.group_size(tuples, "A", now, W)
