import json
from datetime import datetime, timedelta

import pytest

from helpers import SALT, mac_for
from proxicast.cli import main
from proxicast.clock import UTC, format_ts
from proxicast.gateway.service import Service, ServiceConfig

WORKED = 'IF COUNTER(3)>2 AND FIRST(2) THEN { deliver "coupon" }'


@pytest.fixture
def salted(monkeypatch):
    monkeypatch.setenv("PROXICAST_SALT", SALT.decode())


def test_simulate_ingest_report(tmp_path, salted, capsys):
    raw, events = tmp_path / "raw.jsonl", tmp_path / "events.jsonl"
    assert main(["simulate", "--devices", "200", "--probes", "2", "--seed", "3", "--monitors", "m1:0,m2:60", "--out", str(raw)]) == 0
    assert "detected fraction" in capsys.readouterr().err
    assert main(["ingest", "--log", str(raw), "--monitor", "m1=gate", "--monitor", "m2=hall", "--out", str(events)]) == 0
    n_raw = len(raw.read_text().splitlines())
    assert len(events.read_text().splitlines()) == n_raw
    text = events.read_text()
    assert not any(json.loads(line)["mac"] in text for line in raw.read_text().splitlines())

    out = tmp_path / "hits.csv"
    args = ["report", "hits", "--log", str(events), "--location", "gate", "--start", "2013-04-01T12:00:00Z", "--end", "2013-04-01T14:00:00Z", "--format", "csv", "--out", str(out)]
    assert main(args) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "bucket_start,bucket_width_s,unique_devices,total_probes"
    assert len(rows) == 3
    assert main(["report", "routes", "--log", str(events), "--distance", "m1:m2:80"]) == 0
    routes = json.loads(capsys.readouterr().out)
    assert routes and all(r["implied_speed"] is not None for r in routes)
    assert main(["report", "dwell", "--log", str(events), "--location", "gate"]) == 0
    assert main(["report", "split", "--log", str(events), "--location", "gate", "--end-day", "2013-04-01"]) == 0
    assert main(["report", "split", "--log", str(events)]) == 1


def test_ingest_reports_bad_lines(tmp_path, salted, capsys):
    raw = tmp_path / "raw.jsonl"
    raw.write_text(
        json.dumps({"mac": mac_for(1), "monitor_id": "m1", "ts": "2013-04-01T12:00:00Z"}) + "\n"
        + json.dumps({"mac": mac_for(2), "monitor_id": "m7", "ts": "2013-04-01T12:00:00Z"}) + "\n"
    )
    assert main(["ingest", "--log", str(raw), "--monitor", "m1=gate"]) == 1
    cap = capsys.readouterr()
    assert "line 2: UnknownMonitor" in cap.err
    assert json.loads(cap.out)["location_id"] == "gate"


def test_ingest_needs_salt(tmp_path, monkeypatch):
    monkeypatch.delenv("PROXICAST_SALT", raising=False)
    raw = tmp_path / "raw.jsonl"
    raw.write_text("")
    assert main(["ingest", "--log", str(raw), "--monitor", "m1=gate"]) == 1


def test_rules_check(tmp_path, capsys):
    good, bad = tmp_path / "good.rule", tmp_path / "bad.rule"
    good.write_text(WORKED)
    bad.write_text('IF COUNTER(7) > 1 THEN { deliver "x" }')
    assert main(["rules", "check", "--file", str(good)]) == 0
    assert capsys.readouterr().out.strip() == 'IF ((COUNTER(3) > 2) AND FIRST(2)) THEN { deliver "coupon" }'
    assert main(["rules", "check", "--file", str(bad)]) == 1
    assert "IntervalCodeError" in capsys.readouterr().err


def _store(path):
    svc = Service(ServiceConfig(storage_path=path), salt=SALT, clock=lambda: datetime(2013, 4, 1, tzinfo=UTC))
    svc.register_monitor("m1", "cafe")
    svc.create_topic("t1", "cafe", "", "alice")
    svc.put_message("t1", b"10% off", "alice", "coupon")
    return svc


def test_rules_add_persists(tmp_path, capsys):
    store = tmp_path / "store"
    _store(store)
    rule = tmp_path / "r.rule"
    rule.write_text(WORKED)
    assert main(["rules", "add", "--topic", "t1", "--file", str(rule), "--store", str(store), "--admin", "alice"]) == 0
    assert json.loads(capsys.readouterr().out)["rule_id"] == "t1-r1"
    assert main(["rules", "check", "--file", str(rule), "--topic", "t1", "--store", str(store)]) == 0
    assert main(["rules", "add", "--topic", "t1", "--file", str(rule), "--store", str(store), "--admin", "bob"]) == 1


def test_replay_is_deterministic(tmp_path):
    rules = tmp_path / "rules" / "t1"
    rules.mkdir(parents=True)
    (rules / "coupon-rule.rule").write_text(WORKED)
    detections = [
        {"mac": mac_for(1), "monitor_id": "m1", "ts": format_ts(datetime(2013, 4, d, 12, tzinfo=UTC) + timedelta(minutes=m))}
        for d in (3, 10, 17)
        for m in (0, 3)
    ]
    setup = {
        "start": "2013-04-01T00:00:00Z",
        "monitors": {"m1": "cafe"},
        "topics": [{"topic_id": "t1", "location_id": "cafe", "admin_id": "alice"}],
        "policies": {"p": {"repeat_count": 2, "repeat_interval_s": 600}},
        "messages": [{"topic_id": "t1", "message_id": "coupon", "payload": "10% off", "admin_id": "alice", "policy_id": "p"}],
        "subscriptions": [{"registration_id": "gcm-1", "topic_ids": ["t1"], "mac": mac_for(1)}],
        "detections": detections,
        "until": "2013-04-18T00:00:00Z",
    }
    (tmp_path / "setup.json").write_text(json.dumps(setup))
    outputs = []
    for run in range(2):
        fired, delivered = tmp_path / f"fired{run}.jsonl", tmp_path / f"delivered{run}.jsonl"
        args = ["replay", "--setup", str(tmp_path / "setup.json"), "--rules", str(tmp_path / "rules"), "--out", str(fired), "--delivered", str(delivered)]
        assert main(args) == 0
        outputs.append((fired.read_bytes(), delivered.read_bytes()))
    assert outputs[0] == outputs[1]
    fired_lines = outputs[0][0].decode().splitlines()
    assert [json.loads(x)["rule_id"] for x in fired_lines] == ["coupon-rule"]
    delivered_lines = [json.loads(x) for x in outputs[0][1].decode().splitlines()]
    assert [d["ts"] for d in delivered_lines] == ["2013-04-17T12:00:00.000Z", "2013-04-17T12:10:00.000Z"]
