import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import T0, dev
from proxicast.errors import (
    Conflict,
    EmptyTopicSet,
    NotAuthorized,
    PayloadTooLarge,
    ProxicastError,
    UnknownLocation,
    UnknownMessage,
    UnknownRegistration,
    UnknownTopic,
)
from proxicast.registry import MAX_PAYLOAD, Registry


@pytest.fixture
def reg():
    r = Registry(lambda: T0)
    r.register_monitor("m1", "cafe")
    r.register_monitor("m2", "mall")
    r.put_topic("t1", "cafe", "Cafe deals", "alice")
    return r


def test_topic_crud(reg):
    assert reg.get_topic("t1").title == "Cafe deals"
    with pytest.raises(Conflict):
        reg.create_topic("t1", "cafe", "", "alice")
    with pytest.raises(UnknownLocation):
        reg.put_topic("t2", "nowhere", "", "alice")
    with pytest.raises(NotAuthorized):
        reg.put_topic("t1", "cafe", "", "mallory")
    reg.put_topic("t1", "mall", "moved", "alice")
    assert [t.topic_id for t in reg.topics_at("mall")] == ["t1"]
    with pytest.raises(UnknownTopic):
        reg.get_topic("t9")


def test_message_payload_limit(reg):
    reg.put_message("t1", "ok", b"x" * MAX_PAYLOAD, "alice")
    with pytest.raises(PayloadTooLarge):
        reg.put_message("t1", "big", b"x" * (MAX_PAYLOAD + 1), "alice")
    with pytest.raises(PayloadTooLarge):
        reg.edit_message("ok", b"x" * (MAX_PAYLOAD + 1), "alice")


def test_message_admin_checks(reg):
    with pytest.raises(NotAuthorized):
        reg.put_message("t1", "m", b"hi", "mallory")
    reg.put_message("t1", "m", b"hi", "alice")
    with pytest.raises(Conflict):
        reg.put_message("t1", "m", b"again", "alice")
    with pytest.raises(NotAuthorized):
        reg.delete_message("m", "mallory")
    reg.edit_message("m", b"bye", "alice", "p1")
    assert reg.get_message("m").payload == b"bye"
    assert reg.get_message("m").delivery_policy_id == "p1"


def test_delete_message_notifies(reg):
    seen = []
    reg.listeners.message_deleted.append(seen.append)
    reg.put_message("t1", "m", b"hi", "alice")
    reg.delete_message("m", "alice")
    assert seen == ["m"]
    with pytest.raises(UnknownMessage):
        reg.get_message("m")


def test_subscribe_replaces_and_keeps_created(reg):
    d = dev(1)
    first = reg.subscribe("gcm-1", d, ["t1"])
    reg.put_topic("t2", "mall", "", "bob")
    second = reg.subscribe("gcm-1", d, ["t1", "t2"])
    assert second.topic_ids == {"t1", "t2"}
    assert second.created_ts == first.created_ts
    assert reg.is_subscribed(d, "t2")
    assert [s.registration_id for s in reg.active_registrations(d, "t1")] == ["gcm-1"]


def test_subscribe_errors(reg):
    with pytest.raises(EmptyTopicSet):
        reg.subscribe("gcm-1", dev(1), [])
    with pytest.raises(UnknownTopic):
        reg.subscribe("gcm-1", dev(1), ["ghost"])
    with pytest.raises(ProxicastError):
        reg.subscribe("gcm-1", "aa:bb:cc:dd:ee:ff", ["t1"])


def test_pause_and_unsubscribe_notify(reg):
    paused, gone = [], []
    reg.listeners.subscription_paused.append(paused.append)
    reg.listeners.subscription_gone.append(gone.append)
    reg.subscribe("gcm-1", dev(1), ["t1"])
    reg.set_active("gcm-1", False)
    assert not reg.is_subscribed(dev(1), "t1")
    reg.set_active("gcm-1", True)
    assert reg.is_subscribed(dev(1), "t1")
    reg.unsubscribe("gcm-1")
    assert (paused, gone) == (["gcm-1"], ["gcm-1"])
    with pytest.raises(UnknownRegistration):
        reg.unsubscribe("gcm-1")


def test_delete_topic_with_subscribers_conflicts(reg):
    reg.put_message("t1", "m", b"hi", "alice")
    reg.subscribe("gcm-1", dev(1), ["t1"])
    with pytest.raises(Conflict):
        reg.delete_topic("t1", "alice")
    reg.unsubscribe("gcm-1")
    reg.delete_topic("t1", "alice")
    assert reg.find_message("m") is None


def test_persistence_round_trip(reg):
    reg.put_message("t1", "m", b"\x00\xffhi", "alice", "p")
    reg.subscribe("gcm-1", dev(1), ["t1"])
    reg.set_active("gcm-1", False)
    copy = Registry(lambda: T0)
    copy.load_dict(reg.to_dict())
    assert copy.to_dict() == reg.to_dict()


@given(st.binary(max_size=MAX_PAYLOAD + 8))
def test_payload_limit_property(payload):
    r = Registry(lambda: T0)
    r.register_monitor("m1", "cafe")
    r.put_topic("t", "cafe", "", "a")
    if len(payload) <= MAX_PAYLOAD:
        assert r.put_message("t", "m", payload, "a").payload == payload
    else:
        with pytest.raises(PayloadTooLarge):
            r.put_message("t", "m", payload, "a")
