"""Monitors, topics, messages and push subscriptions.

A subscription binds a push registration id to a hashed device id and a set
of topics. Raw hardware addresses never reach this module; callers hash them
first (see :func:`proxicast.wire_capture.anonymize`).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Callable, Iterable

from .clock import SystemClock, format_ts, parse_ts
from .errors import (
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
from .wire_capture import DeviceId, is_device_id

MAX_PAYLOAD = 4096


@dataclass(frozen=True)
class Topic:
    topic_id: str
    location_id: str
    title: str
    admin_id: str

    def to_dict(self) -> dict:
        return {
            "topic_id": self.topic_id,
            "location_id": self.location_id,
            "title": self.title,
            "admin_id": self.admin_id,
        }


@dataclass(frozen=True)
class Message:
    message_id: str
    topic_id: str
    payload: bytes
    created_ts: datetime
    delivery_policy_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "message_id": self.message_id,
            "topic_id": self.topic_id,
            "payload_hex": self.payload.hex(),
            "created_ts": format_ts(self.created_ts),
            "delivery_policy_id": self.delivery_policy_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Message:
        return cls(
            message_id=d["message_id"],
            topic_id=d["topic_id"],
            payload=bytes.fromhex(d["payload_hex"]),
            created_ts=parse_ts(d["created_ts"]),
            delivery_policy_id=d.get("delivery_policy_id"),
        )


@dataclass(frozen=True)
class SubscriptionRecord:
    registration_id: str
    device: DeviceId
    topic_ids: frozenset[str]
    active: bool
    created_ts: datetime

    def to_dict(self) -> dict:
        return {
            "registration_id": self.registration_id,
            "device": self.device,
            "topic_ids": sorted(self.topic_ids),
            "active": self.active,
            "created_ts": format_ts(self.created_ts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SubscriptionRecord:
        return cls(
            registration_id=d["registration_id"],
            device=DeviceId(d["device"]),
            topic_ids=frozenset(d["topic_ids"]),
            active=d["active"],
            created_ts=parse_ts(d["created_ts"]),
        )


def check_payload(payload: bytes) -> bytes:
    if not isinstance(payload, (bytes, bytearray)):
        raise TypeError("payload must be bytes")
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload is {len(payload)} bytes, limit is {MAX_PAYLOAD}")
    return bytes(payload)


@dataclass
class _Listeners:
    message_deleted: list[Callable[[str], None]] = field(default_factory=list)
    subscription_gone: list[Callable[[str], None]] = field(default_factory=list)
    subscription_paused: list[Callable[[str], None]] = field(default_factory=list)


class Registry:
    def __init__(self, clock: Callable[[], datetime] | None = None):
        self.clock = clock or SystemClock()
        self.monitors: dict[str, str] = {}
        self._topics: dict[str, Topic] = {}
        self._messages: dict[str, Message] = {}
        self._subs: dict[str, SubscriptionRecord] = {}
        self.listeners = _Listeners()
        self._lock = threading.RLock()

    # -- monitors ------------------------------------------------------------

    def register_monitor(self, monitor_id: str, location_id: str) -> None:
        if not monitor_id or not location_id:
            raise ProxicastError("monitor_id and location_id must be non-empty")
        with self._lock:
            self.monitors[monitor_id] = location_id

    def locations(self) -> set[str]:
        with self._lock:
            return set(self.monitors.values())

    # -- topics --------------------------------------------------------------

    def create_topic(self, topic_id: str, location_id: str, title: str, admin_id: str) -> Topic:
        with self._lock:
            if topic_id in self._topics:
                raise Conflict(f"topic {topic_id!r} already exists")
            return self.put_topic(topic_id, location_id, title, admin_id)

    def put_topic(self, topic_id: str, location_id: str, title: str, admin_id: str) -> Topic:
        """Create or replace a topic. Replacing requires the same admin."""
        if not topic_id or not admin_id:
            raise ProxicastError("topic_id and admin_id must be non-empty")
        with self._lock:
            if location_id not in self.locations():
                raise UnknownLocation(f"location {location_id!r} has no monitor")
            old = self._topics.get(topic_id)
            if old is not None and old.admin_id != admin_id:
                raise NotAuthorized("only the topic admin may edit a topic")
            topic = Topic(topic_id, location_id, title, admin_id)
            self._topics[topic_id] = topic
            return topic

    def get_topic(self, topic_id: str) -> Topic:
        with self._lock:
            try:
                return self._topics[topic_id]
            except KeyError:
                raise UnknownTopic(f"unknown topic {topic_id!r}") from None

    def has_topic(self, topic_id: str) -> bool:
        return topic_id in self._topics

    def topics(self) -> list[Topic]:
        with self._lock:
            return [self._topics[k] for k in sorted(self._topics)]

    def topics_at(self, location_id: str) -> list[Topic]:
        return [t for t in self.topics() if t.location_id == location_id]

    def delete_topic(self, topic_id: str, admin_id: str) -> None:
        """Delete a topic and its messages. Refused while subscriptions reference it."""
        with self._lock:
            topic = self.get_topic(topic_id)
            if topic.admin_id != admin_id:
                raise NotAuthorized("only the topic admin may delete a topic")
            if any(topic_id in s.topic_ids for s in self._subs.values()):
                raise Conflict(f"topic {topic_id!r} still has subscribers")
            for m in self.list_messages(topic_id):
                self.delete_message(m.message_id, admin_id)
            del self._topics[topic_id]

    # -- messages ------------------------------------------------------------

    def _check_admin(self, topic_id: str, admin_id: str) -> Topic:
        topic = self.get_topic(topic_id)
        if topic.admin_id != admin_id:
            raise NotAuthorized("caller is not the topic admin")
        return topic

    def put_message(
        self,
        topic_id: str,
        message_id: str,
        payload: bytes,
        admin_id: str,
        delivery_policy_id: str | None = None,
    ) -> Message:
        with self._lock:
            self._check_admin(topic_id, admin_id)
            payload = check_payload(payload)
            if not message_id:
                raise ProxicastError("message_id must be non-empty")
            if message_id in self._messages:
                raise Conflict(f"message {message_id!r} already exists")
            msg = Message(message_id, topic_id, payload, self.clock(), delivery_policy_id)
            self._messages[message_id] = msg
            return msg

    def edit_message(
        self,
        message_id: str,
        payload: bytes,
        admin_id: str,
        delivery_policy_id: str | None = None,
    ) -> Message:
        with self._lock:
            old = self.get_message(message_id)
            self._check_admin(old.topic_id, admin_id)
            msg = replace(
                old, payload=check_payload(payload), delivery_policy_id=delivery_policy_id
            )
            self._messages[message_id] = msg
            return msg

    def delete_message(self, message_id: str, admin_id: str) -> None:
        with self._lock:
            msg = self.get_message(message_id)
            self._check_admin(msg.topic_id, admin_id)
            del self._messages[message_id]
        for cb in self.listeners.message_deleted:
            cb(message_id)

    def get_message(self, message_id: str) -> Message:
        with self._lock:
            try:
                return self._messages[message_id]
            except KeyError:
                raise UnknownMessage(f"unknown message {message_id!r}") from None

    def find_message(self, message_id: str) -> Message | None:
        return self._messages.get(message_id)

    def list_messages(self, topic_id: str) -> list[Message]:
        with self._lock:
            self.get_topic(topic_id)
            return [
                self._messages[k]
                for k in sorted(self._messages)
                if self._messages[k].topic_id == topic_id
            ]

    # -- subscriptions -------------------------------------------------------

    def subscribe(
        self, registration_id: str, device: str, topic_ids: Iterable[str]
    ) -> SubscriptionRecord:
        if not registration_id or not isinstance(registration_id, str):
            raise ProxicastError("registration_id must be a non-empty string")
        if not is_device_id(device):
            raise ProxicastError("device must be a hashed device id")
        topics = frozenset(topic_ids)
        if not topics:
            raise EmptyTopicSet("at least one topic is required")
        with self._lock:
            for t in sorted(topics):
                self.get_topic(t)
            old = self._subs.get(registration_id)
            created = old.created_ts if old is not None else self.clock()
            rec = SubscriptionRecord(registration_id, DeviceId(device), topics, True, created)
            self._subs[registration_id] = rec
            return rec

    def unsubscribe(self, registration_id: str) -> SubscriptionRecord:
        with self._lock:
            rec = self.get_subscription(registration_id)
            del self._subs[registration_id]
        for cb in self.listeners.subscription_gone:
            cb(registration_id)
        return rec

    def set_active(self, registration_id: str, active: bool) -> SubscriptionRecord:
        with self._lock:
            rec = replace(self.get_subscription(registration_id), active=bool(active))
            self._subs[registration_id] = rec
        if not rec.active:
            for cb in self.listeners.subscription_paused:
                cb(registration_id)
        return rec

    def get_subscription(self, registration_id: str) -> SubscriptionRecord:
        with self._lock:
            try:
                return self._subs[registration_id]
            except KeyError:
                raise UnknownRegistration(f"unknown registration {registration_id!r}") from None

    def find_subscription(self, registration_id: str) -> SubscriptionRecord | None:
        return self._subs.get(registration_id)

    def subscriptions(self) -> list[SubscriptionRecord]:
        with self._lock:
            return [self._subs[k] for k in sorted(self._subs)]

    def active_registrations(self, device: str, topic_id: str) -> list[SubscriptionRecord]:
        with self._lock:
            return [
                s
                for s in self.subscriptions()
                if s.active and s.device == device and topic_id in s.topic_ids
            ]

    def is_subscribed(self, device: str, topic_id: str) -> bool:
        with self._lock:
            return any(
                s.active and s.device == device and topic_id in s.topic_ids
                for s in self._subs.values()
            )

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "monitors": dict(sorted(self.monitors.items())),
                "topics": [t.to_dict() for t in self.topics()],
                "messages": [self._messages[k].to_dict() for k in sorted(self._messages)],
                "subscriptions": [s.to_dict() for s in self.subscriptions()],
            }

    def load_dict(self, d: dict) -> None:
        with self._lock:
            self.monitors = dict(d.get("monitors", {}))
            self._topics = {t["topic_id"]: Topic(**t) for t in d.get("topics", [])}
            self._messages = {
                m["message_id"]: Message.from_dict(m) for m in d.get("messages", [])
            }
            self._subs = {
                s["registration_id"]: SubscriptionRecord.from_dict(s)
                for s in d.get("subscriptions", [])
            }
