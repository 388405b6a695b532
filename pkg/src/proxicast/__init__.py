"""Proximity messaging driven by passive Wi-Fi probe detection."""

from .analytics import dwell_distribution, hits_report, resident_visitor_split, routes_report
from .dispatch import DeliveryPolicy, Dispatcher, MockPushBackend
from .engine import Engine, FiredRule, build_network
from .presence import IntervalCode, PresenceClock, PresenceStore, Visit
from .registry import Registry
from .ruledsl import parse_rule, pretty_print, validate
from .wire_capture import (
    ProbeEvent,
    RawProbeRecord,
    WalkByScenario,
    anonymize,
    ingest,
    parse_probe_record,
    simulate_walkby,
)

__version__ = "0.1.0"

__all__ = [
    "DeliveryPolicy",
    "Dispatcher",
    "Engine",
    "FiredRule",
    "IntervalCode",
    "MockPushBackend",
    "PresenceClock",
    "PresenceStore",
    "ProbeEvent",
    "RawProbeRecord",
    "Registry",
    "Visit",
    "WalkByScenario",
    "anonymize",
    "build_network",
    "dwell_distribution",
    "hits_report",
    "ingest",
    "parse_probe_record",
    "parse_rule",
    "pretty_print",
    "resident_visitor_split",
    "routes_report",
    "simulate_walkby",
    "validate",
]
