"""Factories shared by the test modules."""

from __future__ import annotations

import random
from datetime import datetime, timedelta

from proxicast.clock import UTC
from proxicast.ruledsl import BoolOp, Comparison, FunctionCall
from proxicast.wire_capture import ProbeEvent, anonymize

SALT = b"test-salt"
T0 = datetime(2013, 4, 1, 12, 0, tzinfo=UTC)
G = timedelta(minutes=30)
W = timedelta(minutes=5)


def mac_for(i: int) -> str:
    raw = (0x02_00_00_00_00_00 + i).to_bytes(6, "big")
    return ":".join(f"{b:02x}" for b in raw)


def dev(i: int) -> str:
    return anonymize(mac_for(i), SALT)


def event(device: str, location: str, ts: datetime, monitor: str = "m1") -> ProbeEvent:
    return ProbeEvent(device=device, monitor_id=monitor, location_id=location, ts=ts)


def to_oracle(node):
    """Package AST -> nested tuples understood by oracles.eval_condition."""
    if isinstance(node, BoolOp):
        if node.op == "NOT":
            return ("NOT", to_oracle(node.children[0]))
        return (node.op, [to_oracle(c) for c in node.children])
    if isinstance(node, Comparison):
        return ("CMP", node.lhs.args[0], node.op, node.rhs)
    return ("FN", node.name, node.args[0])


RELOPS = (">", ">=", "<", "<=", "==", "!=")


def random_atom(rng: random.Random, topics=("t1",)):
    k = rng.randrange(5)
    if k == 0:
        return Comparison(FunctionCall("COUNTER", (rng.randrange(4),)), rng.choice(RELOPS), rng.randrange(4))
    if k == 1:
        return FunctionCall("FIRST", (rng.randrange(4),))
    if k == 2:
        return FunctionCall("IN_PLACE", (rng.choice((1, 5, 10)),))
    if k == 3:
        return FunctionCall("IN_GROUP_OF", (rng.randint(1, 3),))
    return FunctionCall("SUBSCRIBED_TO", (rng.choice(topics),))


def random_condition(rng: random.Random, depth: int = 3, topics=("t1",)):
    if depth == 0 or rng.random() < 0.35:
        return random_atom(rng, topics)
    op = rng.choice(("AND", "OR", "NOT"))
    if op == "NOT":
        return BoolOp("NOT", (random_condition(rng, depth - 1, topics),))
    n = rng.randint(2, 3)
    return BoolOp(op, tuple(random_condition(rng, depth - 1, topics) for _ in range(n)))


class CountingPresence:
    """Wraps a PresenceStore and counts predicate queries."""

    QUERIES = ("counter", "is_first", "in_place", "group_size")

    def __init__(self, store):
        self.store = store
        self.calls = 0

    def __getattr__(self, name):
        attr = getattr(self.store, name)
        if name not in self.QUERIES:
            return attr

        def counted(*a, **kw):
            self.calls += 1
            return attr(*a, **kw)

        return counted


def run_engine(events, rules, topics, subs, *, share=True, gap=G, window=W):
    """Feed events through a fresh store and engine.

    ``topics`` maps topic_id -> location, ``subs`` is a set of (device, topic_id).
    Returns (Counter of fired tuples, presence query count).
    """
    from collections import Counter

    from proxicast.engine import Engine
    from proxicast.presence import PresenceStore
    from proxicast.registry import Registry

    reg = Registry(lambda: T0)
    for loc in sorted(set(topics.values())):
        reg.register_monitor(f"m-{loc}", loc)
    for t, loc in sorted(topics.items()):
        reg.put_topic(t, loc, "", "admin")
    for i, (d, t) in enumerate(sorted(subs)):
        reg.subscribe(f"reg-{i}", d, [t])
    presence = CountingPresence(PresenceStore(gap))
    engine = Engine(presence, reg, group_window=window, share_atoms=share)
    engine.set_rules(rules)
    fired = Counter()
    for e in events:
        presence.store.sessionize(e)
        for f in engine.on_detection(e):
            fired[(f.rule_id, f.device, f.topic_id, f.message_id, f.fired_ts)] += 1
    return fired, presence.calls


def random_case(rng: random.Random, max_rules=10, max_events=500, in_order=False):
    """A random (events, rules, topics, subs) engine workload."""
    from proxicast.ruledsl import RuleAst

    topics = {"t1": "A", "t2": "A", "t3": "B"}
    devices = [dev(i) for i in range(rng.randint(1, 5))]
    subs = {(d, t) for d in devices for t in topics if rng.random() < 0.6}
    rules = [
        RuleAst(
            random_condition(rng, 3, tuple(topics)),
            f"msg-{k}",
            rule_id=f"r{k:02d}",
            topic_id=rng.choice(tuple(topics)),
        )
        for k in range(rng.randint(1, max_rules))
    ]
    n = rng.randint(1, max_events)
    span = rng.choice((60 * 6, 60 * 24 * 3, 60 * 24 * 40))
    events = [
        event(rng.choice(devices), rng.choice(("A", "B")), T0 + timedelta(minutes=rng.randrange(span), seconds=rng.randrange(60)))
        for _ in range(n)
    ]
    if in_order:
        events.sort(key=lambda e: e.ts)
    return events, rules, topics, subs
