"""Rule evaluation on detection events.

Rules are compiled into a small Rete-style network: every distinct condition
atom (a comparison or a boolean built-in call) becomes one alpha node shared by
all rules that mention it, and each rule gets a leaf. Atoms are pulled from the
presence and registry stores on demand and memoized per evaluation cycle, so an
atom is computed at most once per (device, topic, cycle). Facts here are
scalars per (device, topic), which is why no join (beta) nodes are needed.
"""

from __future__ import annotations

import logging
import operator
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable, Protocol

from .clock import format_ts
from .presence import DEFAULT_GROUP_WINDOW, PresenceClock
from .registry import Topic
from .ruledsl import BoolOp, Comparison, Node, RuleAst, atoms
from .wire_capture import DeviceId, ProbeEvent

logger = logging.getLogger(__name__)

_RELOPS: dict[str, Callable[[int, int], bool]] = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
    "==": operator.eq,
    "!=": operator.ne,
}


class PresenceQueries(Protocol):
    def counter(self, device: str, location: str, interval: int, clock: PresenceClock) -> int: ...
    def is_first(self, device: str, location: str, interval: int, clock: PresenceClock) -> bool: ...
    def in_place(self, device: str, location: str, minutes: int, clock: PresenceClock) -> bool: ...
    def group_size(self, location: str, window: timedelta, clock: PresenceClock) -> int: ...
    def current_visit(self, device: str, location: str, now: datetime): ...


class SubscriptionQueries(Protocol):
    def is_subscribed(self, device: str, topic_id: str) -> bool: ...
    def topics_at(self, location_id: str) -> list[Topic]: ...


@dataclass(frozen=True)
class EvalContext:
    device: DeviceId
    topic: Topic
    clock: PresenceClock
    presence: PresenceQueries
    registry: SubscriptionQueries
    group_window: timedelta = DEFAULT_GROUP_WINDOW


@dataclass(frozen=True)
class FiredRule:
    rule_id: str
    device: DeviceId
    topic_id: str
    message_id: str
    fired_ts: datetime

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "device": self.device,
            "topic_id": self.topic_id,
            "message_id": self.message_id,
            "fired_ts": format_ts(self.fired_ts),
        }


def evaluate_atom(node: Node, ctx: EvalContext) -> bool:
    loc = ctx.topic.location_id
    if isinstance(node, Comparison):
        call = node.lhs
        value = ctx.presence.counter(ctx.device, loc, call.args[0], ctx.clock)
        return _RELOPS[node.op](value, node.rhs)
    name, (arg,) = node.name, node.args
    if name == "FIRST":
        return ctx.presence.is_first(ctx.device, loc, arg, ctx.clock)
    if name == "IN_PLACE":
        return ctx.presence.in_place(ctx.device, loc, arg, ctx.clock)
    if name == "IN_GROUP_OF":
        return ctx.presence.group_size(loc, ctx.group_window, ctx.clock) >= arg
    if name == "SUBSCRIBED_TO":
        return ctx.registry.is_subscribed(ctx.device, arg)
    raise ValueError(f"{name} is not a boolean atom")


def evaluate(
    condition: Node,
    ctx: EvalContext,
    atom: Callable[[Node, EvalContext], bool] = evaluate_atom,
) -> bool:
    """Strict left-to-right evaluation with short-circuit AND/OR."""
    if isinstance(condition, BoolOp):
        if condition.op == "NOT":
            return not evaluate(condition.children[0], ctx, atom)
        if condition.op == "AND":
            return all(evaluate(c, ctx, atom) for c in condition.children)
        if condition.op == "OR":
            return any(evaluate(c, ctx, atom) for c in condition.children)
        raise ValueError(f"unknown boolean operator {condition.op!r}")
    return atom(condition, ctx)


@dataclass
class AlphaNode:
    atom: Node
    leaves: list[str] = field(default_factory=list)
    # (device, topic_id) -> (cycle, value)
    memory: dict[tuple[str, str], tuple[int, bool]] = field(default_factory=dict)


@dataclass(frozen=True)
class LeafNode:
    rule: RuleAst


@dataclass
class RuleNetwork:
    alpha_nodes: dict[Node, AlphaNode]
    leaf_nodes: dict[str, LeafNode]

    def leaves_for(self, topic_id: str) -> list[LeafNode]:
        return [leaf for leaf in self.leaf_nodes.values() if leaf.rule.topic_id == topic_id]

    def atom_value(self, node: Node, ctx: EvalContext, cycle: int) -> bool:
        alpha = self.alpha_nodes[node]
        key = (ctx.device, ctx.topic.topic_id)
        hit = alpha.memory.get(key)
        if hit is not None and hit[0] == cycle:
            return hit[1]
        value = evaluate_atom(node, ctx)
        alpha.memory[key] = (cycle, value)
        return value


def build_network(rules: list[RuleAst]) -> RuleNetwork:
    """Compile rules into shared alpha nodes plus one leaf per rule.

    Leaves are ordered by rule id so evaluation order never depends on the
    order rules were added.
    """
    alpha: dict[Node, AlphaNode] = {}
    leaves: dict[str, LeafNode] = {}
    for rule in sorted(rules, key=lambda r: r.rule_id):
        if rule.rule_id in leaves:
            raise ValueError(f"duplicate rule id {rule.rule_id!r}")
        leaves[rule.rule_id] = LeafNode(rule)
        for a in atoms(rule.condition):
            node = alpha.setdefault(a, AlphaNode(a))
            if rule.rule_id not in node.leaves:
                node.leaves.append(rule.rule_id)
    return RuleNetwork(alpha, leaves)


class Engine:
    """Evaluates a topic's rules whenever one of its subscribers is detected.

    ``share_atoms=False`` evaluates every rule on its own, without the
    network's memo; it exists as the reference path for equivalence checks.
    """

    def __init__(
        self,
        presence: PresenceQueries,
        registry: SubscriptionQueries,
        *,
        timezone: str = "UTC",
        week_start: int = 0,
        group_window: timedelta = DEFAULT_GROUP_WINDOW,
        share_atoms: bool = True,
    ):
        self.presence = presence
        self.registry = registry
        self.timezone = timezone
        self.week_start = week_start
        self.group_window = group_window
        self.share_atoms = share_atoms
        self.network = build_network([])
        self._fired: set[tuple[str, str, int]] = set()
        self._cycle = 0
        self._lock = threading.RLock()

    @property
    def rules(self) -> list[RuleAst]:
        return [leaf.rule for leaf in self.network.leaf_nodes.values()]

    def set_rules(self, rules: list[RuleAst]) -> None:
        network = build_network(rules)
        with self._lock:
            self.network = network

    def add_rule(self, rule: RuleAst) -> None:
        others = [r for r in self.rules if r.rule_id != rule.rule_id]
        self.set_rules(others + [rule])

    def remove_rule(self, rule_id: str) -> None:
        self.set_rules([r for r in self.rules if r.rule_id != rule_id])

    def fired_keys(self) -> list[tuple[str, str, int]]:
        """(rule_id, device, visit_id) triples that already fired."""
        with self._lock:
            return sorted(self._fired)

    def restore_fired(self, keys) -> None:
        with self._lock:
            self._fired = {(r, d, int(v)) for r, d, v in keys}

    def on_detection(self, event: ProbeEvent) -> list[FiredRule]:
        with self._lock:
            self._cycle += 1
            cycle = self._cycle
            clock = PresenceClock(event.ts, self.timezone, self.week_start)
            fired: list[FiredRule] = []
            for topic in self.registry.topics_at(event.location_id):
                if not self.registry.is_subscribed(event.device, topic.topic_id):
                    continue
                visit = self.presence.current_visit(event.device, topic.location_id, event.ts)
                if visit is None:
                    logger.warning("detection without a current visit; was it sessionized?")
                    continue
                ctx = EvalContext(
                    event.device, topic, clock, self.presence, self.registry, self.group_window
                )
                if self.share_atoms:
                    def atom(node, c, _cycle=cycle):
                        return self.network.atom_value(node, c, _cycle)
                else:
                    atom = evaluate_atom
                for leaf in self.network.leaves_for(topic.topic_id):
                    rule = leaf.rule
                    key = (rule.rule_id, event.device, visit.visit_id)
                    if key in self._fired:
                        continue
                    if evaluate(rule.condition, ctx, atom):
                        self._fired.add(key)
                        fired.append(
                            FiredRule(
                                rule.rule_id,
                                event.device,
                                topic.topic_id,
                                rule.message_id,
                                event.ts,
                            )
                        )
            return fired
