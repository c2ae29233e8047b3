"""Exhaustive schedule exploration for one seller/buyer transaction.

The explorer enumerates every schedule within a fault budget: which
in-flight message is delivered next, which message is lost or duplicated,
where a node crashes (before, between or after any effect of a step), and
when timers fire. Visited world states are memoised, so the search is a
depth-first walk of a DAG whose sinks are quiescent worlds (nothing in
flight, no timer armed).

Timer model. In the default ``quiescent`` mode time only passes when the
network is empty: the armed timer with the nearest deadline fires next.
``eager`` mode lets any armed timer fire at any point, which also covers
premature timeouts; it is only tractable with small retry caps.
"""

from __future__ import annotations

import random
import sys
from dataclasses import dataclass, field
from typing import Callable

from .. import commit as cm
from .. import discovery as dc
from ..envelope import get_suite
from ..node import ProtocolNode, RecordLog
from ..wallet import Mode, MoneyAmount, NodeId, TransactionId, WalletState, credit, provision, new_office, reserve, set_mode
from .checks import money_in_transit, total_money, unacked_count

DURATIONS = {cm.TimerKind.RETRANSMIT: 4, cm.TimerKind.LOOKUP_WINDOW: 2, cm.TimerKind.HOLD: 40}


class BoundsTooLarge(Exception):
    pass


@dataclass(frozen=True)
class Bounds:
    losses: int = 0
    duplications: int = 0
    crashes: int = 0

    @classmethod
    def parse(cls, text: str) -> Bounds:
        try:
            l, d, c = (int(x) for x in text.split(","))
        except ValueError:
            raise ValueError(f"bounds must be L,D,C integers, got {text!r}") from None
        if min(l, d, c) < 0:
            raise ValueError("bounds must be non-negative")
        return cls(l, d, c)


@dataclass(frozen=True)
class ExploreSetup:
    amount: int = 40
    buyer_balance: int = 100
    seller_balance: int = 0
    config: cm.ProtocolConfig = cm.DEFAULT_CONFIG
    include_discovery: bool = True
    timer_mode: str = "quiescent"
    max_states: int = 2_000_000


@dataclass
class Terminal:
    seller_outcome: str
    buyer_outcome: str
    seller_balance: int
    buyer_balance: int
    buyer_reserved: int
    atomic: bool
    conserved: bool
    unacked: int
    schedule: list[str]

    @property
    def pair(self) -> tuple[str, str]:
        return self.seller_outcome, self.buyer_outcome


@dataclass
class ExplorationResult:
    terminals: dict[tuple, Terminal] = field(default_factory=dict)
    states: int = 0
    schedules: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def all_atomic(self) -> bool:
        return all(t.atomic for t in self.terminals.values()) and not self.violations

    @property
    def all_conserved(self) -> bool:
        return all(t.conserved for t in self.terminals.values()) and not self.violations

    @property
    def outcome_pairs(self) -> set[tuple[str, str]]:
        return {t.pair for t in self.terminals.values()}


SELLER, BUYER = "S", "B"


def _msg_key(item) -> tuple:
    src, dst, msg = item
    return (src, dst, type(msg).__name__, repr(msg))


class World:
    """One point in the schedule space. Mutable; branch by ``copy``."""

    __slots__ = ("nodes", "network", "timers", "losses", "dups", "crashes", "txn", "broken")

    def __init__(self, nodes, network, timers, losses, dups, crashes, txn):
        self.nodes: dict[str, ProtocolNode] = nodes
        self.network: tuple = network
        self.timers: dict[tuple, int] = timers
        self.losses, self.dups, self.crashes = losses, dups, crashes
        self.txn: TransactionId = txn
        # Set when a node cannot rebuild itself from its log; the world halts.
        self.broken: str | None = None

    def copy(self) -> World:
        clone = World(
            {k: n.copy() for k, n in self.nodes.items()},
            self.network,
            dict(self.timers),
            self.losses,
            self.dups,
            self.crashes,
            self.txn,
        )
        clone.broken = self.broken
        return clone

    def key(self, eager: bool) -> tuple:
        if eager:
            timers = tuple(sorted(self.timers, key=repr))
        elif self.timers:
            base = min(self.timers.values())
            timers = tuple(sorted(((k, v - base) for k, v in self.timers.items()), key=repr))
        else:
            timers = ()
        return (
            tuple(n.key() for n in self.nodes.values()),
            self.network,
            timers,
            self.losses,
            self.dups,
            self.crashes,
            self.broken,
        )

    def name_of(self, node_id: NodeId) -> str:
        for name, node in self.nodes.items():
            if node.node_id == node_id:
                return name
        raise KeyError(node_id)

    def add_messages(self, items) -> None:
        self.network = tuple(sorted(self.network + tuple(items), key=_msg_key))

    def remove_message(self, item) -> None:
        net = list(self.network)
        net.remove(item)
        self.network = tuple(net)


Handler = Callable[[ProtocolNode, object, NodeId], list]


class Explorer:
    def __init__(self, setup: ExploreSetup, bounds: Bounds, buyer_handler: Handler | None = None) -> None:
        if setup.timer_mode not in ("quiescent", "eager"):
            raise ValueError("timer_mode is 'quiescent' or 'eager'")
        if bounds.losses + bounds.duplications + bounds.crashes > 8:
            raise BoundsTooLarge(f"{bounds} is beyond the exhaustive budget")
        self.setup = setup
        self.bounds = bounds
        self.eager = setup.timer_mode == "eager"
        self.buyer_handler = buyer_handler
        self.memo: dict[tuple, int] = {}
        self.on_stack: set[tuple] = set()
        self.result = ExplorationResult()
        self.initial_total = setup.buyer_balance + setup.seller_balance

    # --- world construction --------------------------------------------------

    def initial_world(self) -> World:
        setup = self.setup
        rng = random.Random(0)
        office = new_office("toy", rng)
        seller_w, office = provision(office, NodeId.from_name(SELLER), rng)
        buyer_w, office = provision(office, NodeId.from_name(BUYER), rng)
        seller_w = set_mode(seller_w, Mode.SELLER)
        buyer_w = set_mode(buyer_w, Mode.BUYER)
        if setup.seller_balance:
            seller_w = credit(seller_w, setup.seller_balance)
        buyer_w = credit(buyer_w, setup.buyer_balance)
        txn = TransactionId.new(seller_w.node, 1)
        timers: dict = {}
        if not setup.include_discovery:
            buyer_w = reserve(buyer_w, setup.amount, txn)
            timers[(BUYER, txn, cm.TimerKind.HOLD)] = DURATIONS[cm.TimerKind.HOLD]
        nodes = {
            SELLER: ProtocolNode(seller_w, RecordLog(), setup.config, verify_peers=False),
            BUYER: ProtocolNode(buyer_w, RecordLog(), setup.config, verify_peers=False),
        }
        b = self.bounds
        return World(nodes, (), timers, b.losses, b.duplications, b.crashes, txn)

    def start_seller(self, world: World) -> list:
        node = world.nodes[SELLER]
        buyer = world.nodes[BUYER].node_id
        if self.setup.include_discovery:
            _, effects = node.start_purchase(buyer, self.setup.amount, txn=world.txn)
            return effects
        return node.start_commit(world.txn, self.setup.amount, buyer)

    # --- effect execution ----------------------------------------------------

    def run_effects(self, world: World, name: str, effects: list, crash_after: int | None = None) -> None:
        node = world.nodes[name]
        for i, effect in enumerate(effects):
            if crash_after is not None and i == crash_after:
                self.crash(world, name)
                return
            if world.broken:
                return
            external = node.execute(effect)
            if external is not None:
                self.external(world, name, external)

    def external(self, world: World, name: str, effect) -> None:
        if isinstance(effect, cm.SendMessage):
            world.add_messages([(name, world.name_of(effect.to), effect.message)])
        elif isinstance(effect, dc.Broadcast):
            world.add_messages([(name, other, effect.packet) for other in world.nodes if other != name])
        elif isinstance(effect, cm.StartTimer):
            world.timers[(name, effect.txn, effect.kind)] = DURATIONS[effect.kind]
        elif isinstance(effect, cm.CancelTimer):
            world.timers.pop((name, effect.txn, effect.kind), None)

    def crash(self, world: World, name: str) -> None:
        world.crashes -= 1
        for key in [k for k in world.timers if k[0] == name]:
            del world.timers[key]
        try:
            effects = world.nodes[name].restart()
        except cm.CorruptLog as exc:
            world.broken = f"{name}: {exc}"
            world.network, world.timers = (), {}
            return
        self.run_effects(world, name, effects)

    # --- successor generation ------------------------------------------------

    def step_variants(self, world: World, name: str, label: str, produce) -> list[tuple[str, World]]:
        """Run one input to completion, plus every crash point inside it."""
        out = []
        base = world.copy()
        effects = produce(base)
        probe = [e for e in effects]
        self.run_effects(base, name, effects)
        out.append((label, base))
        if world.crashes > 0:
            for k in range(len(probe)):
                w = world.copy()
                effects_k = produce(w)
                self.run_effects(w, name, effects_k, crash_after=k)
                out.append((f"{label} !crash@{k}", w))
        return out

    def deliver(self, world: World, item):
        src, dst, msg = item

        def produce(w: World) -> list:
            w.remove_message(item)
            node = w.nodes[dst]
            sender = w.nodes[src].node_id
            if dst == BUYER and self.buyer_handler is not None:
                return self.buyer_handler(node, msg, sender)
            return node.handle_message(msg, sender)

        return self.step_variants(world, dst, f"deliver {type(msg).__name__} {src}->{dst}", produce)

    def fire(self, world: World, key):
        name, txn, kind = key

        def produce(w: World) -> list:
            elapsed = w.timers.pop(key)
            if not self.eager:
                for k in w.timers:
                    w.timers[k] -= elapsed
            return w.nodes[name].handle_timeout(txn, kind)

        return self.step_variants(world, name, f"timeout {name} {kind.value}", produce)

    def successors(self, world: World) -> list[tuple[str, World]]:
        out: list[tuple[str, World]] = []
        seen = set()
        for item in world.network:
            if item in seen:
                continue
            seen.add(item)
            out += self.deliver(world, item)
            desc = f"{type(item[2]).__name__} {item[0]}->{item[1]}"
            if world.losses > 0:
                w = world.copy()
                w.remove_message(item)
                w.losses -= 1
                out.append((f"lose {desc}", w))
            if world.dups > 0:
                w = world.copy()
                w.add_messages([item])
                w.dups -= 1
                out.append((f"duplicate {desc}", w))
        if world.timers and (self.eager or not world.network):
            if self.eager:
                due = list(world.timers)
            else:
                soonest = min(world.timers.values())
                due = [k for k, v in world.timers.items() if v == soonest]
            for key in sorted(due, key=repr):
                out += self.fire(world, key)
        if world.crashes > 0:
            for name in world.nodes:
                w = world.copy()
                self.crash(w, name)
                out.append((f"crash {name}", w))
        return out

    # --- search --------------------------------------------------------------

    def quiescent(self, world: World) -> bool:
        return not world.network and not world.timers

    def check_state(self, world: World, schedule: list[str]) -> None:
        total = total_money(world.nodes.values())
        transit = money_in_transit(world.nodes.values())
        if total + transit != self.initial_total and len(self.result.violations) < 20:
            self.result.violations.append(
                f"conservation broken (total={total}, in transit={transit}) after: {' | '.join(schedule)}"
            )

    def record_terminal(self, world: World, schedule: list[str]) -> None:
        key = world.key(self.eager)
        if key in self.result.terminals:
            return
        seller, buyer = world.nodes[SELLER], world.nodes[BUYER]
        total = total_money(world.nodes.values())
        transit = money_in_transit(world.nodes.values())
        sold = seller.wallet.balance - self.setup.seller_balance
        paid = self.setup.buyer_balance - buyer.wallet.balance
        conserved = total == self.initial_total and transit == 0 and sold == paid and sold in (0, self.setup.amount)
        # Both nodes count as participants: a buyer that forgot the
        # transaction reports it as aborted, which must still match.
        s_out, b_out = _outcome(seller, world.txn), _outcome(buyer, world.txn)
        if world.broken:
            broken = "seller" if world.broken.startswith(SELLER) else "buyer"
            s_out, b_out = ("unrecoverable", b_out) if broken == "seller" else (s_out, "unrecoverable")
        self.result.terminals[key] = Terminal(
            seller_outcome=s_out,
            buyer_outcome=b_out,
            seller_balance=seller.wallet.balance,
            buyer_balance=buyer.wallet.balance,
            buyer_reserved=buyer.wallet.reserved,
            atomic=s_out == b_out and s_out != "in-doubt",
            conserved=conserved,
            unacked=unacked_count(world.nodes.values()),
            schedule=list(schedule),
        )

    def visit(self, world: World, schedule: list[str]) -> int:
        key = world.key(self.eager)
        cached = self.memo.get(key)
        if cached is not None:
            return cached
        if key in self.on_stack:
            raise RuntimeError("cycle in schedule space: " + " | ".join(schedule))
        if len(self.memo) >= self.setup.max_states:
            raise BoundsTooLarge(f"more than {self.setup.max_states} states")
        self.on_stack.add(key)
        self.check_state(world, schedule)
        count = 0
        if self.quiescent(world):
            self.record_terminal(world, schedule)
            count = 1
        if world.broken:
            self.on_stack.discard(key)
            self.memo[key] = count
            return count
        for label, nxt in self.successors(world):
            schedule.append(label)
            count += self.visit(nxt, schedule)
            schedule.pop()
        self.on_stack.discard(key)
        self.memo[key] = count
        return count

    def run(self) -> ExplorationResult:
        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, 20_000))
        try:
            root = self.initial_world()
            total = 0
            for label, world in self.step_variants(root, SELLER, "start", self.start_seller):
                total += self.visit(world, [label])
        finally:
            sys.setrecursionlimit(limit)
        self.result.states = len(self.memo)
        self.result.schedules = total
        return self.result


def _outcome(node: ProtocolNode, txn: TransactionId) -> str:
    o = node.outcome(txn)
    return "aborted" if o == "none" else o


def explore_exhaustive(
    bounds: Bounds,
    setup: ExploreSetup | None = None,
    buyer_handler: Handler | None = None,
) -> ExplorationResult:
    return Explorer(setup or ExploreSetup(), bounds, buyer_handler).run()


def skip_prepare_logging(node: ProtocolNode, msg, sender: NodeId) -> list:
    """Mutant buyer: answers AGREED without writing UNDO/REDO first."""
    effects = node.handle_message(msg, sender)
    return [
        e
        for e in effects
        if not (isinstance(e, cm.AppendLog) and e.record.kind in (cm.RecordKind.UNDO, cm.RecordKind.REDO))
    ]


def expected_schedule_count(losses: int, round_trips: int) -> int:
    """Closed form for loss-only schedules of a chain of request/reply round trips.

    Each loss hits one of the two legs of some attempt and forces exactly one
    retransmission of that round trip, so schedules with exactly k losses are
    multisets of k attempts over the round trips times 2**k leg choices.
    """
    from math import comb

    return sum(comb(k + round_trips - 1, round_trips - 1) * 2**k for k in range(losses + 1))
