"""Seeded discrete-event simulation of wallets over a lossy broadcast medium.

Every node is a :class:`ProtocolNode` backed by a byte-level in-memory log,
so crashes can tear a record mid-write exactly like a power cut would. All
randomness (loss, duplication, delay, crash placement, envelope secrets)
comes from one ``random.Random(seed)``, which makes a run a pure function of
its configuration.

Trace file format, one tab-separated event per line::

    <time> <node> <event> <detail> [<state-before> <state-after>]

followed by ``final`` lines (one per node: balance, reserved), ``outcome``
lines (one per transaction and participant) and a single ``verdict`` line.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from .. import commit as cm
from .. import discovery as dc
from ..envelope import SUITES, EnvelopeError
from ..node import ProtocolNode, Transition
from ..runtime.wire import WireError, decode_inbound, encode_outbound
from ..stablelog import LogRecord, MemoryStorage, RecordKind, StableLog, encode_record
from ..wallet import Mode, NodeId, TransactionId, issue_charge, new_office, provision, redeem_charge, set_mode
from .checks import Verdict, check_atomicity, check_conservation, money_in_transit, outcome_of, total_money, unacked_count


class ConfigInvalid(ValueError):
    pass


# Within one time unit, arrivals are processed before timers expire, so a
# reply landing exactly on its deadline still counts.
_PRIORITY = {"deliver": 0, "restart": 1, "purchase": 1, "timer": 2}


@dataclass(frozen=True)
class CrashPoint:
    """Crash ``node`` just before it executes its ``at_effect``-th effect
    (counted from zero over the whole run), or right after it appends its
    first record of kind ``after_record``."""

    node: str
    at_effect: int | None = None
    after_record: RecordKind | None = None
    restart_after: int = 5


@dataclass
class SimConfig:
    seed: int = 0
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    delay_min: int = 1
    delay_max: int = 1
    crash_plan: list[CrashPoint] = field(default_factory=list)
    random_crashes: int = 0
    max_time: int = 2000
    timeout_units: int = 4
    lookup_window: int = 2
    hold_units: int = 64
    retries: int = 3
    commit_retries: int = 16
    policy: cm.TimeoutPolicy = cm.TimeoutPolicy.RETRY_THEN_ABORT
    # Faults (loss, duplication) stop at this time; None keeps them forever.
    fair_after: int | None = None
    envelopes: bool = True
    suite: str = "toy"
    torn_writes: bool = True

    def validate(self) -> None:
        for name in ("loss_prob", "dup_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigInvalid(f"{name} must lie in [0, 1], got {p}")
        if not 1 <= self.delay_min <= self.delay_max:
            raise ConfigInvalid("delays need 1 <= delay_min <= delay_max")
        if self.max_time <= 0 or self.timeout_units <= 0 or self.lookup_window <= 0 or self.hold_units <= 0:
            raise ConfigInvalid("times must be positive")
        if self.retries < 0 or self.commit_retries < 0 or self.random_crashes < 0:
            raise ConfigInvalid("retry caps and crash counts must be non-negative")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigInvalid("seed must fit in 64 bits")
        if self.fair_after is not None and self.fair_after < 0:
            raise ConfigInvalid("fair_after must be non-negative")
        if self.suite not in SUITES:
            raise ConfigInvalid(f"unknown primitive suite {self.suite!r}")
        for point in self.crash_plan:
            if (point.at_effect is None) == (point.after_record is None):
                raise ConfigInvalid("a crash point needs exactly one of at_effect / after_record")
            if point.restart_after < 1:
                raise ConfigInvalid("restart_after must be at least 1")

    @property
    def protocol(self) -> cm.ProtocolConfig:
        return cm.ProtocolConfig(self.retries, self.commit_retries, self.policy)


@dataclass(frozen=True)
class Purchase:
    seller: str
    buyer: str
    amount: int
    at: int = 0
    description: bytes = b"goods"


@dataclass
class Script:
    charges: list[tuple[str, int]] = field(default_factory=list)
    purchases: list[Purchase] = field(default_factory=list)


@dataclass
class Topology:
    """Node name to wallet mode; every node is one hop from every other."""

    nodes: dict[str, Mode] = field(default_factory=dict)


@dataclass(frozen=True)
class TraceEvent:
    time: int
    node: str
    event: str
    detail: str = ""
    before: str = ""
    after: str = ""

    def line(self) -> str:
        fields = [str(self.time), self.node, self.event, self.detail]
        if self.before or self.after:
            fields += [self.before, self.after]
        return "\t".join(fields)


@dataclass
class Trace:
    events: list[TraceEvent] = field(default_factory=list)
    finals: dict[str, tuple[int, int]] = field(default_factory=dict)
    outcomes: dict[str, dict[str, str]] = field(default_factory=dict)
    money: list[tuple[int, int, int]] = field(default_factory=list)
    initial_total: int = 0
    live: bool = True
    end_time: int = 0
    verdict: Verdict | None = None

    def transitions(self) -> list[TraceEvent]:
        return [e for e in self.events if e.event == "transition"]

    def serialize(self) -> str:
        lines = [e.line() for e in self.events]
        for name, (balance, reserved) in self.finals.items():
            lines.append(f"final\t{name}\tbalance={balance}\treserved={reserved}")
        for txn, per_node in self.outcomes.items():
            for name, outcome in per_node.items():
                lines.append(f"outcome\t{txn}\t{name}\t{outcome}")
        if self.verdict is not None:
            lines.append(f"verdict\t{self.verdict.summary()}")
        return "\n".join(lines) + "\n"


class _Host:
    """The simulator's node host: executes effects, owns timers and the wire."""

    def __init__(self, sim: Simulation, name: str, node: ProtocolNode, storage: MemoryStorage) -> None:
        self.sim, self.name, self.node, self.storage = sim, name, node, storage
        self.up = True
        self.effects_run = 0


class Simulation:
    def __init__(self, config: SimConfig, topology: Topology, script: Script) -> None:
        config.validate()
        self._validate(topology, script, config)
        self.config = config
        self.topology = topology
        self.script = script
        self.rng = random.Random(config.seed)
        self.now = 0
        self.queue: list = []
        self.seq = 0
        self.timers: dict[tuple, int] = {}
        self.trace = Trace()
        self.txns: dict[str, tuple[str, str, TransactionId | None]] = {}
        self.hosts: dict[str, _Host] = {}
        self.by_id: dict[NodeId, str] = {}
        self.crash_plan = list(config.crash_plan) + self._random_crashes()
        self._build()

    @staticmethod
    def _validate(topology: Topology, script: Script, config: SimConfig) -> None:
        if len(topology.nodes) < 2:
            raise ConfigInvalid("topology needs at least two nodes")
        names = set(topology.nodes)
        for name, amount in script.charges:
            if name not in names or amount <= 0:
                raise ConfigInvalid(f"bad charge {name} {amount}")
        for p in script.purchases:
            if p.seller not in names or p.buyer not in names or p.seller == p.buyer:
                raise ConfigInvalid(f"bad purchase {p}")
            if topology.nodes[p.seller] is not Mode.SELLER:
                raise ConfigInvalid(f"{p.seller} is not in seller mode")
            if p.amount <= 0 or p.at < 0:
                raise ConfigInvalid(f"bad purchase {p}")
        for point in config.crash_plan:
            if point.node not in names:
                raise ConfigInvalid(f"crash plan names unknown node {point.node}")

    def _random_crashes(self) -> list[CrashPoint]:
        if not self.config.random_crashes:
            return []
        candidates = sorted({n for p in self.script.purchases for n in (p.seller, p.buyer)}) or sorted(self.topology.nodes)
        return [
            CrashPoint(self.rng.choice(candidates), at_effect=self.rng.randrange(24), restart_after=self.rng.randint(1, 30))
            for _ in range(self.config.random_crashes)
        ]

    def _build(self) -> None:
        office = new_office(self.config.suite, self.rng)
        for name, mode in self.topology.nodes.items():
            node_id = NodeId.from_name(name)
            wallet, office = provision(office, node_id, self.rng)
            wallet = set_mode(wallet, mode)
            for charged, amount in self.script.charges:
                if charged == name:
                    voucher, office = issue_charge(office, node_id, amount)
                    wallet = redeem_charge(wallet, voucher)
            storage = MemoryStorage()
            node = ProtocolNode(
                wallet,
                StableLog(storage),
                self.config.protocol,
                verify_peers=True,
                on_transition=lambda t, n=name: self._on_transition(n, t),
                reopen_log=lambda s=storage: StableLog(s),
            )
            self.hosts[name] = _Host(self, name, node, storage)
            self.by_id[node_id] = name
        self.trace.initial_total = self._total()

    # --- bookkeeping ---------------------------------------------------------

    def _emit(self, node: str, event: str, detail: str = "", before: str = "", after: str = "") -> None:
        self.trace.events.append(TraceEvent(self.now, node, event, detail, before, after))

    def _on_transition(self, name: str, t: Transition) -> None:
        self._emit(name, "transition", t.input, t.before, t.after)

    def _nodes(self) -> list[ProtocolNode]:
        return [h.node for h in self.hosts.values()]

    def _total(self) -> int:
        return total_money(self._nodes())

    def _snapshot_money(self) -> None:
        # A crashed node's wallet file can sit between a debit and the log
        # record that justifies it until recovery reconciles the two, so money
        # is only audited while every node is up and between steps.
        if not all(h.up for h in self.hosts.values()):
            return
        nodes = self._nodes()
        self.trace.money.append((self.now, total_money(nodes), money_in_transit(nodes)))

    def _schedule(self, at: int, kind: str, *data) -> None:
        self.seq += 1
        heapq.heappush(self.queue, (at, _PRIORITY[kind], self.seq, kind, data))

    def _faulty(self) -> bool:
        return self.config.fair_after is None or self.now < self.config.fair_after

    # --- wire ----------------------------------------------------------------

    def _transmit(self, src: str, dst: str, message) -> None:
        host = self.hosts[src]
        label = type(message).__name__
        payload = message
        if self.config.envelopes:
            target = self.hosts[dst].node.node_id
            peer_key = host.node.wallet.keys.peer_directory.get(target)
            try:
                payload = encode_outbound(message, host.node.wallet, peer_key, self.rng.randbytes(32))
            except WireError as exc:
                self._emit(src, "send-failed", f"{label}->{dst} {exc}")
                return
        if self._faulty() and self.rng.random() < self.config.loss_prob:
            self._emit(src, "lose", f"{label}->{dst}")
            return
        copies = 1
        if self._faulty() and self.rng.random() < self.config.dup_prob:
            copies = 2
            self._emit(src, "duplicate", f"{label}->{dst}")
        for _ in range(copies):
            delay = self.rng.randint(self.config.delay_min, self.config.delay_max)
            self._schedule(self.now + delay, "deliver", src, dst, payload)

    def _deliver(self, src: str, dst: str, payload) -> None:
        host = self.hosts[dst]
        if not host.up:
            self._emit(dst, "drop", "node down")
            return
        if self.config.envelopes:
            try:
                sender_id, message = decode_inbound(payload, host.node.wallet)
            except (WireError, EnvelopeError) as exc:
                self._emit(dst, "drop", f"invalid frame from {src}: {type(exc).__name__}")
                return
        else:
            sender_id, message = self.hosts[src].node.node_id, payload
        self._emit(dst, "receive", f"{type(message).__name__}<-{src}")
        self._run(host, host.node.handle_message(message, sender_id))

    # --- effects -------------------------------------------------------------

    def _crash_due(self, host: _Host, effect) -> CrashPoint | None:
        for point in self.crash_plan:
            if point.node == host.name and point.at_effect is not None and point.at_effect == host.effects_run:
                return point
        return None

    def _crash_after(self, host: _Host, effect) -> CrashPoint | None:
        if not isinstance(effect, cm.AppendLog):
            return None
        for point in self.crash_plan:
            if point.node == host.name and point.after_record is effect.record.kind:
                return point
        return None

    def _run(self, host: _Host, effects: list) -> None:
        for effect in effects:
            if not host.up:
                return
            point = self._crash_due(host, effect)
            if point is not None:
                self._tear(host, effect)
                self._crash(host, point)
                return
            host.effects_run += 1
            self._emit(host.name, "effect", _describe(effect))
            external = host.node.execute(effect)
            if external is not None:
                self._external(host, external)
            point = self._crash_after(host, effect)
            if point is not None:
                self._crash(host, point)
                return
        if host.up:
            self._snapshot_money()

    def _tear(self, host: _Host, effect) -> None:
        """A crash during a log append may leave a partial record behind."""
        if not self.config.torn_writes:
            return
        if isinstance(effect, cm.AppendLog):
            record = effect.record
        elif isinstance(effect, cm.EraseTxn):
            record = LogRecord.erase(effect.txn, effect.outcome)
        else:
            return
        data = encode_record(record)
        if self.rng.random() < 0.5:
            cut = self.rng.randrange(1, len(data))
            host.storage.append(data[:cut])
            self._emit(host.name, "torn-write", f"{record.kind.name} {cut}/{len(data)} bytes")

    def _crash(self, host: _Host, point: CrashPoint) -> None:
        self.crash_plan.remove(point)
        host.up = False
        for key in [k for k in self.timers if k[0] == host.name]:
            del self.timers[key]
        self._emit(host.name, "crash", f"after {host.effects_run} effects")
        self._schedule(self.now + point.restart_after, "restart", host.name)

    def _restart(self, name: str) -> None:
        host = self.hosts[name]
        host.up = True
        effects = host.node.restart()
        self._emit(name, "restart", f"{len(effects)} recovery effects")
        self._run(host, effects)

    def _external(self, host: _Host, effect) -> None:
        cfg = self.config
        if isinstance(effect, cm.SendMessage):
            self._transmit(host.name, self.by_id[effect.to], effect.message)
        elif isinstance(effect, dc.Broadcast):
            for other in self.hosts:
                if other != host.name:
                    self._transmit(host.name, other, effect.packet)
        elif isinstance(effect, cm.StartTimer):
            duration = {
                cm.TimerKind.RETRANSMIT: cfg.timeout_units,
                cm.TimerKind.LOOKUP_WINDOW: cfg.lookup_window,
                cm.TimerKind.HOLD: cfg.hold_units,
            }[effect.kind]
            key = (host.name, effect.txn, effect.kind)
            self.seq += 1
            self.timers[key] = self.seq
            heapq.heappush(self.queue, (self.now + duration, _PRIORITY["timer"], self.seq, "timer", key))
        elif isinstance(effect, cm.CancelTimer):
            self.timers.pop((host.name, effect.txn, effect.kind), None)
        elif isinstance(effect, dc.SessionFailed):
            self._emit(host.name, "session-failed", effect.reason)

    def _fire(self, key: tuple, token: int) -> None:
        if self.timers.get(key) != token:
            return
        del self.timers[key]
        name, txn, kind = key
        host = self.hosts[name]
        self._emit(name, "timeout", kind.value)
        self._run(host, host.node.handle_timeout(txn, kind))

    def _purchase(self, index: int, purchase: Purchase) -> None:
        host = self.hosts[purchase.seller]
        if not host.up:
            self._emit(purchase.seller, "purchase-skipped", "seller down")
            self.txns[f"purchase-{index}"] = (purchase.seller, purchase.buyer, None)
            return
        target = self.hosts[purchase.buyer].node.node_id
        txn, effects = host.node.start_purchase(target, purchase.amount, purchase.description)
        self.txns[str(txn)] = (purchase.seller, purchase.buyer, txn)
        self._emit(purchase.seller, "purchase", f"{txn} {purchase.amount}->{purchase.buyer}")
        self._run(host, effects)

    # --- main loop -----------------------------------------------------------

    def run(self) -> Trace:
        for i, purchase in enumerate(self.script.purchases):
            self._schedule(purchase.at, "purchase", i, purchase)
        self._snapshot_money()
        while self.queue:
            at, _, seq, kind, data = heapq.heappop(self.queue)
            if at > self.config.max_time:
                break
            self.now = at
            if kind == "deliver":
                self._deliver(*data)
            elif kind == "timer":
                self._fire(data, seq)
            elif kind == "restart":
                self._restart(*data)
            elif kind == "purchase":
                self._purchase(*data)
        self.trace.end_time = self.now
        return self._finish()

    def _finish(self) -> Trace:
        trace = self.trace
        for name, host in self.hosts.items():
            trace.finals[name] = (host.node.wallet.balance, host.node.wallet.reserved)
        live = True
        for key, (seller, buyer, tid) in self.txns.items():
            if tid is None:
                trace.outcomes[key] = {seller: "aborted", buyer: "aborted"}
                continue
            per_node = {
                seller: outcome_of(self.hosts[seller].node, tid) if self.hosts[seller].up else "in-doubt",
                buyer: outcome_of(self.hosts[buyer].node, tid) if self.hosts[buyer].up else "in-doubt",
            }
            trace.outcomes[key] = per_node
            if "in-doubt" in per_node.values():
                live = False
        unacked = unacked_count(self._nodes())
        stranded = sum(h.node.wallet.reserved for h in self.hosts.values())
        trace.live = live and unacked == 0 and stranded == 0
        atom = check_atomicity(trace)
        conserved, delta = check_conservation(trace)
        trace.verdict = Verdict(
            atomic=atom.atomic,
            counterexample=atom.counterexample,
            conserved=conserved,
            delta=delta,
            live=trace.live,
            committed_unacked=unacked,
            stranded_reservations=stranded,
        )
        return trace


def _describe(effect) -> str:
    if isinstance(effect, dc.Broadcast):
        return "broadcast LOOKUP"
    if isinstance(effect, dc.SessionFailed):
        return f"session-failed {effect.reason}"
    return cm.describe_effect(effect)


def run_scenario(config: SimConfig, topology: Topology, script: Script) -> tuple[Trace, Verdict]:
    trace = Simulation(config, topology, script).run()
    return trace, trace.verdict


def single_purchase(
    seed: int = 0,
    amount: int = 40,
    balance: int = 100,
    **overrides,
) -> tuple[SimConfig, Topology, Script]:
    """The canonical two-node scenario: buyer B holds ``balance``, seller S sells."""
    config = SimConfig(seed=seed, **overrides)
    topology = Topology({"S": Mode.SELLER, "B": Mode.BUYER})
    script = Script(charges=[("B", balance)], purchases=[Purchase("S", "B", amount)])
    return config, topology, script


__all__ = [
    "ConfigInvalid",
    "CrashPoint",
    "Purchase",
    "Script",
    "SimConfig",
    "Topology",
    "Trace",
    "TraceEvent",
    "Simulation",
    "run_scenario",
    "single_purchase",
]
