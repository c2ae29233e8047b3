import random

import pytest

from p2pwallet.wallet import Mode, NodeId, credit, issue_charge, new_office, provision, redeem_charge, set_mode


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def office(rng):
    return new_office("toy", rng)


@pytest.fixture
def pair(office, rng):
    """A seller with nothing and a buyer holding 100, both toy-suite wallets."""
    seller, office = provision(office, NodeId.from_name("S"), rng)
    buyer, office = provision(office, NodeId.from_name("B"), rng)
    voucher, office = issue_charge(office, buyer.node, 100)
    buyer = redeem_charge(buyer, voucher)
    return set_mode(seller, Mode.SELLER), set_mode(buyer, Mode.BUYER)


def make_wallet(name="N1", balance=0, mode=Mode.IDLE, seed=0):
    office = new_office("toy", random.Random(seed))
    wallet, _ = provision(office, NodeId.from_name(name), random.Random(seed + 1))
    if balance:
        wallet = credit(wallet, balance)
    return set_mode(wallet, mode)


class Pump:
    """Synchronous two-node harness: executes effects and delivers messages
    FIFO, with an optional ``drop(sender, message)`` filter."""

    def __init__(self, *nodes, drop=None):
        from collections import deque

        self.nodes = {n.node_id: n for n in nodes}
        self.queue = deque()
        self.drop = drop or (lambda sender, message: False)
        self.sent = []
        self.timers = set()
        self.failures = []

    def run(self, node, effects):
        from p2pwallet import commit as cm
        from p2pwallet import discovery as dc

        for effect in effects:
            ext = node.execute(effect)
            if isinstance(ext, cm.SendMessage):
                self.sent.append((node.node_id, type(ext.message).__name__))
                if not self.drop(node.node_id, ext.message):
                    self.queue.append((node.node_id, ext.to, ext.message))
            elif isinstance(ext, dc.Broadcast):
                for other in self.nodes.values():
                    if other is not node:
                        self.queue.append((node.node_id, other.node_id, ext.packet))
            elif isinstance(ext, cm.StartTimer):
                self.timers.add((node.node_id, ext.txn, ext.kind))
            elif isinstance(ext, cm.CancelTimer):
                self.timers.discard((node.node_id, ext.txn, ext.kind))
            elif isinstance(ext, dc.SessionFailed):
                self.failures.append(ext.reason)

    def settle(self, limit=1000):
        while self.queue and limit:
            limit -= 1
            src, dst, msg = self.queue.popleft()
            node = self.nodes[dst]
            self.run(node, node.handle_message(msg, src))

    def fire(self, kind=None):
        """Fire one pending timer (optionally of one kind); returns False if none."""
        for node_id, txn, k in sorted(self.timers, key=lambda t: (t[2].value, t[0].raw)):
            if kind is None or k is kind:
                self.timers.discard((node_id, txn, k))
                node = self.nodes[node_id]
                self.run(node, node.handle_timeout(txn, k))
                return True
        return False

    def drive(self, rounds=100):
        """Alternate settling and firing timers until nothing is pending."""
        for _ in range(rounds):
            self.settle()
            if not self.fire():
                return
        self.settle()


def make_node(wallet, **kw):
    from p2pwallet.node import ProtocolNode
    from p2pwallet.stablelog import StableLog

    return ProtocolNode(wallet, StableLog.in_memory(), **kw)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
