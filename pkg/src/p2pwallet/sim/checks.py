"""Atomicity and conservation checks over node states and traces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from ..node import ProtocolNode
from ..stablelog import recover_summary
from ..wallet import TransactionId
from .. import commit as cm


def transaction_amounts(nodes: Iterable[ProtocolNode]) -> dict[TransactionId, int]:
    amounts: dict[TransactionId, int] = {}
    for node in nodes:
        for txn, info in recover_summary(node.log.records).items():
            if info.amount is not None and (node.owns(txn) or txn not in amounts):
                amounts[txn] = info.amount
        for txn, state in node.sellers.items():
            amount = getattr(state, "amount", 0)
            if amount and txn not in amounts:
                amounts[txn] = amount
    return amounts


def money_in_transit(nodes: Iterable[ProtocolNode]) -> int:
    """Money the buyer has durably paid that the seller has not yet credited.

    Between the buyer's debit and the seller's credit the acknowledgement is
    on the wire, so the raw sum of balances is short by exactly this amount.
    """
    nodes = list(nodes)
    paid: set[TransactionId] = set()
    credited: set[TransactionId] = set()
    for node in nodes:
        for txn, info in recover_summary(node.log.records).items():
            if info.has_complete:
                (credited if node.owns(txn) else paid).add(txn)
    amounts = transaction_amounts(nodes)
    return sum(amounts.get(txn, 0) for txn in paid - credited)


def total_money(nodes: Iterable[ProtocolNode]) -> int:
    return sum(node.wallet.balance for node in nodes)


def outcome_of(node: ProtocolNode, txn: TransactionId) -> str:
    o = node.outcome(txn)
    # A node that never prepared the transaction changed nothing.
    return "aborted" if o == "none" else o


@dataclass
class AtomicityResult:
    atomic: bool
    counterexample: tuple | None = None


@dataclass
class Verdict:
    atomic: bool = True
    counterexample: tuple | None = None
    conserved: bool = True
    delta: int = 0
    live: bool = True
    committed_unacked: int = 0
    stranded_reservations: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.atomic and self.conserved

    def summary(self) -> str:
        parts = [
            f"atomic={'yes' if self.atomic else 'no'}",
            f"conserved={'yes' if self.conserved else 'no'}",
            f"live={'yes' if self.live else 'no'}",
            f"committed_unacked={self.committed_unacked}",
        ]
        if self.counterexample:
            parts.append(f"counterexample={self.counterexample}")
        if self.delta:
            parts.append(f"delta={self.delta}")
        return " ".join(parts)


def unacked_count(nodes: Iterable[ProtocolNode]) -> int:
    return sum(
        1
        for node in nodes
        for state in node.sellers.values()
        if isinstance(state, cm.SellerDone)
        and state.outcome in (cm.DoneOutcome.COMMITTED_UNACKED, cm.DoneOutcome.ABORTED_UNACKED)
    )


def check_atomicity(trace) -> AtomicityResult:
    """Per-transaction agreement of the terminal outcomes recorded in a trace."""
    for txn, outcomes in trace.outcomes.items():
        values = set(outcomes.values())
        if "in-doubt" in values or len(values) > 1:
            return AtomicityResult(False, (txn, tuple(sorted(outcomes.items()))))
    return AtomicityResult(True)


def check_conservation(trace) -> tuple[bool, int]:
    """Balances plus money in transit equal the initial total after every event,
    and nothing is left in transit at the end."""
    for _, total, transit in trace.money:
        if total + transit != trace.initial_total:
            return False, total + transit - trace.initial_total
    if trace.money:
        _, total, transit = trace.money[-1]
        if transit and trace.live:
            return False, total - trace.initial_total
    return True, 0
