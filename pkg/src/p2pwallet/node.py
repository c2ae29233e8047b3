"""Protocol host shared by the simulator, the explorer and the network runtime.

``ProtocolNode`` owns one wallet and one log, routes inputs to the pure
machines in :mod:`commit` and :mod:`discovery`, and executes the internal
effects (log appends, wallet operations, erasure). External effects (sends,
broadcasts, timers, session failures) are handed back to the caller, which
is the only part that differs between hosts. A host injects a crash by
simply not executing the rest of an effect list and calling
:meth:`ProtocolNode.restart`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from . import commit as cm
from . import discovery as dc
from .stablelog import LogRecord, recover_summary
from .wallet import (
    NodeId,
    TransactionId,
    WalletState,
    add_peer,
    after_crash,
    credit,
    debit_reserved,
    record_outcome,
    release,
    reserve,
    restore_balance,
)

log = logging.getLogger(__name__)

BUYER_BOUND = (cm.CommitRequest, cm.Commit)
SELLER_BOUND = (cm.Agreed, cm.Committed)


class RecordLog:
    """In-memory log of decoded records; cheap to copy for the explorer."""

    __slots__ = ("records",)

    def __init__(self, records: tuple[LogRecord, ...] = ()) -> None:
        self.records = records

    def append(self, record: LogRecord) -> None:
        self.records = self.records + (record,)

    def scan(self) -> list[LogRecord]:
        return list(self.records)

    def copy(self) -> RecordLog:
        return RecordLog(self.records)


@dataclass(frozen=True)
class Transition:
    node: NodeId
    input: str
    before: str
    after: str


EXTERNAL = (cm.SendMessage, cm.StartTimer, cm.CancelTimer, dc.Broadcast, dc.SessionFailed)


class ProtocolNode:
    def __init__(
        self,
        wallet: WalletState,
        log_store,
        config: cm.ProtocolConfig = cm.DEFAULT_CONFIG,
        *,
        verify_peers: bool = True,
        record_history: bool = False,
        on_wallet_change: Callable[[WalletState], None] | None = None,
        on_transition: Callable[[Transition], None] | None = None,
        reopen_log: Callable[[], object] | None = None,
    ) -> None:
        self.wallet = wallet
        self.log = log_store
        self.config = config
        self.verify_peers = verify_peers
        self.record_history = record_history
        self.on_wallet_change = on_wallet_change
        self.on_transition = on_transition
        self.reopen_log = reopen_log
        self.sellers: dict[TransactionId, cm.SellerState] = {}
        self.buyers: dict[TransactionId, cm.BuyerState] = {}
        self.sessions: dict[TransactionId, dc.SessionState] = {}
        self.answered: frozenset[bytes] = frozenset()
        self.decided: dict[TransactionId, dc.QuoteDecision] = {}
        self.next_sequence = 1 + max(
            (r.txn.sequence for r in self.log.records if self.owns(r.txn)), default=0
        )

    @property
    def node_id(self) -> NodeId:
        return self.wallet.node

    def owns(self, txn: TransactionId) -> bool:
        """Transactions are prefixed with the initiating seller's id."""
        return txn.raw[:8] == self.wallet.node.raw[:8]

    # --- bookkeeping ---------------------------------------------------------

    def _set_wallet(self, wallet: WalletState) -> None:
        if wallet is not self.wallet:
            self.wallet = wallet
            if self.on_wallet_change:
                self.on_wallet_change(wallet)

    def _note(self, what: str, before: str, after: str) -> None:
        if self.on_transition:
            self.on_transition(Transition(self.wallet.node, what, before, after))

    def _finish(self, txn: TransactionId, state) -> None:
        if not self.record_history:
            return
        if isinstance(state, cm.SellerDone) and state.outcome in (cm.DoneOutcome.COMMITTED, cm.DoneOutcome.ABORTED):
            self._set_wallet(record_outcome(self.wallet, txn, state.outcome.value))
        elif isinstance(state, cm.BuyerCommitted):
            self._set_wallet(record_outcome(self.wallet, txn, "committed"))
        elif isinstance(state, cm.BuyerAborted):
            self._set_wallet(record_outcome(self.wallet, txn, "aborted"))

    def _step_seller(self, txn: TransactionId, what: str, fn) -> list:
        before = self.sellers.get(txn, cm.Idle())
        after, effects = fn(before)
        if not isinstance(after, cm.Idle):
            self.sellers[txn] = after
        if after != before:
            self._note(what, cm.describe(before), cm.describe(after))
            if type(after) is not type(before):
                self._finish(txn, after)
        return effects

    def _step_buyer(self, txn: TransactionId, what: str, fn) -> list:
        before = self.buyers.get(txn, cm.Idle())
        after, effects = fn(before)
        if not isinstance(after, cm.Idle):
            self.buyers[txn] = after
        if after != before:
            self._note(what, cm.describe(before), cm.describe(after))
            if type(after) is not type(before):
                self._finish(txn, after)
        return effects

    def _step_session(self, txn: TransactionId, what: str, fn) -> list:
        before = self.sessions.get(txn)
        if before is None:
            return []
        after, effects = fn(before)
        self.sessions[txn] = after
        if after != before:
            self._note(what, dc.describe_session(before), dc.describe_session(after))
        out = []
        for effect in effects:
            if isinstance(effect, dc.BeginCommit):
                out += self._step_seller(
                    effect.txn,
                    "begin-commit",
                    lambda s: cm.seller_start(s, effect.txn, effect.amount, effect.buyer, self.wallet),
                )
            else:
                out.append(effect)
        return out

    # --- inputs --------------------------------------------------------------

    def new_transaction(self) -> TransactionId:
        txn = TransactionId.new(self.wallet.node, self.next_sequence)
        self.next_sequence += 1
        return txn

    def start_purchase(
        self, target: NodeId, amount: int, description: bytes = b"goods", txn: TransactionId | None = None
    ) -> tuple[TransactionId, list]:
        txn = txn or self.new_transaction()
        state, effects = dc.start_session(self.wallet, txn, target, amount, description)
        self.sessions[txn] = state
        self._note("purchase", "-", dc.describe_session(state))
        return txn, effects

    def start_commit(self, txn: TransactionId, amount: int, buyer: NodeId) -> list:
        """Enter the commit phase directly for a quote accepted out of band."""
        return self._step_seller(txn, "begin-commit", lambda s: cm.seller_start(s, txn, amount, buyer, self.wallet))

    def handle_message(self, message, sender: NodeId) -> list:
        if isinstance(message, dc.LookupPacket):
            return self._on_lookup(message, sender)
        if isinstance(message, dc.LookupResponse):
            txn = self._session_for_nonce(message.nonce)
            if txn is None or not self._learn_peer(message.buyer, message.buyer_public, message.attestation):
                return []
            return self._step_session(txn, "lookup-response", lambda s: dc.session_on_response(s, message))
        if isinstance(message, dc.Quote):
            return self._on_quote(message, sender)
        if isinstance(message, dc.QuoteDecision):
            return self._step_session(message.txn, "decision", lambda s: dc.session_on_decision(s, message))
        name = type(message).__name__
        if isinstance(message, BUYER_BOUND) or (
            isinstance(message, cm.AbortMsg) and message.txn not in self.sellers and not self.owns(message.txn)
        ):
            return self._step_buyer(
                message.txn, name, lambda s: cm.buyer_on_message(s, message, self.wallet, sender)
            )
        if isinstance(message, SELLER_BOUND + (cm.AbortMsg,)):
            return self._step_seller(message.txn, name, lambda s: cm.seller_on_message(s, message, sender))
        log.debug("ignoring unexpected message %r", message)
        return []

    def _session_for_nonce(self, nonce: bytes) -> TransactionId | None:
        for txn, state in self.sessions.items():
            if isinstance(state, dc.LookingUp) and state.nonce == nonce:
                return txn
        return None

    def _learn_peer(self, peer: NodeId, public: bytes, attestation: bytes) -> bool:
        if self.verify_peers:
            if not dc.verify_peer(self.wallet, peer, public, attestation):
                log.info("dropping discovery packet from %s: bad office attestation", peer)
                return False
            self._set_wallet(add_peer(self.wallet, peer, public))
        return True

    def _on_lookup(self, packet: dc.LookupPacket, sender: NodeId) -> list:
        response, answered = dc.on_lookup(self.wallet, packet, self.answered)
        if response is None:
            return []
        if not self._learn_peer(packet.seller, packet.seller_public, packet.attestation):
            return []
        self.answered = answered
        self._note("lookup", "-", "answered")
        return [cm.SendMessage(sender, response)]

    def _on_quote(self, quote: dc.Quote, sender: NodeId) -> list:
        try:
            wallet, decision = dc.on_quote(self.wallet, quote, self.decided)
        except dc.WrongMode:
            return []
        effects: list = []
        if quote.txn not in self.decided:
            self.decided[quote.txn] = decision
            self._note("quote", "-", "accepted" if decision.accepted else f"rejected:{decision.reason}")
            if decision.accepted:
                effects.append(cm.StartTimer(quote.txn, cm.TimerKind.HOLD))
        self._set_wallet(wallet)
        return effects + [cm.SendMessage(sender, decision)]

    def handle_timeout(self, txn: TransactionId, kind: cm.TimerKind) -> list:
        if kind is cm.TimerKind.HOLD:
            return self._step_buyer(txn, "hold-timeout", lambda s: cm.buyer_on_hold_timeout(s, txn, self.wallet))
        session = self.sessions.get(txn)
        if session is not None and not isinstance(session, dc.SessionOver):
            return self._step_session(
                txn, f"timeout:{kind.value}", lambda s: dc.session_on_timeout(s, self.wallet, self.config.max_retries)
            )
        if kind is cm.TimerKind.RETRANSMIT and txn in self.sellers:
            return self._step_seller(txn, "timeout", lambda s: cm.seller_on_timeout(s, self.config))
        return []

    # --- effects -------------------------------------------------------------

    def execute(self, effect):
        """Apply an internal effect; return external ones for the host."""
        if isinstance(effect, EXTERNAL):
            return effect
        if isinstance(effect, cm.AppendLog):
            self.log.append(effect.record)
        elif isinstance(effect, cm.EraseTxn):
            self.log.append(LogRecord.erase(effect.txn, effect.outcome))
        elif isinstance(effect, cm.ApplyWalletOp):
            self._set_wallet(self._wallet_op(effect))
        else:
            raise TypeError(f"unknown effect {effect!r}")
        return None

    def _wallet_op(self, effect: cm.ApplyWalletOp) -> WalletState:
        op, w = effect.op, self.wallet
        if op is cm.WalletOp.CREDIT:
            return credit(w, effect.amount)
        if op is cm.WalletOp.DEBIT_RESERVED:
            return debit_reserved(w, effect.amount, effect.txn)
        if op is cm.WalletOp.RELEASE:
            return release(w, effect.amount, effect.txn)
        if op is cm.WalletOp.RESERVE:
            return reserve(w, effect.amount, effect.txn)
        return restore_balance(w, effect.amount)

    # --- crash ---------------------------------------------------------------

    def restart(self) -> list:
        """Drop every volatile field, rebuild the machines from the log, and
        return the recovery effects for the host to run."""
        if self.reopen_log is not None:
            self.log = self.reopen_log()
        self._set_wallet(after_crash(self.wallet))
        self.sellers.clear()
        self.buyers.clear()
        self.sessions.clear()
        self.decided.clear()
        self.answered = frozenset()
        summary = recover_summary(self.log.scan())
        mine = {t: s for t, s in summary.items() if self.owns(t)}
        theirs = {t: s for t, s in summary.items() if not self.owns(t)}
        seller = cm.recover_seller(mine)
        buyer = cm.recover_buyer(theirs)
        self.sellers.update(seller.machines)
        self.buyers.update(buyer.machines)
        self.next_sequence = max(self.next_sequence, 1 + max((t.sequence for t in mine), default=0))
        self._note("restart", "-", f"sellers={len(seller.machines)} buyers={len(buyer.machines)}")
        return seller.effects + buyer.effects

    # --- inspection ----------------------------------------------------------

    def outcome(self, txn: TransactionId) -> str:
        """committed / aborted / in-doubt / none, from this node's point of view."""
        state = self.sellers.get(txn) or self.buyers.get(txn)
        if state is None:
            session = self.sessions.get(txn)
            if session is not None and not isinstance(session, dc.SessionOver):
                return "in-doubt"
            return "none"
        if isinstance(state, cm.SellerDone):
            return "committed" if state.outcome.committed else "aborted"
        if isinstance(state, cm.BuyerCommitted):
            return "committed"
        if isinstance(state, cm.BuyerAborted):
            return "aborted"
        return "in-doubt"

    def seller_credited(self, txn: TransactionId) -> bool:
        state = self.sellers.get(txn)
        return isinstance(state, cm.SellerDone) and state.outcome is cm.DoneOutcome.COMMITTED

    def buyer_debited(self, txn: TransactionId) -> bool:
        return isinstance(self.buyers.get(txn), cm.BuyerCommitted)

    def key(self) -> tuple:
        """Hashable snapshot of everything that influences future behaviour."""
        w = self.wallet
        return (
            w.balance,
            w.reserved,
            tuple(sorted(w.holds.items())),
            tuple(self.log.records),
            tuple(sorted(self.sellers.items(), key=lambda kv: kv[0])),
            tuple(sorted(self.buyers.items(), key=lambda kv: kv[0])),
            tuple(sorted(self.sessions.items(), key=lambda kv: kv[0])),
            tuple(sorted(self.answered)),
            tuple(sorted(self.decided.items(), key=lambda kv: kv[0])),
            self.next_sequence,
        )

    def copy(self) -> ProtocolNode:
        clone = ProtocolNode.__new__(ProtocolNode)
        clone.__dict__.update(self.__dict__)
        clone.log = self.log.copy()
        clone.sellers = dict(self.sellers)
        clone.buyers = dict(self.buyers)
        clone.sessions = dict(self.sessions)
        clone.decided = dict(self.decided)
        return clone

    def describe(self) -> str:
        parts = [f"{t}:{cm.describe(s)}" for t, s in self.sellers.items()]
        parts += [f"{t}:{cm.describe(s)}" for t, s in self.buyers.items()]
        parts += [f"{t}:{dc.describe_session(s)}" for t, s in self.sessions.items() if not isinstance(s, dc.SessionOver)]
        return f"bal={self.wallet.balance} res={self.wallet.reserved} [{', '.join(parts)}]"

