"""Two-party atomic commit between a seller (coordinator) and a buyer.

Both roles are pure functions ``(state, input) -> (state', effects)``. Effects
are plain data executed in order by a host (simulator, explorer or network
runtime), so a crash can be injected between any two of them.

Seller: Idle -> Preparing -> Committing -> Done(committed)
                          \\-> Aborting  -> Done(aborted)
Buyer:  Idle -> Prepared -> Committed | Aborted
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Mapping, Union

from .stablelog import BalanceSnapshot, LogRecord, Outcome, RecordKind, TxnStatus, TxnSummary
from .wallet import NodeId, TransactionId, WalletState, ZeroAmount


class InvalidTransition(Exception):
    pass


class CorruptLog(Exception):
    pass


# --- messages ----------------------------------------------------------------


@dataclass(frozen=True)
class CommitRequest:
    txn: TransactionId
    amount: int


@dataclass(frozen=True)
class Agreed:
    txn: TransactionId


@dataclass(frozen=True)
class AbortMsg:
    txn: TransactionId


@dataclass(frozen=True)
class Commit:
    txn: TransactionId


@dataclass(frozen=True)
class Committed:
    txn: TransactionId


ProtocolMessage = Union[CommitRequest, Agreed, AbortMsg, Commit, Committed]


# --- states ------------------------------------------------------------------


class DoneOutcome(enum.Enum):
    COMMITTED = "committed"
    ABORTED = "aborted"
    # Retransmission budget ran out before the buyer acknowledged; the log still
    # holds the decision so a restart resumes retransmitting.
    COMMITTED_UNACKED = "committed-unacked"
    ABORTED_UNACKED = "aborted-unacked"

    @property
    def committed(self) -> bool:
        return self in (DoneOutcome.COMMITTED, DoneOutcome.COMMITTED_UNACKED)


@dataclass(frozen=True)
class Idle:
    pass


@dataclass(frozen=True)
class Preparing:
    txn: TransactionId
    amount: int
    buyer: NodeId
    retries: int = 0


@dataclass(frozen=True)
class Committing:
    txn: TransactionId
    amount: int
    buyer: NodeId
    retries: int = 0


@dataclass(frozen=True)
class Aborting:
    txn: TransactionId
    amount: int
    buyer: NodeId
    retries: int = 0


@dataclass(frozen=True)
class SellerDone:
    txn: TransactionId
    outcome: DoneOutcome
    buyer: NodeId
    amount: int = 0


@dataclass(frozen=True)
class Prepared:
    txn: TransactionId
    amount: int


@dataclass(frozen=True)
class BuyerCommitted:
    txn: TransactionId


@dataclass(frozen=True)
class BuyerAborted:
    txn: TransactionId


SellerState = Union[Idle, Preparing, Committing, Aborting, SellerDone]
BuyerState = Union[Idle, Prepared, BuyerCommitted, BuyerAborted]


def describe(state) -> str:
    if isinstance(state, Idle):
        return "Idle"
    name = type(state).__name__
    parts = [str(state.txn)]
    if isinstance(state, (Preparing, Committing, Aborting)):
        parts.append(f"r{state.retries}")
    if isinstance(state, SellerDone):
        parts.append(state.outcome.value)
    return f"{name}({' '.join(parts)})"


# --- effects -----------------------------------------------------------------


class TimerKind(enum.Enum):
    RETRANSMIT = "retransmit"
    HOLD = "hold"
    LOOKUP_WINDOW = "lookup-window"


class WalletOp(enum.Enum):
    RESERVE = "reserve"
    RELEASE = "release"
    DEBIT_RESERVED = "debit-reserved"
    CREDIT = "credit"
    RESTORE_BALANCE = "restore-balance"


@dataclass(frozen=True)
class SendMessage:
    to: NodeId
    message: object


@dataclass(frozen=True)
class AppendLog:
    record: LogRecord


@dataclass(frozen=True)
class StartTimer:
    txn: TransactionId
    kind: TimerKind = TimerKind.RETRANSMIT


@dataclass(frozen=True)
class CancelTimer:
    txn: TransactionId
    kind: TimerKind = TimerKind.RETRANSMIT


@dataclass(frozen=True)
class ApplyWalletOp:
    op: WalletOp
    amount: int
    txn: TransactionId | None = None


@dataclass(frozen=True)
class EraseTxn:
    txn: TransactionId
    outcome: Outcome


Effect = Union[SendMessage, AppendLog, StartTimer, CancelTimer, ApplyWalletOp, EraseTxn]


def describe_effect(effect: Effect) -> str:
    if isinstance(effect, SendMessage):
        return f"send {type(effect.message).__name__}->{effect.to}"
    if isinstance(effect, AppendLog):
        return f"log {effect.record.kind.name}"
    if isinstance(effect, StartTimer):
        return f"timer-start {effect.kind.value}"
    if isinstance(effect, CancelTimer):
        return f"timer-cancel {effect.kind.value}"
    if isinstance(effect, ApplyWalletOp):
        return f"wallet {effect.op.value} {effect.amount}"
    if isinstance(effect, EraseTxn):
        return f"erase {effect.outcome.value}"
    return repr(effect)


class TimeoutPolicy(enum.Enum):
    RETRY_THEN_ABORT = "retry"
    ABORT_IMMEDIATELY = "abort"


@dataclass(frozen=True)
class ProtocolConfig:
    max_retries: int = 3
    max_commit_retries: int = 16
    policy: TimeoutPolicy = TimeoutPolicy.RETRY_THEN_ABORT


DEFAULT_CONFIG = ProtocolConfig()

Transition = tuple[object, list]


# --- seller ------------------------------------------------------------------


def seller_start(
    state: SellerState, txn: TransactionId, amount: int, buyer: NodeId, wallet: WalletState
) -> Transition:
    """Begin the prepare phase for a quote the buyer already accepted.

    The seller logs its own UNDO/REDO pair before the first send so that a
    restart knows the amount and counterparty, and can presume abort.
    """
    if amount <= 0:
        raise ZeroAmount("transfer amount must be positive")
    if not isinstance(state, Idle):
        raise InvalidTransition(f"seller_start from {describe(state)}")
    before = BalanceSnapshot(wallet.balance, wallet.reserved, buyer)
    after = replace(before, balance=wallet.balance + amount)
    effects = [
        AppendLog(LogRecord.undo(txn, before)),
        AppendLog(LogRecord.redo(txn, after)),
        SendMessage(buyer, CommitRequest(txn, amount)),
        StartTimer(txn),
    ]
    return Preparing(txn, amount, buyer), effects


def _begin_abort(state: Preparing) -> Transition:
    effects = [
        AppendLog(LogRecord(state.txn, RecordKind.ABORT)),
        SendMessage(state.buyer, AbortMsg(state.txn)),
        StartTimer(state.txn),
    ]
    return Aborting(state.txn, state.amount, state.buyer), effects


def _finish_commit(state: Committing | SellerDone) -> Transition:
    effects = [
        CancelTimer(state.txn),
        ApplyWalletOp(WalletOp.CREDIT, state.amount),
        AppendLog(LogRecord(state.txn, RecordKind.COMPLETE)),
        EraseTxn(state.txn, Outcome.COMMITTED),
    ]
    return SellerDone(state.txn, DoneOutcome.COMMITTED, state.buyer, state.amount), effects


def seller_on_message(state: SellerState, msg: ProtocolMessage, sender: NodeId) -> Transition:
    if isinstance(state, Idle):
        # No durable trace of the transaction: nothing was ever decided, so
        # answer a vote with presumed abort.
        if isinstance(msg, Agreed):
            return state, [SendMessage(sender, AbortMsg(msg.txn))]
        return state, []
    if msg.txn != state.txn:
        return state, []

    if isinstance(state, Preparing):
        if isinstance(msg, Agreed):
            effects = [
                AppendLog(LogRecord(state.txn, RecordKind.COMMIT)),
                SendMessage(state.buyer, Commit(state.txn)),
                StartTimer(state.txn),
            ]
            return Committing(state.txn, state.amount, state.buyer), effects
        if isinstance(msg, AbortMsg):
            return _begin_abort(state)
        return state, []

    if isinstance(state, Committing):
        if isinstance(msg, Committed):
            return _finish_commit(state)
        return state, []

    if isinstance(state, Aborting):
        if isinstance(msg, AbortMsg):
            effects = [CancelTimer(state.txn), EraseTxn(state.txn, Outcome.ABORTED)]
            return SellerDone(state.txn, DoneOutcome.ABORTED, state.buyer, state.amount), effects
        return state, []

    # SellerDone: answer stale votes with the decision; absorb late acks.
    if isinstance(msg, Agreed):
        reply = Commit(state.txn) if state.outcome.committed else AbortMsg(state.txn)
        return state, [SendMessage(state.buyer, reply)]
    if state.outcome is DoneOutcome.COMMITTED_UNACKED and isinstance(msg, Committed):
        return _finish_commit(state)
    if state.outcome is DoneOutcome.ABORTED_UNACKED and isinstance(msg, AbortMsg):
        done = replace(state, outcome=DoneOutcome.ABORTED)
        return done, [EraseTxn(state.txn, Outcome.ABORTED)]
    return state, []


def seller_on_timeout(state: SellerState, config: ProtocolConfig = DEFAULT_CONFIG) -> Transition:
    if isinstance(state, Preparing):
        if config.policy is TimeoutPolicy.ABORT_IMMEDIATELY or state.retries >= config.max_retries:
            return _begin_abort(state)
        effects = [SendMessage(state.buyer, CommitRequest(state.txn, state.amount)), StartTimer(state.txn)]
        return replace(state, retries=state.retries + 1), effects
    if isinstance(state, Committing):
        if state.retries >= config.max_commit_retries:
            return SellerDone(state.txn, DoneOutcome.COMMITTED_UNACKED, state.buyer, state.amount), []
        effects = [SendMessage(state.buyer, Commit(state.txn)), StartTimer(state.txn)]
        return replace(state, retries=state.retries + 1), effects
    if isinstance(state, Aborting):
        if state.retries >= config.max_commit_retries:
            return SellerDone(state.txn, DoneOutcome.ABORTED_UNACKED, state.buyer, state.amount), []
        effects = [SendMessage(state.buyer, AbortMsg(state.txn)), StartTimer(state.txn)]
        return replace(state, retries=state.retries + 1), effects
    raise InvalidTransition(f"timeout in {describe(state)}")


# --- buyer -------------------------------------------------------------------


def buyer_on_message(state: BuyerState, msg: ProtocolMessage, wallet: WalletState, sender: NodeId) -> Transition:
    if isinstance(state, Idle):
        held = wallet.holds.get(msg.txn)
        if isinstance(msg, CommitRequest):
            if held != msg.amount:
                # Never accepted, or the hold was lost in a crash.
                return state, [SendMessage(sender, AbortMsg(msg.txn))]
            before = BalanceSnapshot(wallet.balance, wallet.reserved, sender)
            after = BalanceSnapshot(wallet.balance - msg.amount, wallet.reserved - msg.amount, sender)
            effects = [
                CancelTimer(msg.txn, TimerKind.HOLD),
                AppendLog(LogRecord.undo(msg.txn, before)),
                AppendLog(LogRecord.redo(msg.txn, after)),
                SendMessage(sender, Agreed(msg.txn)),
            ]
            return Prepared(msg.txn, msg.amount), effects
        if isinstance(msg, AbortMsg):
            if held:
                effects = [
                    CancelTimer(msg.txn, TimerKind.HOLD),
                    ApplyWalletOp(WalletOp.RELEASE, held, msg.txn),
                    SendMessage(sender, AbortMsg(msg.txn)),
                ]
                return BuyerAborted(msg.txn), effects
            return state, [SendMessage(sender, AbortMsg(msg.txn))]
        return state, []
    if msg.txn != state.txn:
        return state, []

    if isinstance(state, Prepared):
        if isinstance(msg, CommitRequest):
            return state, [SendMessage(sender, Agreed(state.txn))]
        if isinstance(msg, Commit):
            effects = [
                ApplyWalletOp(WalletOp.DEBIT_RESERVED, state.amount, state.txn),
                AppendLog(LogRecord(state.txn, RecordKind.COMPLETE)),
                SendMessage(sender, Committed(state.txn)),
                EraseTxn(state.txn, Outcome.COMMITTED),
            ]
            return BuyerCommitted(state.txn), effects
        if isinstance(msg, AbortMsg):
            effects = [
                ApplyWalletOp(WalletOp.RELEASE, state.amount, state.txn),
                AppendLog(LogRecord(state.txn, RecordKind.ABORT)),
                SendMessage(sender, AbortMsg(state.txn)),
                EraseTxn(state.txn, Outcome.ABORTED),
            ]
            return BuyerAborted(state.txn), effects
        return state, []

    if isinstance(state, BuyerCommitted):
        if isinstance(msg, Commit):
            return state, [SendMessage(sender, Committed(state.txn))]
        return state, []

    # BuyerAborted
    if isinstance(msg, (CommitRequest, AbortMsg)):
        return state, [SendMessage(sender, AbortMsg(state.txn))]
    return state, []


def buyer_on_hold_timeout(state: BuyerState, txn: TransactionId, wallet: WalletState) -> Transition:
    """An accepted quote never turned into a commit request: give the funds back."""
    held = wallet.holds.get(txn)
    if not isinstance(state, Idle) or not held:
        return state, []
    return BuyerAborted(txn), [ApplyWalletOp(WalletOp.RELEASE, held, txn)]


# --- recovery ----------------------------------------------------------------


@dataclass
class Recovery:
    machines: dict
    effects: list


def _check(txn: TransactionId, info: TxnSummary) -> None:
    if info.has_commit and info.has_abort:
        raise CorruptLog(f"{txn} has both COMMIT and ABORT records")
    if info.status is not TxnStatus.ERASED and info.undo is None:
        raise CorruptLog(f"{txn} has outcome records but no UNDO snapshot")


def recover_seller(summary: Mapping[TransactionId, TxnSummary]) -> Recovery:
    machines: dict = {}
    effects: list = []
    for txn, info in summary.items():
        _check(txn, info)
        if info.status is TxnStatus.ERASED:
            outcome = DoneOutcome.COMMITTED if info.erased_outcome is Outcome.COMMITTED else DoneOutcome.ABORTED
            buyer = info.undo.peer if info.undo else None
            machines[txn] = SellerDone(txn, outcome, buyer, info.amount or 0)
            continue
        buyer = info.undo.peer
        amount = info.amount or 0
        if info.status is TxnStatus.COMPLETED:
            machines[txn] = SellerDone(txn, DoneOutcome.COMMITTED, buyer, amount)
            effects.append(EraseTxn(txn, Outcome.COMMITTED))
        elif info.status is TxnStatus.COMMITTED:
            if info.redo is None:
                raise CorruptLog(f"{txn} committed without a REDO snapshot")
            # Any credit applied before the crash is rolled back and re-applied on ack.
            machines[txn] = Committing(txn, amount, buyer)
            effects += [
                ApplyWalletOp(WalletOp.RESTORE_BALANCE, info.undo.balance),
                SendMessage(buyer, Commit(txn)),
                StartTimer(txn),
            ]
        elif info.status is TxnStatus.ABORTED:
            machines[txn] = Aborting(txn, amount, buyer)
            effects += [SendMessage(buyer, AbortMsg(txn)), StartTimer(txn)]
        else:
            # Prepared but undecided: the coordinator presumes abort.
            machines[txn] = Aborting(txn, amount, buyer)
            effects += [
                AppendLog(LogRecord(txn, RecordKind.ABORT)),
                SendMessage(buyer, AbortMsg(txn)),
                StartTimer(txn),
            ]
    return Recovery(machines, effects)


def recover_buyer(summary: Mapping[TransactionId, TxnSummary]) -> Recovery:
    machines: dict = {}
    effects: list = []
    for txn, info in summary.items():
        _check(txn, info)
        if info.has_commit:
            raise CorruptLog(f"{txn}: buyer logs never hold a COMMIT record")
        if info.status is TxnStatus.ERASED:
            committed = info.erased_outcome is Outcome.COMMITTED
            machines[txn] = BuyerCommitted(txn) if committed else BuyerAborted(txn)
        elif info.status is TxnStatus.COMPLETED:
            machines[txn] = BuyerCommitted(txn)
            effects.append(EraseTxn(txn, Outcome.COMMITTED))
        elif info.status is TxnStatus.ABORTED:
            machines[txn] = BuyerAborted(txn)
            effects += [ApplyWalletOp(WalletOp.RESTORE_BALANCE, info.undo.balance), EraseTxn(txn, Outcome.ABORTED)]
        elif info.redo is None:
            # Crashed between the two prepare appends; AGREED was never sent.
            machines[txn] = BuyerAborted(txn)
            effects += [
                ApplyWalletOp(WalletOp.RESTORE_BALANCE, info.undo.balance),
                AppendLog(LogRecord(txn, RecordKind.ABORT)),
                EraseTxn(txn, Outcome.ABORTED),
            ]
        else:
            amount = info.amount
            machines[txn] = Prepared(txn, amount)
            effects += [
                ApplyWalletOp(WalletOp.RESTORE_BALANCE, info.undo.balance),
                ApplyWalletOp(WalletOp.RESERVE, amount, txn),
            ]
    return Recovery(machines, effects)
