"""Buyer discovery and price quoting, the exchange that precedes the commit.

The seller broadcasts a one-hop LOOKUP; only wallets in buyer mode answer.
The seller picks the response carrying the wanted node id, sends a quote,
and the buyer accepts it by placing a hold on the amount.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Union

from .commit import CancelTimer, SendMessage, StartTimer, TimerKind, describe
from .wallet import (
    InsufficientFunds,
    Mode,
    NodeId,
    TransactionId,
    WalletError,
    WalletState,
    ZeroAmount,
    reserve,
    verify_attestation,
)


class DiscoveryError(Exception):
    pass


class WrongMode(DiscoveryError):
    pass


class BuyerNotFound(DiscoveryError):
    pass


@dataclass(frozen=True)
class LookupPacket:
    seller: NodeId
    nonce: bytes
    # The seller's key rides along so the buyer can open the quote envelope.
    seller_public: bytes = b""
    attestation: bytes = b""


@dataclass(frozen=True)
class LookupResponse:
    buyer: NodeId
    nonce: bytes
    buyer_public: bytes = b""
    attestation: bytes = b""


@dataclass(frozen=True)
class Quote:
    txn: TransactionId
    seller: NodeId
    amount: int
    description: bytes


@dataclass(frozen=True)
class QuoteDecision:
    txn: TransactionId
    accepted: bool
    reason: str = ""


def lookup_nonce(txn: TransactionId, attempt: int) -> bytes:
    """Fresh per broadcast because transaction ids are never reused."""
    return hashlib.sha256(b"lookup" + txn.raw + attempt.to_bytes(4, "little")).digest()[:8]


def broadcast_lookup(seller_wallet: WalletState, nonce: bytes) -> LookupPacket:
    if seller_wallet.mode is not Mode.SELLER:
        raise WrongMode("only a seller-mode wallet broadcasts LOOKUP")
    keys = seller_wallet.keys
    return LookupPacket(seller_wallet.node, nonce, keys.public, keys.attestation)


def on_lookup(
    wallet: WalletState, packet: LookupPacket, answered: frozenset[bytes] = frozenset()
) -> tuple[LookupResponse | None, frozenset[bytes]]:
    """Answer iff in buyer mode; a nonce is answered at most once.

    Anything else stays silent, which is the power-saving behaviour for idle
    or selling nodes.
    """
    if wallet.mode is not Mode.BUYER or packet.nonce in answered:
        return None, answered
    keys = wallet.keys
    return LookupResponse(wallet.node, packet.nonce, keys.public, keys.attestation), answered | {packet.nonce}


def verify_peer(wallet: WalletState, node: NodeId, public: bytes, attestation: bytes) -> bool:
    return verify_attestation(wallet.suite, wallet.keys.office_public, node, public, attestation)


def select_buyer(responses: Iterable[LookupResponse], target: NodeId) -> NodeId:
    for response in responses:
        if response.buyer == target:
            return target
    raise BuyerNotFound(f"{target} did not answer the lookup")


def send_quote(
    seller_wallet: WalletState, buyer: NodeId, amount: int, txn: TransactionId, description: bytes = b"goods"
) -> Quote:
    if seller_wallet.mode is not Mode.SELLER:
        raise WrongMode("only a seller-mode wallet quotes")
    if amount <= 0:
        raise ZeroAmount("quotes must be positive")
    return Quote(txn, seller_wallet.node, amount, description)


def on_quote(
    buyer_wallet: WalletState, quote: Quote, decided: Mapping[TransactionId, QuoteDecision] | None = None
) -> tuple[WalletState, QuoteDecision]:
    """Accept by reserving the amount. A quote already decided gets the same
    answer again and reserves nothing further."""
    if buyer_wallet.mode is not Mode.BUYER:
        raise WrongMode("quote sent to a wallet that is not in buyer mode")
    if decided and quote.txn in decided:
        return buyer_wallet, decided[quote.txn]
    if quote.amount <= 0 or not quote.description:
        return buyer_wallet, QuoteDecision(quote.txn, False, "BadQuote")
    try:
        wallet = reserve(buyer_wallet, quote.amount, quote.txn)
    except InsufficientFunds:
        return buyer_wallet, QuoteDecision(quote.txn, False, "InsufficientFunds")
    except WalletError as exc:
        return buyer_wallet, QuoteDecision(quote.txn, False, type(exc).__name__)
    return wallet, QuoteDecision(quote.txn, True)


# --- seller purchase session -------------------------------------------------


@dataclass(frozen=True)
class Broadcast:
    packet: LookupPacket


@dataclass(frozen=True)
class BeginCommit:
    txn: TransactionId
    amount: int
    buyer: NodeId


@dataclass(frozen=True)
class SessionFailed:
    txn: TransactionId
    reason: str


@dataclass(frozen=True)
class LookingUp:
    txn: TransactionId
    target: NodeId
    amount: int
    description: bytes
    attempt: int = 0
    responses: tuple[LookupResponse, ...] = ()

    @property
    def nonce(self) -> bytes:
        return lookup_nonce(self.txn, self.attempt)


@dataclass(frozen=True)
class Quoting:
    txn: TransactionId
    quote: Quote
    buyer: NodeId
    attempt: int = 0


@dataclass(frozen=True)
class SessionOver:
    txn: TransactionId
    accepted: bool
    reason: str = ""


SessionState = Union[LookingUp, Quoting, SessionOver]


def describe_session(state: SessionState) -> str:
    if isinstance(state, LookingUp):
        return f"LookingUp({state.txn} a{state.attempt} n{len(state.responses)})"
    if isinstance(state, Quoting):
        return f"Quoting({state.txn} a{state.attempt})"
    if isinstance(state, SessionOver):
        return f"SessionOver({state.txn} {'accepted' if state.accepted else state.reason})"
    return describe(state)


def start_session(
    wallet: WalletState, txn: TransactionId, target: NodeId, amount: int, description: bytes = b"goods"
) -> tuple[SessionState, list]:
    if amount <= 0:
        raise ZeroAmount("purchase amount must be positive")
    state = LookingUp(txn, target, amount, description)
    packet = broadcast_lookup(wallet, state.nonce)
    return state, [Broadcast(packet), StartTimer(txn, TimerKind.LOOKUP_WINDOW)]


def session_on_response(state: SessionState, response: LookupResponse) -> tuple[SessionState, list]:
    if not isinstance(state, LookingUp) or response.nonce != state.nonce:
        return state, []
    if any(r.buyer == response.buyer for r in state.responses):
        return state, []
    return replace(state, responses=state.responses + (response,)), []


def session_on_decision(state: SessionState, decision: QuoteDecision) -> tuple[SessionState, list]:
    if not isinstance(state, Quoting) or decision.txn != state.txn:
        return state, []
    cancel = CancelTimer(state.txn)
    if decision.accepted:
        return SessionOver(state.txn, True), [cancel, BeginCommit(state.txn, state.quote.amount, state.buyer)]
    return SessionOver(state.txn, False, decision.reason), [cancel, SessionFailed(state.txn, decision.reason)]


def session_on_timeout(state: SessionState, wallet: WalletState, max_retries: int) -> tuple[SessionState, list]:
    if isinstance(state, LookingUp):
        try:
            buyer = select_buyer(state.responses, state.target)
        except BuyerNotFound:
            if state.attempt >= max_retries:
                return SessionOver(state.txn, False, "BuyerNotFound"), [SessionFailed(state.txn, "BuyerNotFound")]
            nxt = replace(state, attempt=state.attempt + 1, responses=())
            packet = broadcast_lookup(wallet, nxt.nonce)
            return nxt, [Broadcast(packet), StartTimer(state.txn, TimerKind.LOOKUP_WINDOW)]
        quote = send_quote(wallet, buyer, state.amount, state.txn, state.description)
        return Quoting(state.txn, quote, buyer), [SendMessage(buyer, quote), StartTimer(state.txn)]
    if isinstance(state, Quoting):
        if state.attempt >= max_retries:
            return SessionOver(state.txn, False, "QuoteTimeout"), [SessionFailed(state.txn, "QuoteTimeout")]
        nxt = replace(state, attempt=state.attempt + 1)
        return nxt, [SendMessage(state.buyer, state.quote), StartTimer(state.txn)]
    return state, []
