"""Wire framing and message codecs.

Frame: ``"PPAY"`` | u16 version | u8 type | u32 length | payload, integers
little-endian. LOOKUP and LOOKUP_RESPONSE travel in clear because they carry
the keys needed to open everything else; all other messages are sealed in an
envelope and sent as ENVELOPED frames whose payload is the 16-byte sender id
followed by the serialized envelope.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .. import commit as cm
from .. import discovery as dc
from ..envelope import open_envelope, seal
from ..wallet import NodeId, TransactionId, WalletState

MAGIC = b"PPAY"
VERSION = 1
_HEADER = struct.Struct("<4sHBI")
MAX_PAYLOAD = 70 * 1024


class WireError(Exception):
    pass


class FrameType(enum.IntEnum):
    LOOKUP = 1
    LOOKUP_RESPONSE = 2
    ENVELOPED = 3


class MessageType(enum.IntEnum):
    QUOTE = 1
    DECISION = 2
    COMMIT_REQUEST = 3
    AGREED = 4
    ABORT = 5
    COMMIT = 6
    COMMITTED = 7


@dataclass(frozen=True)
class WireFrame:
    msg_type: FrameType
    payload: bytes

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.msg_type, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> WireFrame:
        if len(data) < _HEADER.size:
            raise WireError("short frame")
        magic, version, kind, length = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise WireError("bad magic")
        if version != VERSION:
            raise WireError(f"unsupported version {version}")
        if length != len(data) - _HEADER.size or length > MAX_PAYLOAD:
            raise WireError("length mismatch")
        try:
            kind = FrameType(kind)
        except ValueError:
            raise WireError(f"unknown frame type {kind}") from None
        return cls(kind, bytes(data[_HEADER.size :]))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WireError("truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def lp(self) -> bytes:
        (n,) = struct.unpack("<I", self.take(4))
        return self.take(n)

    def node(self) -> NodeId:
        return NodeId(self.take(16))

    def txn(self) -> TransactionId:
        return TransactionId(self.take(16))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise WireError("trailing bytes")


def _lp(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


# --- discovery frames ---------------------------------------------------------


def encode_lookup(packet: dc.LookupPacket) -> bytes:
    payload = packet.seller.raw + packet.nonce + _lp(packet.seller_public) + _lp(packet.attestation)
    return WireFrame(FrameType.LOOKUP, payload).to_bytes()


def encode_response(response: dc.LookupResponse) -> bytes:
    payload = response.buyer.raw + response.nonce + _lp(response.buyer_public) + _lp(response.attestation)
    return WireFrame(FrameType.LOOKUP_RESPONSE, payload).to_bytes()


def _decode_discovery(frame: WireFrame):
    r = _Reader(frame.payload)
    node, nonce, public, attestation = r.node(), r.take(8), r.lp(), r.lp()
    r.done()
    if frame.msg_type is FrameType.LOOKUP:
        return dc.LookupPacket(node, nonce, public, attestation)
    return dc.LookupResponse(node, nonce, public, attestation)


# --- enveloped messages -------------------------------------------------------

_TXN_ONLY = {
    MessageType.AGREED: cm.Agreed,
    MessageType.ABORT: cm.AbortMsg,
    MessageType.COMMIT: cm.Commit,
    MessageType.COMMITTED: cm.Committed,
}
_TXN_ONLY_TAG = {v: k for k, v in _TXN_ONLY.items()}


def encode_message(message) -> bytes:
    if isinstance(message, dc.Quote):
        return (
            bytes([MessageType.QUOTE])
            + message.txn.raw
            + message.seller.raw
            + struct.pack("<Q", message.amount)
            + _lp(message.description)
        )
    if isinstance(message, dc.QuoteDecision):
        return bytes([MessageType.DECISION]) + message.txn.raw + bytes([message.accepted]) + _lp(message.reason.encode())
    if isinstance(message, cm.CommitRequest):
        return bytes([MessageType.COMMIT_REQUEST]) + message.txn.raw + struct.pack("<Q", message.amount)
    tag = _TXN_ONLY_TAG.get(type(message))
    if tag is None:
        raise WireError(f"cannot encode {message!r}")
    return bytes([tag]) + message.txn.raw


def decode_message(data: bytes):
    r = _Reader(data)
    try:
        kind = MessageType(r.u8())
    except ValueError:
        raise WireError("unknown message type") from None
    txn = r.txn()
    if kind is MessageType.QUOTE:
        msg = dc.Quote(txn, r.node(), r.u64(), r.lp())
    elif kind is MessageType.DECISION:
        accepted = r.u8()
        if accepted > 1:
            raise WireError("bad decision flag")
        try:
            reason = r.lp().decode()
        except UnicodeDecodeError:
            raise WireError("bad decision reason") from None
        msg = dc.QuoteDecision(txn, bool(accepted), reason)
    elif kind is MessageType.COMMIT_REQUEST:
        msg = cm.CommitRequest(txn, r.u64())
    else:
        msg = _TXN_ONLY[kind](txn)
    r.done()
    return msg


def seal_message(message, wallet: WalletState, peer_public: bytes, secret: bytes) -> bytes:
    envelope = seal(encode_message(message), wallet.keys.private, peer_public, secret, wallet.suite)
    return WireFrame(FrameType.ENVELOPED, wallet.node.raw + envelope.to_bytes()).to_bytes()


def encode_outbound(message, wallet: WalletState, peer_public: bytes | None, secret: bytes) -> bytes:
    if isinstance(message, dc.LookupPacket):
        return encode_lookup(message)
    if isinstance(message, dc.LookupResponse):
        return encode_response(message)
    if peer_public is None:
        raise WireError("no public key for peer")
    return seal_message(message, wallet, peer_public, secret)


def decode_inbound(data: bytes, wallet: WalletState) -> tuple[NodeId, object]:
    """Parse and authenticate one datagram; raises on anything invalid.

    Returns (claimed sender, message). Enveloped messages are only accepted
    from peers whose key is already in the directory.
    """
    frame = WireFrame.from_bytes(data)
    if frame.msg_type is not FrameType.ENVELOPED:
        msg = _decode_discovery(frame)
        return (msg.seller if isinstance(msg, dc.LookupPacket) else msg.buyer), msg
    if len(frame.payload) < 16:
        raise WireError("enveloped frame without sender")
    sender = NodeId(frame.payload[:16])
    peer_public = wallet.keys.peer_directory.get(sender)
    if peer_public is None:
        raise WireError(f"no key for {sender}")
    plaintext = open_envelope(frame.payload[16:], wallet.keys.private, peer_public, wallet.suite)
    return sender, decode_message(plaintext)
