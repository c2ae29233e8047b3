import random

import pytest

from p2pwallet import commit as cm
from p2pwallet import discovery as dc
from p2pwallet.envelope import EnvelopeError
from p2pwallet.runtime.wire import (
    FrameType,
    WireError,
    WireFrame,
    decode_inbound,
    decode_message,
    encode_message,
    encode_outbound,
)
from p2pwallet.wallet import NodeId, TransactionId, WalletError, add_peer

TXN = TransactionId.new(NodeId.from_name("S"), 5)
SECRET = bytes(32)

MESSAGES = [
    dc.Quote(TXN, NodeId.from_name("S"), 40, b"two coffees"),
    dc.QuoteDecision(TXN, True),
    dc.QuoteDecision(TXN, False, "InsufficientFunds"),
    cm.CommitRequest(TXN, 40),
    cm.Agreed(TXN),
    cm.AbortMsg(TXN),
    cm.Commit(TXN),
    cm.Committed(TXN),
]


def test_frame_round_trip_and_header():
    frame = WireFrame(FrameType.LOOKUP, b"abc")
    data = frame.to_bytes()
    assert data[:4] == b"PPAY" and data[4:6] == b"\x01\x00" and data[6] == 1
    assert WireFrame.from_bytes(data) == frame


@pytest.mark.parametrize(
    "data",
    [
        b"",
        b"PPAY",
        b"XPAY\x01\x00\x01\x00\x00\x00\x00",
        b"PPAY\x02\x00\x01\x00\x00\x00\x00",
        b"PPAY\x01\x00\x09\x00\x00\x00\x00",
        b"PPAY\x01\x00\x01\x05\x00\x00\x00ab",
    ],
)
def test_bad_frames(data):
    with pytest.raises(WireError):
        WireFrame.from_bytes(data)


@pytest.mark.parametrize("message", MESSAGES, ids=lambda m: type(m).__name__)
def test_message_codec(message):
    assert decode_message(encode_message(message)) == message
    with pytest.raises(WireError):
        decode_message(encode_message(message) + b"\x00")


def linked(pair):
    seller, buyer = pair
    seller = add_peer(seller, buyer.node, buyer.keys.public)
    buyer = add_peer(buyer, seller.node, seller.keys.public)
    return seller, buyer


def test_enveloped_round_trip(pair):
    seller, buyer = linked(pair)
    for message in MESSAGES:
        data = encode_outbound(message, seller, buyer.keys.public, SECRET)
        assert decode_inbound(data, buyer) == (seller.node, message)


def test_discovery_travels_in_clear(pair):
    seller, buyer = pair
    packet = dc.broadcast_lookup(seller, b"n" * 8)
    assert decode_inbound(encode_outbound(packet, seller, None, b""), buyer) == (seller.node, packet)
    response = dc.LookupResponse(buyer.node, b"n" * 8, buyer.keys.public, buyer.keys.attestation)
    assert decode_inbound(encode_outbound(response, buyer, None, b""), seller)[1] == response


def test_unknown_sender_is_refused(pair):
    seller, buyer = pair
    data = encode_outbound(cm.Agreed(TXN), seller, buyer.keys.public, SECRET)
    with pytest.raises(WireError):
        decode_inbound(data, buyer)
    with pytest.raises(WireError):
        encode_outbound(cm.Agreed(TXN), seller, None, SECRET)


def test_random_corruption_is_always_rejected(pair):
    seller, buyer = linked(pair)
    data = encode_outbound(cm.CommitRequest(TXN, 40), seller, buyer.keys.public, SECRET)
    rng = random.Random(7)
    for _ in range(2000):
        mutated = bytearray(data)
        for _ in range(rng.randint(1, 4)):
            mutated[rng.randrange(len(mutated))] ^= 1 << rng.randrange(8)
        if mutated == data:
            # Two flips of the same bit cancel out.
            continue
        try:
            decode_inbound(bytes(mutated), buyer)
        except (WireError, EnvelopeError, WalletError, ValueError):
            continue
        pytest.fail("corrupted datagram accepted")
