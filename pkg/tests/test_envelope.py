import random

import pytest

from p2pwallet.envelope import (
    MAX_PLAINTEXT,
    Envelope,
    EnvelopeError,
    IntegrityFailure,
    KeyMismatch,
    KeyUnwrapFailure,
    MalformedEnvelope,
    PlaintextTooLarge,
    ReferenceSuite,
    SignatureInvalid,
    ToySuite,
    get_suite,
    open_envelope,
    seal,
)

TOY = ToySuite()
SECRET = bytes(range(32))


def keys(suite, n, seed=0):
    rng = random.Random(seed)
    return [suite.generate_keypair(rng) for _ in range(n)]


@pytest.fixture(scope="module")
def ref_keys():
    # RSA keygen is slow; share two keypairs across the module.
    return keys(ReferenceSuite(), 2)


def test_toy_round_trip_including_empty():
    (a_priv, a_pub), (b_priv, b_pub) = keys(TOY, 2)
    for message in (b"", b"x", bytes(64), bytes(range(256)) * 4):
        env = seal(message, a_priv, b_pub, SECRET, TOY)
        assert open_envelope(env.to_bytes(), b_priv, a_pub, TOY) == message


def test_every_single_bit_flip_is_rejected():
    (a_priv, a_pub), (b_priv, b_pub) = keys(TOY, 2)
    message = bytes(range(64))
    data = seal(message, a_priv, b_pub, SECRET, TOY).to_bytes()
    for bit in range(len(data) * 8):
        tampered = bytearray(data)
        tampered[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(EnvelopeError):
            open_envelope(bytes(tampered), b_priv, a_pub, TOY)


def test_wrong_sender_key_matrix():
    ids = keys(TOY, 3, seed=5)
    for s, (s_priv, s_pub) in enumerate(ids):
        for r, (r_priv, r_pub) in enumerate(ids):
            env = seal(b"pay 40", s_priv, r_pub, SECRET, TOY)
            for claimed, (_, c_pub) in enumerate(ids):
                if claimed == s:
                    assert open_envelope(env, r_priv, c_pub, TOY) == b"pay 40"
                else:
                    with pytest.raises(SignatureInvalid):
                        open_envelope(env, r_priv, c_pub, TOY)


def test_wrong_receiver_cannot_unwrap():
    (a_priv, a_pub), (b_priv, b_pub), (c_priv, _) = keys(TOY, 3)
    env = seal(b"m", a_priv, b_pub, SECRET, TOY)
    with pytest.raises(KeyUnwrapFailure):
        open_envelope(env, c_priv, a_pub, TOY)


def test_fresh_secret_changes_the_ciphertext():
    (a_priv, _), (_, b_pub) = keys(TOY, 2)
    one = seal(b"same message", a_priv, b_pub, SECRET, TOY)
    two = seal(b"same message", a_priv, b_pub, bytes(32), TOY)
    assert one.body != two.body and one.wrapped_key != two.wrapped_key
    # Same inputs, same bytes: the toy suite is deterministic.
    assert seal(b"same message", a_priv, b_pub, SECRET, TOY) == one


def test_malformed_envelopes():
    (a_priv, a_pub), (b_priv, b_pub) = keys(TOY, 2)
    data = seal(b"hello", a_priv, b_pub, SECRET, TOY).to_bytes()
    for cut in range(len(data)):
        with pytest.raises(EnvelopeError):
            open_envelope(data[:cut], b_priv, a_pub, TOY)
    with pytest.raises(MalformedEnvelope):
        Envelope.from_bytes(data + b"\x00")


def test_swapped_body_fails_integrity():
    (a_priv, a_pub), (b_priv, b_pub) = keys(TOY, 2)
    one = seal(b"pay 40", a_priv, b_pub, SECRET, TOY)
    two = seal(b"pay 90", a_priv, b_pub, SECRET, TOY)
    # Same secret, so the body decrypts; the signature belongs to the other text.
    spliced = Envelope(one.wrapped_key, one.body[: TOY.signature_size] + two.body[TOY.signature_size :])
    with pytest.raises(IntegrityFailure):
        open_envelope(spliced, b_priv, a_pub, TOY)


def test_limits_and_key_sizes():
    (a_priv, a_pub), (_, b_pub) = keys(TOY, 2)
    with pytest.raises(PlaintextTooLarge):
        seal(bytes(MAX_PLAINTEXT + 1), a_priv, b_pub, SECRET, TOY)
    with pytest.raises(ValueError):
        seal(b"", a_priv, b_pub, b"short", TOY)
    with pytest.raises(KeyMismatch):
        seal(b"", a_priv, b"\x00" * 3, SECRET, TOY)
    assert len(seal(bytes(MAX_PLAINTEXT), a_priv, b_pub, SECRET, TOY).body) == MAX_PLAINTEXT + TOY.signature_size


def test_suite_lookup():
    assert get_suite("toy").name == "toy"
    assert get_suite("reference").name == "reference"
    with pytest.raises(ValueError):
        get_suite("rot13")


def test_reference_round_trip_and_tamper(ref_keys):
    suite = ReferenceSuite()
    (a_priv, a_pub), (b_priv, b_pub) = ref_keys
    env = seal(b"reference", a_priv, b_pub, SECRET, suite)
    assert open_envelope(env.to_bytes(), b_priv, a_pub, suite) == b"reference"
    body = bytearray(env.body)
    body[-1] ^= 1
    with pytest.raises(IntegrityFailure):
        open_envelope(Envelope(env.wrapped_key, bytes(body)), b_priv, a_pub, suite)
    with pytest.raises(SignatureInvalid):
        open_envelope(env, b_priv, b_pub, suite)
    with pytest.raises(KeyUnwrapFailure):
        open_envelope(env, a_priv, a_pub, suite)


def test_body_bit_flips_are_integrity_failures():
    (a_priv, a_pub), (b_priv, b_pub) = keys(TOY, 2)
    env = seal(bytes(64), a_priv, b_pub, SECRET, TOY)
    for bit in range(len(env.body) * 8):
        body = bytearray(env.body)
        body[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(IntegrityFailure):
            open_envelope(Envelope(env.wrapped_key, bytes(body)), b_priv, a_pub, TOY)


def test_one_byte_truncation_is_malformed():
    (a_priv, a_pub), (b_priv, b_pub) = keys(TOY, 2)
    data = seal(bytes(1024), a_priv, b_pub, SECRET, TOY).to_bytes()
    with pytest.raises(MalformedEnvelope):
        open_envelope(data[:-1], b_priv, a_pub, TOY)
