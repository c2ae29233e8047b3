"""Hybrid sign-then-encrypt message envelope.

Sender side: hash the message, sign the digest with the sender's private
key, prepend the signature to the message, encrypt the result under a
fresh symmetric secret, and wrap that secret under the receiver's public
key. The receiver reverses the steps and rejects the message unless the
digest recovered from the signature equals the digest of the decrypted
plaintext.

Two primitive suites are provided:

* ``ReferenceSuite``: SHA-256, RSA-2048 PKCS#1 v1.5 signatures, RSA-OAEP key
  wrapping, AES-256-CTR.
* ``ToySuite``: deterministic 8-byte keys built from SHA-256. It exists so
  tamper tests can be exhaustive and simulations reproducible. It is NOT
  SECURE: anyone holding a public key can forge signatures and unwrap keys.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa, utils
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

MAX_PLAINTEXT = 64 * 1024
SECRET_SIZE = 32

_U32 = struct.Struct("<I")


class EnvelopeError(Exception):
    """Base class for envelope failures; callers treat all of them as a drop."""


class KeyMismatch(EnvelopeError):
    pass


class PlaintextTooLarge(EnvelopeError):
    pass


class KeyUnwrapFailure(EnvelopeError):
    pass


class MalformedEnvelope(EnvelopeError):
    pass


class IntegrityFailure(EnvelopeError):
    pass


class SignatureInvalid(IntegrityFailure):
    """The signature did not verify under the claimed sender's public key."""


class PrimitiveSuite:
    """Interface shared by the reference and toy suites.

    Keys travel as bytes everywhere; each suite parses its own encoding.
    """

    name: str
    signature_size: int

    def hash(self, data: bytes) -> bytes:
        raise NotImplementedError

    def generate_keypair(self, rng: random.Random | None = None) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def public_from_private(self, private: bytes) -> bytes:
        raise NotImplementedError

    def sign(self, digest: bytes, private: bytes) -> bytes:
        raise NotImplementedError

    def recover(self, signature: bytes, public: bytes) -> bytes:
        """Return the digest carried by ``signature`` or raise SignatureInvalid."""
        raise NotImplementedError

    def wrap(self, secret: bytes, public: bytes) -> bytes:
        raise NotImplementedError

    def unwrap(self, wrapped: bytes, private: bytes) -> bytes:
        raise NotImplementedError

    def encrypt(self, data: bytes, secret: bytes) -> bytes:
        raise NotImplementedError

    def decrypt(self, data: bytes, secret: bytes) -> bytes:
        raise NotImplementedError

    # Convenience built on the primitives; used for vouchers and attestations.
    def sign_message(self, message: bytes, private: bytes) -> bytes:
        return self.sign(self.hash(message), private)

    def verify_message(self, message: bytes, signature: bytes, public: bytes) -> bool:
        try:
            recovered = self.recover(signature, public)
        except (SignatureInvalid, KeyMismatch):
            return False
        return hmac.compare_digest(recovered, self.hash(message))


def _keystream(key: bytes, label: bytes, length: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(label + key + counter.to_bytes(8, "little")).digest()
        counter += 1
    return bytes(out[:length])


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).to_bytes(len(a), "little")


class ToySuite(PrimitiveSuite):
    """Deterministic 8-byte-key suite. NOT SECURE; for tests and simulation only."""

    name = "toy"
    key_size = 8
    _tag_size = 8
    signature_size = 32 + _tag_size

    def _check_key(self, key: bytes) -> None:
        if not isinstance(key, (bytes, bytearray)) or len(key) != self.key_size:
            raise KeyMismatch(f"toy keys are {self.key_size} bytes")

    def hash(self, data: bytes) -> bytes:
        return hashlib.sha256(data).digest()

    def generate_keypair(self, rng: random.Random | None = None) -> tuple[bytes, bytes]:
        rng = rng or random.SystemRandom()
        private = rng.getrandbits(64).to_bytes(8, "little")
        return private, self.public_from_private(private)

    def public_from_private(self, private: bytes) -> bytes:
        self._check_key(private)
        return hashlib.sha256(b"toy-pub" + private).digest()[: self.key_size]

    def sign(self, digest: bytes, private: bytes) -> bytes:
        public = self.public_from_private(private)
        tag = hashlib.sha256(b"toy-sig" + public + digest).digest()[: self._tag_size]
        return _xor(digest, _keystream(public, b"sig", len(digest))) + tag

    def recover(self, signature: bytes, public: bytes) -> bytes:
        self._check_key(public)
        if len(signature) != self.signature_size:
            raise SignatureInvalid("bad signature length")
        digest = _xor(signature[:32], _keystream(public, b"sig", 32))
        tag = hashlib.sha256(b"toy-sig" + public + digest).digest()[: self._tag_size]
        if not hmac.compare_digest(tag, signature[32:]):
            raise SignatureInvalid("signature does not verify under sender key")
        return digest

    def wrap(self, secret: bytes, public: bytes) -> bytes:
        self._check_key(public)
        tag = hashlib.sha256(b"toy-kem" + public + secret).digest()[: self._tag_size]
        return _xor(secret, _keystream(public, b"kem", len(secret))) + tag

    def unwrap(self, wrapped: bytes, private: bytes) -> bytes:
        public = self.public_from_private(private)
        if len(wrapped) != SECRET_SIZE + self._tag_size:
            raise KeyUnwrapFailure("bad wrapped key length")
        secret = _xor(wrapped[:SECRET_SIZE], _keystream(public, b"kem", SECRET_SIZE))
        tag = hashlib.sha256(b"toy-kem" + public + secret).digest()[: self._tag_size]
        if not hmac.compare_digest(tag, wrapped[SECRET_SIZE:]):
            raise KeyUnwrapFailure("wrapped key not addressed to this receiver")
        return secret

    def encrypt(self, data: bytes, secret: bytes) -> bytes:
        return _xor(data, _keystream(secret, b"sym", len(data))) if data else b""

    decrypt = encrypt


@lru_cache(maxsize=64)
def _load_private(der: bytes) -> rsa.RSAPrivateKey:
    try:
        key = serialization.load_der_private_key(der, password=None)
    except (ValueError, TypeError) as exc:
        raise KeyMismatch("not a DER private key") from exc
    if not isinstance(key, rsa.RSAPrivateKey):
        raise KeyMismatch("reference suite needs an RSA key")
    return key


@lru_cache(maxsize=256)
def _load_public(der: bytes) -> rsa.RSAPublicKey:
    try:
        key = serialization.load_der_public_key(der)
    except (ValueError, TypeError) as exc:
        raise KeyMismatch("not a DER public key") from exc
    if not isinstance(key, rsa.RSAPublicKey):
        raise KeyMismatch("reference suite needs an RSA key")
    return key


_OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None)


class ReferenceSuite(PrimitiveSuite):
    """SHA-256 / RSA-2048 PKCS#1 v1.5 / RSA-OAEP / AES-256-CTR."""

    name = "reference"
    key_bits = 2048
    signature_size = key_bits // 8

    def hash(self, data: bytes) -> bytes:
        return hashlib.sha256(data).digest()

    def generate_keypair(self, rng: random.Random | None = None) -> tuple[bytes, bytes]:
        # RSA generation always draws from OS entropy; rng is accepted for interface parity.
        key = rsa.generate_private_key(public_exponent=65537, key_size=self.key_bits)
        private = key.private_bytes(
            serialization.Encoding.DER, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
        )
        return private, self.public_from_private(private)

    def public_from_private(self, private: bytes) -> bytes:
        return _load_private(bytes(private)).public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        )

    def sign(self, digest: bytes, private: bytes) -> bytes:
        key = _load_private(bytes(private))
        return key.sign(digest, padding.PKCS1v15(), utils.Prehashed(hashes.SHA256()))

    def recover(self, signature: bytes, public: bytes) -> bytes:
        key = _load_public(bytes(public))
        try:
            return key.recover_data_from_signature(signature, padding.PKCS1v15(), hashes.SHA256())
        except (InvalidSignature, ValueError) as exc:
            raise SignatureInvalid("signature does not verify under sender key") from exc

    def wrap(self, secret: bytes, public: bytes) -> bytes:
        return _load_public(bytes(public)).encrypt(secret, _OAEP)

    def unwrap(self, wrapped: bytes, private: bytes) -> bytes:
        key = _load_private(bytes(private))
        try:
            return key.decrypt(wrapped, _OAEP)
        except ValueError as exc:
            raise KeyUnwrapFailure("wrapped key not addressed to this receiver") from exc

    def _cipher(self, secret: bytes) -> Cipher:
        # Each secret encrypts exactly one message, so a fixed counter block is safe.
        return Cipher(algorithms.AES(secret), modes.CTR(bytes(16)))

    def encrypt(self, data: bytes, secret: bytes) -> bytes:
        enc = self._cipher(secret).encryptor()
        return enc.update(data) + enc.finalize()

    def decrypt(self, data: bytes, secret: bytes) -> bytes:
        dec = self._cipher(secret).decryptor()
        return dec.update(data) + dec.finalize()


SUITES: dict[str, PrimitiveSuite] = {"reference": ReferenceSuite(), "toy": ToySuite()}


def get_suite(name: str) -> PrimitiveSuite:
    try:
        return SUITES[name]
    except KeyError:
        raise ValueError(f"unknown primitive suite {name!r}") from None


@dataclass(frozen=True)
class Envelope:
    wrapped_key: bytes
    body: bytes

    def to_bytes(self) -> bytes:
        return (
            _U32.pack(len(self.wrapped_key)) + self.wrapped_key + _U32.pack(len(self.body)) + self.body
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> Envelope:
        if len(data) < 4:
            raise MalformedEnvelope("short envelope")
        (klen,) = _U32.unpack_from(data, 0)
        offset = 4 + klen
        if offset + 4 > len(data):
            raise MalformedEnvelope("wrapped key overruns envelope")
        (blen,) = _U32.unpack_from(data, offset)
        if offset + 4 + blen != len(data):
            raise MalformedEnvelope("body length does not match envelope size")
        return cls(bytes(data[4:offset]), bytes(data[offset + 4 :]))


def seal(
    plaintext: bytes,
    sender_private: bytes,
    receiver_public: bytes,
    fresh_secret: bytes,
    suite: PrimitiveSuite,
) -> Envelope:
    if len(plaintext) > MAX_PLAINTEXT:
        raise PlaintextTooLarge(f"{len(plaintext)} bytes exceeds {MAX_PLAINTEXT}")
    if len(fresh_secret) != SECRET_SIZE:
        raise ValueError(f"fresh secret must be {SECRET_SIZE} bytes")
    digest = suite.hash(plaintext)
    signature = suite.sign(digest, sender_private)
    body = suite.encrypt(signature + plaintext, fresh_secret)
    wrapped = suite.wrap(fresh_secret, receiver_public)
    return Envelope(wrapped, body)


def open_envelope(
    envelope: Envelope | bytes,
    receiver_private: bytes,
    sender_public: bytes,
    suite: PrimitiveSuite,
) -> bytes:
    if not isinstance(envelope, Envelope):
        envelope = Envelope.from_bytes(envelope)
    secret = suite.unwrap(envelope.wrapped_key, receiver_private)
    if len(secret) != SECRET_SIZE:
        raise KeyUnwrapFailure("unwrapped secret has the wrong size")
    inner = suite.decrypt(envelope.body, secret)
    if len(inner) < suite.signature_size:
        raise MalformedEnvelope("body shorter than a signature")
    signature, plaintext = inner[: suite.signature_size], inner[suite.signature_size :]
    claimed = suite.recover(signature, sender_public)
    if not hmac.compare_digest(claimed, suite.hash(plaintext)):
        raise IntegrityFailure("message digest does not match signed digest")
    return plaintext
