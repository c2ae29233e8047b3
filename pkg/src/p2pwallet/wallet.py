"""Money, identities, wallet state and the charging office.

Every wallet operation is a pure transition: it takes a ``WalletState`` and
returns a new one, raising instead of returning a partially updated value.
"""

from __future__ import annotations

import enum
import os
import random
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, NewType

from .envelope import PrimitiveSuite, get_suite

MoneyAmount = NewType("MoneyAmount", int)
MAX_MONEY = 2**64 - 1

ID_SIZE = 16


class WalletError(Exception):
    pass


class DuplicateNode(WalletError):
    pass


class UnknownNode(WalletError):
    pass


class ZeroAmount(WalletError):
    pass


class BadSignature(WalletError):
    pass


class WrongBeneficiary(WalletError):
    pass


class ReplayedVoucher(WalletError):
    pass


class Overflow(WalletError):
    pass


class InsufficientFunds(WalletError):
    pass


class InsufficientReservation(WalletError):
    pass


class CorruptWalletFile(WalletError):
    pass


def check_amount(value: int) -> MoneyAmount:
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeError(f"money amounts are integers of minor units, got {value!r}")
    if value < 0:
        raise ValueError("money amounts are unsigned")
    if value > MAX_MONEY:
        raise Overflow(f"{value} does not fit in 64 bits")
    return MoneyAmount(value)


def _add(a: int, b: int) -> MoneyAmount:
    total = a + b
    if total > MAX_MONEY:
        raise Overflow(f"{a} + {b} overflows 64 bits")
    return MoneyAmount(total)


@dataclass(frozen=True, order=True)
class NodeId:
    raw: bytes

    def __post_init__(self) -> None:
        if len(self.raw) != ID_SIZE:
            raise ValueError(f"node ids are {ID_SIZE} bytes, got {len(self.raw)}")

    @classmethod
    def from_name(cls, name: str) -> NodeId:
        """Map a short human label (``"N1"``) or 32 hex digits to an id."""
        if len(name) == 2 * ID_SIZE:
            try:
                return cls(bytes.fromhex(name))
            except ValueError:
                pass
        data = name.encode("utf-8")
        if not data or len(data) > ID_SIZE:
            raise ValueError(f"node name must be 1..{ID_SIZE} bytes: {name!r}")
        return cls(data.ljust(ID_SIZE, b"\0"))

    @property
    def label(self) -> str:
        stripped = self.raw.rstrip(b"\0")
        try:
            text = stripped.decode("ascii")
        except UnicodeDecodeError:
            return self.raw.hex()
        if stripped and text.isprintable() and b"\0" not in stripped:
            return text
        return self.raw.hex()

    def __str__(self) -> str:
        return self.label

    def __repr__(self) -> str:
        return f"NodeId({self.label!r})"


@dataclass(frozen=True, order=True)
class TransactionId:
    """8-byte prefix of the initiating node's id followed by a per-node u64."""

    raw: bytes

    def __post_init__(self) -> None:
        if len(self.raw) != ID_SIZE:
            raise ValueError(f"transaction ids are {ID_SIZE} bytes")

    @classmethod
    def new(cls, initiator: NodeId, sequence: int) -> TransactionId:
        return cls(initiator.raw[:8] + struct.pack("<Q", sequence))

    @property
    def sequence(self) -> int:
        return struct.unpack("<Q", self.raw[8:])[0]

    @property
    def short(self) -> str:
        prefix = self.raw[:8].rstrip(b"\0")
        try:
            name = prefix.decode("ascii")
        except UnicodeDecodeError:
            name = self.raw[:8].hex()
        return f"{name}#{self.sequence:x}"

    def __str__(self) -> str:
        return self.short

    def __repr__(self) -> str:
        return f"TransactionId({self.short!r})"


class Mode(enum.IntEnum):
    IDLE = 0
    SELLER = 1
    BUYER = 2


@dataclass(frozen=True)
class KeyMaterial:
    private: bytes = field(repr=False)
    public: bytes
    office_public: bytes
    # Office signature binding this node's id to its public key.
    attestation: bytes = b""
    peer_directory: Mapping[NodeId, bytes] = field(default_factory=dict)


@dataclass(frozen=True)
class SignedOutcome:
    outcome: str
    signature: bytes


@dataclass(frozen=True)
class WalletState:
    node: NodeId
    balance: MoneyAmount
    reserved: MoneyAmount
    keys: KeyMaterial
    mode: Mode = Mode.IDLE
    history: Mapping[TransactionId, SignedOutcome] = field(default_factory=dict)
    seen_serials: frozenset[int] = frozenset()
    # Per-transaction funds holds; ``reserved`` is always their sum.
    holds: Mapping[TransactionId, MoneyAmount] = field(default_factory=dict)
    suite_name: str = "reference"

    @property
    def spendable(self) -> MoneyAmount:
        return MoneyAmount(self.balance - self.reserved)

    @property
    def suite(self) -> PrimitiveSuite:
        return get_suite(self.suite_name)


@dataclass(frozen=True)
class ChargeVoucher:
    beneficiary: NodeId
    amount: MoneyAmount
    serial: int
    office_signature: bytes

    def signed_bytes(self) -> bytes:
        return voucher_signed_bytes(self.beneficiary, self.amount, self.serial)

    def to_bytes(self) -> bytes:
        return (
            b"PVCH"
            + self.beneficiary.raw
            + struct.pack("<QQ", self.amount, self.serial)
            + _lp(self.office_signature)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> ChargeVoucher:
        reader = _Reader(data)
        if reader.take(4) != b"PVCH":
            raise CorruptWalletFile("not a voucher")
        beneficiary = NodeId(reader.take(ID_SIZE))
        amount, serial = reader.unpack("<QQ")
        signature = reader.lp()
        reader.done()
        return cls(beneficiary, MoneyAmount(amount), serial, signature)


def voucher_signed_bytes(beneficiary: NodeId, amount: int, serial: int) -> bytes:
    return b"voucher" + beneficiary.raw + struct.pack("<QQ", amount, serial)


def attestation_bytes(node: NodeId, public: bytes) -> bytes:
    return b"attest" + node.raw + public


def verify_attestation(suite: PrimitiveSuite, office_public: bytes, node: NodeId, public: bytes, attestation: bytes) -> bool:
    return suite.verify_message(attestation_bytes(node, public), attestation, office_public)


@dataclass(frozen=True)
class OfficeState:
    private: bytes = field(repr=False)
    public: bytes
    directory: Mapping[NodeId, bytes] = field(default_factory=dict)
    next_serial: int = 1
    suite_name: str = "reference"

    @property
    def suite(self) -> PrimitiveSuite:
        return get_suite(self.suite_name)


def new_office(suite_name: str = "reference", rng: random.Random | None = None) -> OfficeState:
    private, public = get_suite(suite_name).generate_keypair(rng)
    return OfficeState(private=private, public=public, suite_name=suite_name)


def provision(
    office: OfficeState, node_id: NodeId, rng: random.Random | None = None
) -> tuple[WalletState, OfficeState]:
    if node_id in office.directory:
        raise DuplicateNode(f"{node_id} already provisioned")
    suite = office.suite
    private, public = suite.generate_keypair(rng)
    attestation = suite.sign_message(attestation_bytes(node_id, public), office.private)
    keys = KeyMaterial(private=private, public=public, office_public=office.public, attestation=attestation)
    wallet = WalletState(
        node=node_id,
        balance=MoneyAmount(0),
        reserved=MoneyAmount(0),
        keys=keys,
        suite_name=office.suite_name,
    )
    directory = {**office.directory, node_id: public}
    return wallet, replace(office, directory=directory)


def issue_charge(office: OfficeState, node_id: NodeId, amount: int) -> tuple[ChargeVoucher, OfficeState]:
    """Sign a voucher for ``amount``; the returned office has advanced its serial."""
    if node_id not in office.directory:
        raise UnknownNode(f"{node_id} was never provisioned by this office")
    amount = check_amount(amount)
    if amount == 0:
        raise ZeroAmount("charges must be positive")
    serial = office.next_serial
    signature = office.suite.sign_message(voucher_signed_bytes(node_id, amount, serial), office.private)
    voucher = ChargeVoucher(node_id, amount, serial, signature)
    return voucher, replace(office, next_serial=serial + 1)


def verify_voucher(voucher: ChargeVoucher, office_public: bytes, suite: PrimitiveSuite) -> bool:
    return suite.verify_message(voucher.signed_bytes(), voucher.office_signature, office_public)


def redeem_charge(wallet: WalletState, voucher: ChargeVoucher) -> WalletState:
    if not verify_voucher(voucher, wallet.keys.office_public, wallet.suite):
        raise BadSignature("voucher signature does not verify under the office key")
    if voucher.beneficiary != wallet.node:
        raise WrongBeneficiary(f"voucher is for {voucher.beneficiary}, wallet is {wallet.node}")
    if voucher.serial in wallet.seen_serials:
        raise ReplayedVoucher(f"voucher serial {voucher.serial} already redeemed")
    balance = _add(wallet.balance, voucher.amount)
    return replace(wallet, balance=balance, seen_serials=wallet.seen_serials | {voucher.serial})


def reserve(wallet: WalletState, amount: int, txn: TransactionId | None = None) -> WalletState:
    amount = check_amount(amount)
    if amount > wallet.spendable:
        raise InsufficientFunds(f"need {amount}, spendable {wallet.spendable}")
    holds = wallet.holds
    if txn is not None:
        holds = {**holds, txn: _add(holds.get(txn, 0), amount)}
    return replace(wallet, reserved=_add(wallet.reserved, amount), holds=holds)


def _drop_hold(wallet: WalletState, amount: int, txn: TransactionId | None) -> Mapping[TransactionId, MoneyAmount]:
    if txn is None:
        return wallet.holds
    held = wallet.holds.get(txn, 0)
    if amount > held:
        raise InsufficientReservation(f"{txn} holds {held}, cannot take {amount}")
    holds = dict(wallet.holds)
    if held == amount:
        del holds[txn]
    else:
        holds[txn] = MoneyAmount(held - amount)
    return holds


def release(wallet: WalletState, amount: int, txn: TransactionId | None = None) -> WalletState:
    amount = check_amount(amount)
    if amount > wallet.reserved:
        raise InsufficientReservation(f"release {amount} exceeds reserved {wallet.reserved}")
    holds = _drop_hold(wallet, amount, txn)
    return replace(wallet, reserved=MoneyAmount(wallet.reserved - amount), holds=holds)


def debit_reserved(wallet: WalletState, amount: int, txn: TransactionId | None = None) -> WalletState:
    amount = check_amount(amount)
    if amount > wallet.reserved:
        raise InsufficientReservation(f"debit {amount} exceeds reserved {wallet.reserved}")
    holds = _drop_hold(wallet, amount, txn)
    return replace(
        wallet,
        balance=MoneyAmount(wallet.balance - amount),
        reserved=MoneyAmount(wallet.reserved - amount),
        holds=holds,
    )


def credit(wallet: WalletState, amount: int) -> WalletState:
    amount = check_amount(amount)
    return replace(wallet, balance=_add(wallet.balance, amount))


def restore_balance(wallet: WalletState, balance: int) -> WalletState:
    """Roll the balance back to an UNDO snapshot during crash recovery."""
    balance = check_amount(balance)
    if balance < wallet.reserved:
        raise InsufficientFunds("restored balance would be below the reservation")
    return replace(wallet, balance=balance)


def set_mode(wallet: WalletState, mode: Mode) -> WalletState:
    return replace(wallet, mode=Mode(mode))


def record_outcome(wallet: WalletState, txn: TransactionId, outcome: str) -> WalletState:
    """Append a self-signed transaction outcome to the audit history (first write wins)."""
    if txn in wallet.history:
        return wallet
    message = b"outcome" + txn.raw + outcome.encode("ascii")
    signature = wallet.suite.sign_message(message, wallet.keys.private)
    return replace(wallet, history={**wallet.history, txn: SignedOutcome(outcome, signature)})


def add_peer(wallet: WalletState, peer: NodeId, public: bytes) -> WalletState:
    if wallet.keys.peer_directory.get(peer) == public:
        return wallet
    directory = {**wallet.keys.peer_directory, peer: public}
    return replace(wallet, keys=replace(wallet.keys, peer_directory=directory))


def after_crash(wallet: WalletState) -> WalletState:
    """Volatile reservations do not survive a restart; recovery re-creates the durable ones."""
    return replace(wallet, reserved=MoneyAmount(0), holds={})


# --- persistence -------------------------------------------------------------

WALLET_MAGIC = b"PWLT"
WALLET_VERSION = 1
KEY_MAGIC = b"PKEY"


def _lp(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptWalletFile("truncated record")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def lp(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CorruptWalletFile("trailing bytes")


def encode_wallet(wallet: WalletState) -> bytes:
    """Serialize everything except the private key, fields in declaration order."""
    out = bytearray(WALLET_MAGIC + struct.pack("<H", WALLET_VERSION))
    out += wallet.node.raw
    out += struct.pack("<QQ", wallet.balance, wallet.reserved)
    keys = wallet.keys
    out += _lp(keys.public) + _lp(keys.office_public) + _lp(keys.attestation)
    out += struct.pack("<I", len(keys.peer_directory))
    for peer in sorted(keys.peer_directory):
        out += peer.raw + _lp(keys.peer_directory[peer])
    out += struct.pack("<B", wallet.mode)
    out += struct.pack("<I", len(wallet.history))
    for txn, signed in wallet.history.items():
        out += txn.raw + _lp(signed.outcome.encode("ascii")) + _lp(signed.signature)
    out += struct.pack("<I", len(wallet.seen_serials))
    for serial in sorted(wallet.seen_serials):
        out += struct.pack("<Q", serial)
    out += struct.pack("<I", len(wallet.holds))
    for txn, amount in wallet.holds.items():
        out += txn.raw + struct.pack("<Q", amount)
    out += _lp(wallet.suite_name.encode("ascii"))
    return bytes(out)


def decode_wallet(data: bytes, private: bytes) -> WalletState:
    r = _Reader(data)
    if r.take(4) != WALLET_MAGIC:
        raise CorruptWalletFile("bad wallet magic")
    (version,) = r.unpack("<H")
    if version != WALLET_VERSION:
        raise CorruptWalletFile(f"unsupported wallet version {version}")
    node = NodeId(r.take(ID_SIZE))
    balance, reserved = r.unpack("<QQ")
    public, office_public, attestation = r.lp(), r.lp(), r.lp()
    (npeers,) = r.unpack("<I")
    peers = {}
    for _ in range(npeers):
        peer = NodeId(r.take(ID_SIZE))
        peers[peer] = r.lp()
    (mode,) = r.unpack("<B")
    (nhist,) = r.unpack("<I")
    history = {}
    for _ in range(nhist):
        txn = TransactionId(r.take(ID_SIZE))
        history[txn] = SignedOutcome(r.lp().decode("ascii"), r.lp())
    (nserials,) = r.unpack("<I")
    serials = frozenset(r.unpack("<Q")[0] for _ in range(nserials))
    (nholds,) = r.unpack("<I")
    holds = {}
    for _ in range(nholds):
        txn = TransactionId(r.take(ID_SIZE))
        holds[txn] = MoneyAmount(r.unpack("<Q")[0])
    suite_name = r.lp().decode("ascii")
    r.done()
    if reserved > balance or reserved != sum(holds.values()):
        raise CorruptWalletFile("reservation invariant violated")
    keys = KeyMaterial(private, public, office_public, attestation, peers)
    return WalletState(
        node, MoneyAmount(balance), MoneyAmount(reserved), keys, Mode(mode), history, serials, holds, suite_name
    )


def _write_atomic(path: Path, data: bytes, mode: int = 0o644) -> None:
    tmp = path.with_name(path.name + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, mode)
    try:
        os.write(fd, data)
        os.fsync(fd)
    finally:
        os.close(fd)
    os.replace(tmp, path)


def save_wallet(wallet: WalletState, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    key_path = directory / "wallet.key"
    if not key_path.exists():
        _write_atomic(key_path, KEY_MAGIC + _lp(wallet.keys.private), mode=0o600)
    _write_atomic(directory / "wallet.bin", encode_wallet(wallet))


def load_wallet(directory: Path) -> WalletState:
    directory = Path(directory)
    key = _Reader((directory / "wallet.key").read_bytes())
    if key.take(4) != KEY_MAGIC:
        raise CorruptWalletFile("bad key file magic")
    private = key.lp()
    key.done()
    return decode_wallet((directory / "wallet.bin").read_bytes(), private)


OFFICE_MAGIC = b"POFC"
OFFICE_VERSION = 1


def encode_office(office: OfficeState) -> bytes:
    out = bytearray(OFFICE_MAGIC + struct.pack("<H", OFFICE_VERSION))
    out += _lp(office.private) + _lp(office.public)
    out += struct.pack("<I", len(office.directory))
    for node in sorted(office.directory):
        out += node.raw + _lp(office.directory[node])
    out += struct.pack("<Q", office.next_serial)
    out += _lp(office.suite_name.encode("ascii"))
    return bytes(out)


def decode_office(data: bytes) -> OfficeState:
    r = _Reader(data)
    if r.take(4) != OFFICE_MAGIC:
        raise CorruptWalletFile("bad office magic")
    (version,) = r.unpack("<H")
    if version != OFFICE_VERSION:
        raise CorruptWalletFile(f"unsupported office version {version}")
    private, public = r.lp(), r.lp()
    (count,) = r.unpack("<I")
    directory = {}
    for _ in range(count):
        node = NodeId(r.take(ID_SIZE))
        directory[node] = r.lp()
    (next_serial,) = r.unpack("<Q")
    suite_name = r.lp().decode("ascii")
    r.done()
    return OfficeState(private, public, directory, next_serial, suite_name)


def save_office(office: OfficeState, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    # The office signing key lives in this file, so keep it private.
    _write_atomic(directory / "office.bin", encode_office(office), mode=0o600)


def load_office(directory: Path) -> OfficeState:
    return decode_office((Path(directory) / "office.bin").read_bytes())
