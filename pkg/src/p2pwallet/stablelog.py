"""Append-only write-ahead log with torn-write detection.

File layout::

    "PLOG" u16-version
    record*: 0xA5 | u32 payload length | payload | u32 CRC-32 over marker..payload
    payload: kind tag (u8) | 16-byte transaction id | kind-specific bytes

Integers are little-endian. Scanning stops at the first record that fails
its length or checksum check; everything after it is ignored.
"""

from __future__ import annotations

import enum
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .wallet import ID_SIZE, NodeId, TransactionId

LOG_MAGIC = b"PLOG"
LOG_VERSION = 1
HEADER = LOG_MAGIC + struct.pack("<H", LOG_VERSION)
RECORD_MARKER = 0xA5

_PREFIX = struct.Struct("<BI")
_CRC = struct.Struct("<I")
_SNAPSHOT = struct.Struct("<QQ")


class StorageFailure(Exception):
    pass


class RecordKind(enum.IntEnum):
    UNDO = 1
    REDO = 2
    COMMIT = 3
    COMPLETE = 4
    ABORT = 5
    DONE_ERASE = 6


class Outcome(enum.Enum):
    COMMITTED = "committed"
    ABORTED = "aborted"


_OUTCOME_TAG = {Outcome.COMMITTED: 1, Outcome.ABORTED: 2}
_TAG_OUTCOME = {v: k for k, v in _OUTCOME_TAG.items()}


@dataclass(frozen=True)
class BalanceSnapshot:
    balance: int
    reserved: int
    # Counterparty of the transaction, so recovery knows whom to talk to.
    peer: NodeId

    def encode(self) -> bytes:
        return _SNAPSHOT.pack(self.balance, self.reserved) + self.peer.raw

    @classmethod
    def decode(cls, data: bytes) -> BalanceSnapshot:
        if len(data) != _SNAPSHOT.size + ID_SIZE:
            raise ValueError("bad snapshot payload")
        balance, reserved = _SNAPSHOT.unpack_from(data)
        return cls(balance, reserved, NodeId(data[_SNAPSHOT.size :]))


@dataclass(frozen=True)
class LogRecord:
    txn: TransactionId
    kind: RecordKind
    payload: bytes = b""

    @classmethod
    def undo(cls, txn: TransactionId, snapshot: BalanceSnapshot) -> LogRecord:
        return cls(txn, RecordKind.UNDO, snapshot.encode())

    @classmethod
    def redo(cls, txn: TransactionId, snapshot: BalanceSnapshot) -> LogRecord:
        return cls(txn, RecordKind.REDO, snapshot.encode())

    @classmethod
    def erase(cls, txn: TransactionId, outcome: Outcome) -> LogRecord:
        return cls(txn, RecordKind.DONE_ERASE, bytes([_OUTCOME_TAG[outcome]]))

    @property
    def snapshot(self) -> BalanceSnapshot:
        return BalanceSnapshot.decode(self.payload)

    @property
    def erased_outcome(self) -> Outcome:
        return _TAG_OUTCOME[self.payload[0]]

    def __str__(self) -> str:
        detail = ""
        if self.kind in (RecordKind.UNDO, RecordKind.REDO):
            snap = self.snapshot
            detail = f" balance={snap.balance} reserved={snap.reserved} peer={snap.peer}"
        elif self.kind is RecordKind.DONE_ERASE:
            detail = f" outcome={self.erased_outcome.value}"
        return f"{self.kind.name} {self.txn}{detail}"


def _validate(record: LogRecord) -> None:
    kind = record.kind
    if kind in (RecordKind.UNDO, RecordKind.REDO):
        BalanceSnapshot.decode(record.payload)
    elif kind is RecordKind.DONE_ERASE:
        if len(record.payload) != 1 or record.payload[0] not in _TAG_OUTCOME:
            raise ValueError("bad erase payload")
    elif record.payload:
        raise ValueError(f"{kind.name} records carry no payload")


def encode_record(record: LogRecord) -> bytes:
    payload = bytes([record.kind]) + record.txn.raw + record.payload
    framed = _PREFIX.pack(RECORD_MARKER, len(payload)) + payload
    return framed + _CRC.pack(zlib.crc32(framed))


@dataclass(frozen=True)
class ScanResult:
    records: list[LogRecord]
    valid_length: int
    torn_tail: bool


def decode_log(data: bytes) -> ScanResult:
    """Decode a whole log image, stopping at the first invalid record."""
    if len(data) < len(HEADER):
        # A crash while writing the header leaves a torn but empty log.
        return ScanResult([], 0, len(data) > 0)
    if data[: len(HEADER)] != HEADER:
        raise StorageFailure("not a log file (bad magic or version)")
    pos = len(HEADER)
    records: list[LogRecord] = []
    while pos < len(data):
        record, end = _decode_one(data, pos)
        if record is None:
            return ScanResult(records, pos, True)
        records.append(record)
        pos = end
    return ScanResult(records, pos, False)


def _decode_one(data: bytes, pos: int) -> tuple[LogRecord | None, int]:
    if pos + _PREFIX.size > len(data):
        return None, pos
    marker, length = _PREFIX.unpack_from(data, pos)
    end = pos + _PREFIX.size + length + _CRC.size
    if marker != RECORD_MARKER or length < 1 + ID_SIZE or end > len(data):
        return None, pos
    framed = data[pos : end - _CRC.size]
    (crc,) = _CRC.unpack_from(data, end - _CRC.size)
    if zlib.crc32(framed) != crc:
        return None, pos
    payload = framed[_PREFIX.size :]
    try:
        record = LogRecord(TransactionId(payload[1 : 1 + ID_SIZE]), RecordKind(payload[0]), payload[1 + ID_SIZE :])
        _validate(record)
    except ValueError:
        return None, pos
    return record, end


class MemoryStorage:
    """Byte buffer standing in for a file; lets tests tear writes at any byte."""

    def __init__(self, data: bytes = b"") -> None:
        self.data = bytearray(data)

    def read(self) -> bytes:
        return bytes(self.data)

    def append(self, chunk: bytes) -> None:
        self.data += chunk

    def truncate(self, length: int) -> None:
        del self.data[length:]


class FileStorage:
    def __init__(self, path: Path) -> None:
        self.path = Path(path)

    def read(self) -> bytes:
        try:
            return self.path.read_bytes()
        except FileNotFoundError:
            return b""
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    def append(self, chunk: bytes) -> None:
        try:
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o600)
            try:
                os.write(fd, chunk)
                os.fsync(fd)
            finally:
                os.close(fd)
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    def truncate(self, length: int) -> None:
        try:
            fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o600)
            try:
                os.ftruncate(fd, length)
                os.fsync(fd)
            finally:
                os.close(fd)
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc


class StableLog:
    """Durable record sequence. Opening a log discards any torn tail so later
    appends land after the last valid record."""

    def __init__(self, storage: MemoryStorage | FileStorage) -> None:
        self.storage = storage
        image = storage.read()
        result = decode_log(image)
        if result.valid_length < len(HEADER):
            storage.truncate(0)
            storage.append(HEADER)
        elif result.torn_tail:
            storage.truncate(result.valid_length)
        self._records = list(result.records)
        self.recovered_torn_tail = result.torn_tail

    @classmethod
    def open(cls, path: Path) -> StableLog:
        return cls(FileStorage(path))

    @classmethod
    def in_memory(cls, data: bytes = b"") -> StableLog:
        return cls(MemoryStorage(data))

    def append(self, record: LogRecord) -> None:
        _validate(record)
        self.storage.append(encode_record(record))
        self._records.append(record)

    def scan(self) -> list[LogRecord]:
        return decode_log(self.storage.read()).records

    @property
    def records(self) -> tuple[LogRecord, ...]:
        return tuple(self._records)


class TxnStatus(enum.Enum):
    IN_DOUBT_PREPARED = "in-doubt-prepared"
    COMMITTED = "committed"
    ABORTED = "aborted"
    COMPLETED = "completed"
    ERASED = "erased"


@dataclass(frozen=True)
class TxnSummary:
    status: TxnStatus
    undo: BalanceSnapshot | None = None
    redo: BalanceSnapshot | None = None
    has_commit: bool = False
    has_abort: bool = False
    has_complete: bool = False
    erased_outcome: Outcome | None = None

    @property
    def amount(self) -> int | None:
        if self.undo is None or self.redo is None:
            return None
        return abs(self.redo.balance - self.undo.balance)


def recover_summary(records: Iterable[LogRecord]) -> dict[TransactionId, TxnSummary]:
    """Classify every transaction mentioned in the log by its strongest record.

    A transaction with only an UNDO record (crash between the two prepare
    appends) is reported as in-doubt with ``redo=None``.
    """
    seen: dict[TransactionId, dict] = {}
    for record in records:
        facts = seen.setdefault(record.txn, {})
        kind = record.kind
        if kind is RecordKind.UNDO:
            facts["undo"] = record.snapshot
        elif kind is RecordKind.REDO:
            facts["redo"] = record.snapshot
        elif kind is RecordKind.COMMIT:
            facts["has_commit"] = True
        elif kind is RecordKind.ABORT:
            facts["has_abort"] = True
        elif kind is RecordKind.COMPLETE:
            facts["has_complete"] = True
        elif kind is RecordKind.DONE_ERASE:
            facts["erased_outcome"] = record.erased_outcome
    summary = {}
    for txn, facts in seen.items():
        if "erased_outcome" in facts:
            status = TxnStatus.ERASED
        elif facts.get("has_complete"):
            status = TxnStatus.COMPLETED
        elif facts.get("has_abort"):
            status = TxnStatus.ABORTED
        elif facts.get("has_commit"):
            status = TxnStatus.COMMITTED
        else:
            status = TxnStatus.IN_DOUBT_PREPARED
        summary[txn] = TxnSummary(status=status, **facts)
    return summary


def inspect_log(data: bytes) -> str:
    """Human-readable dump: valid records, torn-tail notice, recovery classes."""
    result = decode_log(data)
    lines = [f"{i:4d}  {record}" for i, record in enumerate(result.records)]
    if result.torn_tail:
        lines.append(f"torn tail detected at byte {result.valid_length} ({len(data) - result.valid_length} bytes ignored)")
    lines.append("recovery summary:")
    for txn, info in recover_summary(result.records).items():
        extra = f" ({info.erased_outcome.value})" if info.erased_outcome else ""
        lines.append(f"  {txn}: {info.status.value}{extra}")
    return "\n".join(lines) + "\n"
