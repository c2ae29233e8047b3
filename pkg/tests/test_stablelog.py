import struct
import zlib

import pytest

from p2pwallet.stablelog import (
    HEADER,
    BalanceSnapshot,
    LogRecord,
    MemoryStorage,
    Outcome,
    RecordKind,
    StableLog,
    StorageFailure,
    TxnStatus,
    decode_log,
    encode_record,
    inspect_log,
    recover_summary,
)
from p2pwallet.wallet import NodeId, TransactionId

PEER = NodeId.from_name("S")
T1 = TransactionId.new(PEER, 1)
T2 = TransactionId.new(PEER, 2)


def records():
    return [
        LogRecord.undo(T1, BalanceSnapshot(100, 40, PEER)),
        LogRecord.redo(T1, BalanceSnapshot(60, 0, PEER)),
        LogRecord(T1, RecordKind.COMMIT),
        LogRecord(T1, RecordKind.COMPLETE),
        LogRecord.erase(T1, Outcome.COMMITTED),
    ]


def image(recs):
    return HEADER + b"".join(encode_record(r) for r in recs)


def test_empty_log_gets_a_header():
    storage = MemoryStorage()
    log = StableLog(storage)
    assert storage.read() == b"PLOG\x01\x00"
    assert log.records == ()


def test_appends_round_trip():
    storage = MemoryStorage()
    log = StableLog(storage)
    for r in records():
        log.append(r)
    assert StableLog(MemoryStorage(storage.read())).records == tuple(records())
    assert log.scan() == records()


def test_record_bytes():
    rec = LogRecord(T1, RecordKind.COMMIT)
    data = encode_record(rec)
    assert data[0] == 0xA5
    assert struct.unpack_from("<I", data, 1)[0] == 17
    assert data[5] == RecordKind.COMMIT
    assert data[6:22] == T1.raw
    assert struct.unpack_from("<I", data, 22)[0] == zlib.crc32(data[:22])
    assert len(data) == 26


def test_every_truncation_keeps_exactly_the_complete_prefix():
    recs = records()
    full = image(recs)
    ends = []
    pos = len(HEADER)
    for r in recs:
        pos += len(encode_record(r))
        ends.append(pos)
    for cut in range(len(full) + 1):
        storage = MemoryStorage(full[:cut])
        log = StableLog(storage)
        expected = sum(1 for e in ends if e <= cut)
        assert list(log.records) == recs[:expected], cut
        # Reopening dropped the torn bytes, so a new append lands cleanly.
        log.append(LogRecord(T2, RecordKind.ABORT))
        assert StableLog(MemoryStorage(storage.read())).records[-1] == LogRecord(T2, RecordKind.ABORT)


def test_single_bit_flips_never_yield_a_wrong_record():
    recs = records()
    full = image(recs)
    for byte in range(len(HEADER), len(full)):
        for bit in range(8):
            data = bytearray(full)
            data[byte] ^= 1 << bit
            result = decode_log(bytes(data))
            # Whatever survives must be an untouched prefix, and the damage is flagged.
            assert result.records == recs[: len(result.records)]
            assert result.torn_tail


def test_bad_header_is_a_storage_failure():
    with pytest.raises(StorageFailure):
        StableLog(MemoryStorage(b"XLOG\x01\x00"))
    with pytest.raises(StorageFailure):
        StableLog(MemoryStorage(b"PLOG\x02\x00"))


def test_torn_header_is_treated_as_empty():
    storage = MemoryStorage(b"PL")
    log = StableLog(storage)
    assert log.recovered_torn_tail and log.records == ()
    assert storage.read() == HEADER


def test_file_storage(tmp_path):
    path = tmp_path / "log.plog"
    log = StableLog.open(path)
    for r in records()[:2]:
        log.append(r)
    with open(path, "ab") as fh:
        fh.write(b"\xa5\x20\x00")
    reopened = StableLog.open(path)
    assert reopened.recovered_torn_tail
    assert list(reopened.records) == records()[:2]
    assert path.read_bytes() == image(records()[:2])


@pytest.mark.parametrize(
    "n, status",
    [
        (1, TxnStatus.IN_DOUBT_PREPARED),
        (2, TxnStatus.IN_DOUBT_PREPARED),
        (3, TxnStatus.COMMITTED),
        (4, TxnStatus.COMPLETED),
        (5, TxnStatus.ERASED),
    ],
)
def test_recover_summary(n, status):
    info = recover_summary(records()[:n])[T1]
    assert info.status is status
    if n == 1:
        assert info.redo is None and info.amount is None
    if n >= 2:
        assert info.amount == 40


def test_recover_summary_abort():
    recs = records()[:2] + [LogRecord(T1, RecordKind.ABORT)]
    assert recover_summary(recs)[T1].status is TxnStatus.ABORTED


def test_invalid_payloads_are_refused():
    log = StableLog.in_memory()
    with pytest.raises(ValueError):
        log.append(LogRecord(T1, RecordKind.COMMIT, b"x"))
    with pytest.raises(ValueError):
        log.append(LogRecord(T1, RecordKind.UNDO, b"short"))


def test_inspect_reports_torn_tail():
    data = image(records()[:3])
    text = inspect_log(data + b"\xa5\x01")
    assert "UNDO" in text and "COMMIT" in text
    assert f"torn tail detected at byte {len(data)} (2 bytes ignored)" in text
    assert "committed" in text


def test_scan_is_idempotent():
    log = StableLog.in_memory()
    assert log.scan() == []
    for r in records()[:3]:
        log.append(r)
    assert log.scan() == log.scan() == records()[:3]
