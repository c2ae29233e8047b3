import pytest

from p2pwallet import commit as cm
from p2pwallet.stablelog import BalanceSnapshot, LogRecord, Outcome, RecordKind, StableLog, recover_summary
from p2pwallet.wallet import NodeId, TransactionId

from conftest import Pump, make_node

S, B = NodeId.from_name("S"), NodeId.from_name("B")
TXN = TransactionId.new(S, 1)
UNDO_S = LogRecord.undo(TXN, BalanceSnapshot(0, 0, B))
REDO_S = LogRecord.redo(TXN, BalanceSnapshot(40, 0, B))
UNDO_B = LogRecord.undo(TXN, BalanceSnapshot(100, 40, S))
REDO_B = LogRecord.redo(TXN, BalanceSnapshot(60, 0, S))


def rec(kind):
    return LogRecord(TXN, kind)


def seller_recovery(*records):
    return cm.recover_seller(recover_summary(records))


def buyer_recovery(*records):
    return cm.recover_buyer(recover_summary(records))


def test_seller_prepared_presumes_abort():
    r = seller_recovery(UNDO_S, REDO_S)
    assert isinstance(r.machines[TXN], cm.Aborting)
    assert r.effects[0] == cm.AppendLog(rec(RecordKind.ABORT))
    assert cm.SendMessage(B, cm.AbortMsg(TXN)) in r.effects


def test_seller_undo_only_presumes_abort():
    r = seller_recovery(UNDO_S)
    assert isinstance(r.machines[TXN], cm.Aborting)


def test_seller_committed_resends_commit():
    r = seller_recovery(UNDO_S, REDO_S, rec(RecordKind.COMMIT))
    assert r.machines[TXN] == cm.Committing(TXN, 40, B)
    assert r.effects[0] == cm.ApplyWalletOp(cm.WalletOp.RESTORE_BALANCE, 0)
    assert cm.SendMessage(B, cm.Commit(TXN)) in r.effects


def test_seller_completed_erases():
    r = seller_recovery(UNDO_S, REDO_S, rec(RecordKind.COMMIT), rec(RecordKind.COMPLETE))
    assert r.machines[TXN].outcome is cm.DoneOutcome.COMMITTED
    assert r.effects == [cm.EraseTxn(TXN, Outcome.COMMITTED)]


def test_seller_erased_is_terminal():
    r = seller_recovery(UNDO_S, REDO_S, rec(RecordKind.ABORT), LogRecord.erase(TXN, Outcome.ABORTED))
    assert r.machines[TXN].outcome is cm.DoneOutcome.ABORTED and r.effects == []


def test_buyer_prepared_stays_in_doubt_and_reholds():
    r = buyer_recovery(UNDO_B, REDO_B)
    assert r.machines[TXN] == cm.Prepared(TXN, 40)
    assert r.effects == [
        cm.ApplyWalletOp(cm.WalletOp.RESTORE_BALANCE, 100),
        cm.ApplyWalletOp(cm.WalletOp.RESERVE, 40, TXN),
    ]


def test_buyer_undo_only_aborts_locally():
    r = buyer_recovery(UNDO_B)
    assert r.machines[TXN] == cm.BuyerAborted(TXN)
    assert cm.AppendLog(rec(RecordKind.ABORT)) in r.effects


def test_buyer_completed_and_aborted():
    assert buyer_recovery(UNDO_B, REDO_B, rec(RecordKind.COMPLETE)).machines[TXN] == cm.BuyerCommitted(TXN)
    r = buyer_recovery(UNDO_B, REDO_B, rec(RecordKind.ABORT))
    assert r.machines[TXN] == cm.BuyerAborted(TXN)
    assert r.effects[0] == cm.ApplyWalletOp(cm.WalletOp.RESTORE_BALANCE, 100)


@pytest.mark.parametrize(
    "records",
    [
        (UNDO_S, rec(RecordKind.COMMIT), rec(RecordKind.ABORT)),
        (rec(RecordKind.COMMIT),),
    ],
)
def test_corrupt_logs(records):
    with pytest.raises(cm.CorruptLog):
        cm.recover_seller(recover_summary(records))


def test_buyer_log_with_commit_is_corrupt():
    with pytest.raises(cm.CorruptLog):
        buyer_recovery(UNDO_B, REDO_B, rec(RecordKind.COMMIT))


def test_empty_log_buyer_answers_abort_to_stale_request(pair):
    seller_w, buyer_w = pair
    buyer = make_node(buyer_w)
    # The buyer accepted a quote, then crashed before logging anything.
    quote_txn = TransactionId.new(seller_w.node, 9)
    from p2pwallet.discovery import Quote

    buyer.handle_message(Quote(quote_txn, seller_w.node, 40, b"goods"), seller_w.node)
    assert buyer.wallet.reserved == 40
    assert buyer.restart() == []
    assert buyer.wallet.reserved == 0 and buyer.log.records == ()
    effects = buyer.handle_message(cm.CommitRequest(quote_txn, 40), seller_w.node)
    assert effects == [cm.SendMessage(seller_w.node, cm.AbortMsg(quote_txn))]


def test_node_restart_mid_commit_finishes(pair):
    seller, buyer = (make_node(w) for w in pair)
    # Drop the first Commit, crash the buyer, restart it and let retransmission finish.
    seen = []

    def drop(sender, message):
        if isinstance(message, cm.Commit) and not seen:
            seen.append(message)
            return True
        return False

    pump = Pump(seller, buyer, drop=drop)
    txn, effects = seller.start_purchase(buyer.node_id, 40)
    pump.run(seller, effects)
    pump.settle()
    assert pump.fire(cm.TimerKind.LOOKUP_WINDOW)
    pump.settle()
    assert seen and buyer.outcome(txn) == "in-doubt"
    pump.run(buyer, buyer.restart())
    assert buyer.wallet.reserved == 40
    pump.drive()
    assert seller.outcome(txn) == buyer.outcome(txn) == "committed"
    assert (seller.wallet.balance, buyer.wallet.balance) == (40, 60)


def test_restart_reopens_log_after_torn_tail(pair):
    from p2pwallet.stablelog import MemoryStorage, encode_record

    storage = MemoryStorage()
    log = StableLog(storage)
    log.append(UNDO_B)
    storage.append(encode_record(REDO_B)[:7])
    node = make_node(pair[1])
    node.log = StableLog(MemoryStorage(storage.read()))
    node.reopen_log = lambda: StableLog(storage)
    node.restart()
    assert node.buyers[TXN] == cm.BuyerAborted(TXN)
