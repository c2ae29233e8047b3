import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from p2pwallet.cli import main

FAST = ["--timeout-ms", "100", "--lookup-ms", "150", "--deadline-s", "20"]


def cli(*args, env=None, input=None, check=None):
    proc = subprocess.run(
        [sys.executable, "-m", "p2pwallet.cli", *map(str, args)],
        capture_output=True,
        text=True,
        env={**os.environ, **(env or {})},
        input=input,
        timeout=60,
    )
    if check is not None:
        assert proc.returncode == check, proc.stderr
    return proc


def free_port():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def world(tmp_path):
    office = tmp_path / "office"
    cli("office", "init", "--office-dir", office, "--suite", "toy", check=0)
    for name in ("S", "B"):
        cli("--data-dir", tmp_path / name, "office", "provision", name, "--office-dir", office, check=0)
    voucher = tmp_path / "b.voucher"
    cli("office", "charge", "B", 100, "--office-dir", office, "--out", voucher, check=0)
    cli("--data-dir", tmp_path / "B", "wallet", "redeem", voucher, check=0)
    return tmp_path


def balance(world, name):
    return int(cli("--data-dir", world / name, "wallet", "balance", check=0).stdout)


def buyer(world, port, env=None, extra=()):
    return subprocess.Popen(
        [sys.executable, "-m", "p2pwallet.cli", "--data-dir", str(world / "B"), "buy", "--listen", "--once",
         "--port", str(port), "--linger-ms", "500", *FAST, *extra],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
        env={**os.environ, **(env or {})},
    )


def sell(world, port, amount, extra=()):
    return subprocess.Popen(
        [sys.executable, "-m", "p2pwallet.cli", "--data-dir", str(world / "S"), "sell", "--amount", str(amount),
         "--buyer", "B", "--peer", f"127.0.0.1:{port}", *FAST, *extra],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )


def wait_listening(proc):
    line = proc.stdout.readline()
    assert line.startswith("listening"), line + proc.stderr.read()


def test_provision_charge_balance(world):
    assert balance(world, "B") == 100
    assert balance(world, "S") == 0


def test_replayed_voucher(world):
    proc = cli("--data-dir", world / "B", "wallet", "redeem", world / "b.voucher")
    assert proc.returncode == 1 and "ReplayedVoucher" in proc.stderr
    assert balance(world, "B") == 100


def test_voucher_via_stdin(world):
    hexed = cli("office", "charge", "S", 5, "--office-dir", world / "office", check=0).stdout
    cli("--data-dir", world / "S", "wallet", "redeem", "-", input=hexed, check=0)
    assert balance(world, "S") == 5


def test_unknown_node(world):
    proc = cli("office", "charge", "N9", 100, "--office-dir", world / "office")
    assert proc.returncode != 0 and "UnknownNode" in proc.stderr


def test_missing_data_dir(monkeypatch, capsys):
    monkeypatch.delenv("P2PWALLET_DATA_DIR", raising=False)
    assert main(["wallet", "balance"]) == 3
    assert "data directory" in capsys.readouterr().err


def test_data_dir_from_environment(world):
    proc = cli("wallet", "balance", env={"P2PWALLET_DATA_DIR": str(world / "B")}, check=0)
    assert proc.stdout.strip() == "100"


def test_sell_and_buy(world):
    port = free_port()
    b = buyer(world, port)
    wait_listening(b)
    s = sell(world, port, 40)
    assert s.wait(30) == 0, s.stderr.read()
    assert b.wait(30) == 0, b.stderr.read()
    assert balance(world, "S") == 40 and balance(world, "B") == 60
    for name in ("S", "B"):
        text = cli("log", "inspect", world / name / "log.plog", check=0).stdout
        assert "COMPLETE" in text and "DONE_ERASE" in text


def test_sell_more_than_balance_aborts(world):
    port = free_port()
    b = buyer(world, port)
    wait_listening(b)
    s = sell(world, port, 140)
    assert s.wait(30) == 2
    assert "InsufficientFunds" in s.stderr.read()
    assert b.wait(30) == 2
    assert balance(world, "B") == 100


def test_no_buyer(world):
    s = sell(world, free_port(), 40, extra=("--retries", "1"))
    assert s.wait(30) == 2
    assert "BuyerNotFound" in s.stderr.read()


def test_bind_failure_is_a_transport_error(world):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as held:
        held.bind(("127.0.0.1", 0))
        port = held.getsockname()[1]
        proc = cli("--data-dir", world / "B", "buy", "--listen", "--once", "--port", port, "--deadline-s", 1)
    assert proc.returncode == 4 and "TransportError" in proc.stderr


def test_kill_buyer_between_agreed_and_commit(world):
    port = free_port()
    b = buyer(world, port, env={"P2PWALLET_CRASH_POINT": "hang:send:Agreed"})
    wait_listening(b)
    s = sell(world, port, 40, extra=("--commit-retries", "100"))
    log = world / "B" / "log.plog"
    deadline = time.monotonic() + 20
    while b"\xa5" not in (log.read_bytes() if log.exists() else b""):
        assert time.monotonic() < deadline, "buyer never prepared"
        time.sleep(0.05)
    time.sleep(0.3)
    b.send_signal(signal.SIGKILL)
    b.wait(10)
    text = cli("log", "inspect", log, check=0).stdout
    assert "in-doubt-prepared" in text and "COMPLETE" not in text
    restarted = buyer(world, port)
    assert s.wait(30) == 0, s.stderr.read()
    assert restarted.wait(30) == 0, restarted.stderr.read()
    assert balance(world, "S") == 40 and balance(world, "B") == 60


SCENARIO = """\
seed 4
loss 0.3
dup 0.1
node S seller
node B buyer
charge B 100
purchase S B 40
crash random 1
fair-after 100
"""


def test_sim_run_is_byte_identical(tmp_path):
    config = tmp_path / "scenario.txt"
    config.write_text(SCENARIO)
    for name in ("a.trace", "b.trace"):
        cli("sim", "run", "--config", config, "--trace", tmp_path / name, check=0)
    assert (tmp_path / "a.trace").read_bytes() == (tmp_path / "b.trace").read_bytes()
    assert (tmp_path / "a.trace").read_text().startswith("# seed=4 ")


def test_sim_run_bad_config(tmp_path):
    config = tmp_path / "bad.txt"
    config.write_text("loss maybe\n")
    proc = cli("sim", "run", "--config", config)
    assert proc.returncode == 3 and "ConfigInvalid" in proc.stderr


def test_sim_explore_reports_atomicity():
    proc = cli("sim", "explore", "--bounds", "1,0,1", "--no-discovery", check=0)
    assert proc.stdout.count("all terminals atomic: yes") == 2
    proc = cli("sim", "explore", "--bounds", "9,0,0")
    assert proc.returncode == 3 and "BoundsTooLarge" in proc.stderr


def test_log_inspect_torn_tail(world, tmp_path):
    from p2pwallet.stablelog import HEADER, LogRecord, RecordKind, encode_record
    from p2pwallet.wallet import NodeId, TransactionId

    txn = TransactionId.new(NodeId.from_name("S"), 1)
    record = encode_record(LogRecord(txn, RecordKind.COMMIT))
    path = tmp_path / "torn.plog"
    path.write_bytes(HEADER + record + record[:9])
    out = cli("log", "inspect", path, check=0).stdout
    assert "COMMIT" in out and "torn tail detected" in out
