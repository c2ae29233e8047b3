"""Command-line entry point: office, wallet, seller, buyer, simulator and log tools.

Exit codes: 0 success or committed, 1 other error, 2 aborted, 3 config
error, 4 transport error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import commit as cm
from .runtime.node_runtime import NodeRuntime, RuntimeConfig, RuntimeConfigError, TransportError, parse_address
from .sim.explorer import Bounds, BoundsTooLarge, ExploreSetup, explore_exhaustive
from .sim.scenario import format_config, parse_scenario
from .sim.simulator import ConfigInvalid, run_scenario
from .stablelog import StorageFailure, inspect_log
from .wallet import (
    ChargeVoucher,
    CorruptWalletFile,
    Mode,
    NodeId,
    WalletError,
    issue_charge,
    load_office,
    load_wallet,
    new_office,
    provision,
    redeem_charge,
    save_office,
    save_wallet,
    set_mode,
)

EXIT_OK, EXIT_ERROR, EXIT_ABORTED, EXIT_CONFIG, EXIT_TRANSPORT = 0, 1, 2, 3, 4
DATA_ENV = "P2PWALLET_DATA_DIR"


class UsageError(Exception):
    pass


def _data_dir(args) -> Path:
    path = args.data_dir or os.environ.get(DATA_ENV)
    if not path:
        raise UsageError(f"no data directory: pass --data-dir or set {DATA_ENV}")
    return Path(path)


def _node(text: str) -> NodeId:
    try:
        return NodeId.from_name(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _amount(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("amounts are non-negative")
    return value


# --- office / wallet -----------------------------------------------------------


def cmd_office_init(args) -> int:
    office_dir = Path(args.office_dir)
    if (office_dir / "office.bin").exists():
        raise UsageError(f"an office already exists in {office_dir}")
    save_office(new_office(args.suite), office_dir)
    print(f"office created in {office_dir} (suite {args.suite})")
    return EXIT_OK


def cmd_office_provision(args) -> int:
    office = load_office(args.office_dir)
    data_dir = _data_dir(args)
    if (data_dir / "wallet.bin").exists():
        raise UsageError(f"{data_dir} already holds a wallet")
    wallet, office = provision(office, args.node)
    save_office(office, args.office_dir)
    save_wallet(wallet, data_dir)
    print(f"provisioned {args.node} in {data_dir}")
    return EXIT_OK


def cmd_office_charge(args) -> int:
    office = load_office(args.office_dir)
    voucher, office = issue_charge(office, args.node, args.amount)
    save_office(office, args.office_dir)
    data = voucher.to_bytes()
    if args.out:
        Path(args.out).write_bytes(data)
        print(f"voucher #{voucher.serial} for {voucher.amount} written to {args.out}")
    else:
        print(data.hex())
    return EXIT_OK


def _read_voucher(source: str) -> ChargeVoucher:
    if source == "-":
        text = sys.stdin.read().strip()
        return ChargeVoucher.from_bytes(bytes.fromhex(text))
    raw = Path(source).read_bytes()
    try:
        return ChargeVoucher.from_bytes(raw)
    except (WalletError, ValueError):
        return ChargeVoucher.from_bytes(bytes.fromhex(raw.decode().strip()))


def cmd_wallet_redeem(args) -> int:
    data_dir = _data_dir(args)
    wallet = redeem_charge(load_wallet(data_dir), _read_voucher(args.voucher))
    save_wallet(wallet, data_dir)
    print(f"balance {wallet.balance}")
    return EXIT_OK


def cmd_wallet_balance(args) -> int:
    wallet = load_wallet(_data_dir(args))
    print(wallet.balance)
    if args.verbose:
        print(f"reserved {wallet.reserved} mode {wallet.mode.name.lower()} node {wallet.node}", file=sys.stderr)
    return EXIT_OK


# --- network roles ---------------------------------------------------------------


def _runtime_config(args) -> RuntimeConfig:
    return RuntimeConfig(
        data_dir=_data_dir(args),
        port=args.port,
        bind=args.bind,
        peers=[parse_address(p) for p in args.peer],
        broadcast=args.broadcast,
        timeout_ms=args.timeout_ms,
        lookup_ms=args.lookup_ms,
        hold_ms=args.hold_ms,
        retries=args.retries,
        commit_retries=args.commit_retries,
        policy=cm.TimeoutPolicy(args.policy),
    )


def _start(args, mode: Mode) -> NodeRuntime:
    config = _runtime_config(args)
    config.validate()
    wallet = load_wallet(config.data_dir)
    if wallet.mode is not mode:
        save_wallet(set_mode(wallet, mode), config.data_dir)
    runtime = NodeRuntime(config)
    runtime.recover()
    return runtime


def _deadline(args) -> float | None:
    return time.monotonic() + args.deadline_s if args.deadline_s else None


def cmd_sell(args) -> int:
    if args.amount <= 0:
        raise UsageError("--amount must be positive")
    runtime = _start(args, Mode.SELLER)
    try:
        outcome = runtime.sell(args.buyer, args.amount, args.description.encode(), _deadline(args))
    finally:
        runtime.close()
    print(f"{outcome} balance {runtime.wallet.balance}")
    if outcome == "committed":
        return EXIT_OK
    if outcome in ("BuyerNotFound", "QuoteTimeout", "InsufficientFunds", "BadQuote"):
        print(f"aborted: {outcome}", file=sys.stderr)
    return EXIT_ABORTED if outcome != "timeout" else EXIT_ERROR


def cmd_buy(args) -> int:
    if not args.listen:
        raise UsageError("buy needs --listen")
    runtime = _start(args, Mode.BUYER)
    print(f"listening on {runtime.address[0]}:{runtime.address[1]} as {runtime.wallet.node}", flush=True)
    try:
        outcome = runtime.serve(once=args.once, deadline=_deadline(args), linger=args.linger_ms / 1000.0)
    except KeyboardInterrupt:
        outcome = None
    finally:
        runtime.close()
    if outcome is None:
        return EXIT_OK
    print(f"{outcome} balance {runtime.wallet.balance}")
    return {"committed": EXIT_OK, "aborted": EXIT_ABORTED}.get(outcome, EXIT_ERROR)


# --- simulator / tools -----------------------------------------------------------


def cmd_sim_run(args) -> int:
    config, topology, script = parse_scenario(Path(args.config).read_text())
    if args.seed is not None:
        config.seed = args.seed
    trace, verdict = run_scenario(config, topology, script)
    text = format_config(config) + trace.serialize()
    if args.trace:
        Path(args.trace).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"verdict: {verdict.summary()}", file=sys.stderr if not args.trace else sys.stdout)
    return EXIT_OK if verdict.ok else EXIT_ERROR


def cmd_sim_explore(args) -> int:
    bounds = Bounds.parse(args.bounds)
    policies = list(cm.TimeoutPolicy) if args.policy == "both" else [cm.TimeoutPolicy(args.policy)]
    ok = True
    for policy in policies:
        setup = ExploreSetup(
            amount=args.amount,
            buyer_balance=args.balance,
            config=cm.ProtocolConfig(args.retries, args.commit_retries, policy),
            include_discovery=not args.no_discovery,
            max_states=args.max_states,
        )
        start = time.monotonic()
        result = explore_exhaustive(bounds, setup)
        elapsed = time.monotonic() - start
        pairs = ", ".join(f"{s}/{b}" for s, b in sorted(result.outcome_pairs))
        print(f"policy {policy.value}: {result.states} states, {result.schedules} schedules, "
              f"{len(result.terminals)} distinct terminals ({elapsed:.2f}s)")
        print(f"  outcomes (seller/buyer): {pairs}")
        print(f"  all terminals atomic: {'yes' if result.all_atomic else 'no'}")
        print(f"  all terminals conserved: {'yes' if result.all_conserved else 'no'}")
        for terminal in result.terminals.values():
            if not (terminal.atomic and terminal.conserved):
                print("  counterexample: " + " | ".join(terminal.schedule))
                break
        for violation in result.violations[:1]:
            print(f"  {violation}")
        ok = ok and result.all_atomic and result.all_conserved
    return EXIT_OK if ok else EXIT_ERROR


def cmd_log_inspect(args) -> int:
    sys.stdout.write(inspect_log(Path(args.file).read_bytes()))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def _network_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--port", type=int, default=0, help="UDP port to bind (default: any)")
    p.add_argument("--bind", default="127.0.0.1", help="address to bind (default 127.0.0.1)")
    p.add_argument("--peer", action="append", default=[], metavar="HOST:PORT", help="one-hop neighbour; repeatable")
    p.add_argument("--broadcast", action="store_true", help="also send LOOKUP to 255.255.255.255")
    p.add_argument("--timeout-ms", type=int, default=500, help="retransmission timeout (default 500)")
    p.add_argument("--lookup-ms", type=int, default=500, help="lookup collection window (default 500)")
    p.add_argument("--hold-ms", type=int, default=30_000, help="buyer hold expiry (default 30000)")
    p.add_argument("--retries", type=int, default=3, help="prepare-phase retries R (default 3)")
    p.add_argument("--commit-retries", type=int, default=16, help="decision retries R_commit (default 16)")
    p.add_argument("--policy", choices=[p.value for p in cm.TimeoutPolicy], default="retry")
    p.add_argument("--deadline-s", type=float, default=0, help="give up after this many seconds (0: never)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p2pwallet", description=__doc__.splitlines()[0])
    parser.add_argument("--data-dir", help=f"node data directory (default ${DATA_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    office = sub.add_parser("office", help="charging office").add_subparsers(dest="action", required=True)
    p = office.add_parser("init", help="create an office signing key")
    p.add_argument("--office-dir", required=True)
    p.add_argument("--suite", choices=["reference", "toy"], default="reference")
    p.set_defaults(func=cmd_office_init)
    p = office.add_parser("provision", help="create a wallet for a node")
    p.add_argument("node", type=_node)
    p.add_argument("--office-dir", required=True)
    p.set_defaults(func=cmd_office_provision)
    p = office.add_parser("charge", help="issue a signed voucher")
    p.add_argument("node", type=_node)
    p.add_argument("amount", type=_amount)
    p.add_argument("--office-dir", required=True)
    p.add_argument("--out", help="voucher file (default: hex on stdout)")
    p.set_defaults(func=cmd_office_charge)

    wallet = sub.add_parser("wallet", help="local wallet").add_subparsers(dest="action", required=True)
    p = wallet.add_parser("redeem", help="redeem a voucher file ('-' reads hex from stdin)")
    p.add_argument("voucher")
    p.set_defaults(func=cmd_wallet_redeem)
    p = wallet.add_parser("balance", help="print the balance")
    p.set_defaults(func=cmd_wallet_balance)

    p = sub.add_parser("sell", help="sell to a buyer over the network")
    p.add_argument("--amount", type=_amount, required=True)
    p.add_argument("--buyer", type=_node, required=True)
    p.add_argument("--description", default="goods")
    _network_options(p)
    p.set_defaults(func=cmd_sell)

    p = sub.add_parser("buy", help="listen in buyer mode")
    p.add_argument("--listen", action="store_true", required=True)
    p.add_argument("--once", action="store_true", help="exit after one transaction")
    p.add_argument("--linger-ms", type=int, default=1000, help="keep answering after finishing (default 1000)")
    _network_options(p)
    p.set_defaults(func=cmd_buy)

    sim = sub.add_parser("sim", help="simulator").add_subparsers(dest="action", required=True)
    p = sim.add_parser("run", help="run a scenario file")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", help="write the trace here (default stdout)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.set_defaults(func=cmd_sim_run)
    p = sim.add_parser("explore", help="exhaustive schedule exploration")
    p.add_argument("--bounds", required=True, metavar="L,D,C")
    p.add_argument("--policy", choices=["retry", "abort", "both"], default="both")
    p.add_argument("--amount", type=int, default=40)
    p.add_argument("--balance", type=int, default=100)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--commit-retries", type=int, default=16)
    p.add_argument("--no-discovery", action="store_true", help="start at the commit phase")
    p.add_argument("--max-states", type=int, default=2_000_000)
    p.set_defaults(func=cmd_sim_explore)

    log_cmd = sub.add_parser("log", help="log tools").add_subparsers(dest="action", required=True)
    p = log_cmd.add_parser("inspect", help="print records and recovery classes")
    p.add_argument("file")
    p.set_defaults(func=cmd_log_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, RuntimeConfigError, ConfigInvalid, BoundsTooLarge, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (WalletError, CorruptWalletFile, cm.CorruptLog, StorageFailure) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except FileNotFoundError as exc:
        print(f"error: {type(exc).__name__}: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
