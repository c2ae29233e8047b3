"""Per-node event loop over UDP.

The loop owns exactly three things the pure machines cannot: a socket, a
timer heap and the mapping from node ids to socket addresses. Everything
else (what to send, what to log, how the wallet changes) comes from
:class:`ProtocolNode`, the same host class the simulator drives.

Transport is plain datagrams even on loopback, so any loss or duplication
is repaired by the protocol's own retransmissions.
"""

from __future__ import annotations

import heapq
import logging
import os
import secrets
import select
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path

from .. import commit as cm
from .. import discovery as dc
from ..envelope import EnvelopeError
from ..node import ProtocolNode, Transition
from ..stablelog import StableLog
from ..wallet import NodeId, TransactionId, WalletError, WalletState, load_wallet, save_wallet
from .wire import WireError, decode_inbound, encode_outbound

log = logging.getLogger(__name__)

TICK = 0.01
CRASH_ENV = "P2PWALLET_CRASH_POINT"
Address = tuple[str, int]


class RuntimeConfigError(ValueError):
    pass


class TransportError(OSError):
    pass


@dataclass
class RuntimeConfig:
    data_dir: Path
    port: int = 0
    bind: str = "127.0.0.1"
    peers: list[Address] = field(default_factory=list)
    broadcast: bool = False
    timeout_ms: int = 500
    lookup_ms: int = 500
    hold_ms: int = 30_000
    retries: int = 3
    commit_retries: int = 16
    policy: cm.TimeoutPolicy = cm.TimeoutPolicy.RETRY_THEN_ABORT

    def validate(self) -> None:
        if not 0 <= self.port <= 65535:
            raise RuntimeConfigError(f"port out of range: {self.port}")
        for host, port in self.peers:
            if not 0 < port <= 65535:
                raise RuntimeConfigError(f"peer port out of range: {host}:{port}")
        for name in ("timeout_ms", "lookup_ms", "hold_ms"):
            if getattr(self, name) < 10:
                raise RuntimeConfigError(f"{name} must be at least 10 ms")
        if self.retries < 0 or self.commit_retries < 0:
            raise RuntimeConfigError("retry caps must be non-negative")
        if not (Path(self.data_dir) / "wallet.bin").exists():
            raise RuntimeConfigError(f"no wallet in {self.data_dir}; provision one first")

    @property
    def protocol(self) -> cm.ProtocolConfig:
        return cm.ProtocolConfig(self.retries, self.commit_retries, self.policy)

    def duration(self, kind: cm.TimerKind) -> float:
        ms = {
            cm.TimerKind.RETRANSMIT: self.timeout_ms,
            cm.TimerKind.LOOKUP_WINDOW: self.lookup_ms,
            cm.TimerKind.HOLD: self.hold_ms,
        }[kind]
        return ms / 1000.0


def parse_address(text: str) -> Address:
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = "127.0.0.1", text
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise RuntimeConfigError(f"bad address {text!r}") from None


class CrashPoint:
    """Test hook: ``exit:send:Agreed`` or ``hang:log:REDO``.

    ``exit`` terminates the process with ``os._exit`` right after the named
    effect; ``hang`` stops the loop forever so a test can deliver a real
    SIGKILL at that point.
    """

    def __init__(self, value: str) -> None:
        try:
            self.action, self.kind, self.name = value.split(":")
        except ValueError:
            raise RuntimeConfigError(f"bad {CRASH_ENV} value {value!r}") from None
        if self.action not in ("exit", "hang") or self.kind not in ("send", "log"):
            raise RuntimeConfigError(f"bad {CRASH_ENV} value {value!r}")

    def matches(self, effect) -> bool:
        if self.kind == "send" and isinstance(effect, cm.SendMessage):
            return type(effect.message).__name__ == self.name
        if self.kind == "log" and isinstance(effect, cm.AppendLog):
            return effect.record.kind.name == self.name
        return False

    def fire(self) -> None:
        log.warning("crash point reached: %s:%s:%s", self.action, self.kind, self.name)
        if self.action == "exit":
            os._exit(137)
        while True:
            time.sleep(3600)


class NodeRuntime:
    def __init__(self, config: RuntimeConfig, *, on_transition=None) -> None:
        config.validate()
        self.config = config
        self.data_dir = Path(config.data_dir)
        self.log_path = self.data_dir / "log.plog"
        wallet = load_wallet(self.data_dir)
        self.transitions: list[Transition] = []
        self._user_on_transition = on_transition
        self.node = ProtocolNode(
            wallet,
            StableLog.open(self.log_path),
            config.protocol,
            on_wallet_change=self._persist,
            on_transition=self._record,
            reopen_log=lambda: StableLog.open(self.log_path),
            record_history=True,
        )
        hook = os.environ.get(CRASH_ENV)
        self.crash_point = CrashPoint(hook) if hook else None
        self.addresses: dict[NodeId, Address] = {}
        self.timers: list = []
        self.active: dict[tuple, int] = {}
        self.seq = 0
        self.failures: dict[TransactionId, str] = {}
        self.sock = self._open_socket()

    # --- setup ---------------------------------------------------------------

    def _open_socket(self) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            if self.config.broadcast:
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
            sock.bind((self.config.bind, self.config.port))
        except OSError as exc:
            sock.close()
            raise TransportError(f"cannot bind {self.config.bind}:{self.config.port}: {exc}") from exc
        sock.setblocking(False)
        return sock

    @property
    def address(self) -> Address:
        return self.sock.getsockname()

    def close(self) -> None:
        self.sock.close()

    def _persist(self, wallet: WalletState) -> None:
        save_wallet(wallet, self.data_dir)

    def _record(self, t: Transition) -> None:
        self.transitions.append(t)
        log.info("%s %s: %s -> %s", t.node, t.input, t.before, t.after)
        if self._user_on_transition:
            self._user_on_transition(t)

    @property
    def wallet(self) -> WalletState:
        return self.node.wallet

    def recover(self) -> None:
        """Every process start is a restart: rebuild machines from the log."""
        self.run(self.node.restart())

    # --- effects -------------------------------------------------------------

    def run(self, effects: list) -> None:
        for effect in effects:
            external = self.node.execute(effect)
            if external is not None:
                self._external(external)
            if self.crash_point and self.crash_point.matches(effect):
                self.crash_point.fire()

    def _external(self, effect) -> None:
        if isinstance(effect, cm.SendMessage):
            self._send(effect.to, effect.message)
        elif isinstance(effect, dc.Broadcast):
            self._broadcast(effect.packet)
        elif isinstance(effect, cm.StartTimer):
            key = (effect.txn, effect.kind)
            self.seq += 1
            self.active[key] = self.seq
            heapq.heappush(self.timers, (time.monotonic() + self.config.duration(effect.kind), self.seq, key))
        elif isinstance(effect, cm.CancelTimer):
            self.active.pop((effect.txn, effect.kind), None)
        elif isinstance(effect, dc.SessionFailed):
            self.failures[effect.txn] = effect.reason

    def _sendto(self, data: bytes, addr: Address) -> None:
        try:
            self.sock.sendto(data, addr)
        except OSError as exc:
            # Datagram semantics: a failed send is just a lost packet.
            log.info("send to %s failed: %s", addr, exc)

    def _send(self, to: NodeId, message) -> None:
        addr = self.addresses.get(to)
        if addr is None:
            log.info("no address for %s yet; dropping %s", to, type(message).__name__)
            return
        peer_key = self.wallet.keys.peer_directory.get(to)
        try:
            data = encode_outbound(message, self.wallet, peer_key, secrets.token_bytes(32))
        except WireError as exc:
            log.info("cannot send %s to %s: %s", type(message).__name__, to, exc)
            return
        self._sendto(data, addr)

    def _broadcast(self, packet: dc.LookupPacket) -> None:
        data = encode_outbound(packet, self.wallet, None, b"")
        targets = list(self.config.peers)
        if self.config.broadcast:
            targets.append(("255.255.255.255", self.config.port))
        for addr in targets:
            self._sendto(data, addr)

    # --- loop ----------------------------------------------------------------

    def _receive(self) -> None:
        while True:
            try:
                data, addr = self.sock.recvfrom(65536)
            except (BlockingIOError, InterruptedError):
                return
            except OSError as exc:
                log.info("receive failed: %s", exc)
                return
            try:
                sender, message = decode_inbound(data, self.wallet)
            except (WireError, EnvelopeError, WalletError, ValueError) as exc:
                log.info("dropping datagram from %s: %s", addr, exc)
                continue
            if sender == self.node.node_id:
                continue
            self.addresses[sender] = addr
            self.run(self.node.handle_message(message, sender))

    def _fire_due(self) -> None:
        now = time.monotonic()
        while self.timers and self.timers[0][0] <= now:
            _, seq, key = heapq.heappop(self.timers)
            if self.active.get(key) != seq:
                continue
            del self.active[key]
            txn, kind = key
            self.run(self.node.handle_timeout(txn, kind))

    def poll(self, budget: float = TICK) -> None:
        wait = budget
        if self.timers:
            wait = max(0.0, min(wait, self.timers[0][0] - time.monotonic()))
        readable, _, _ = select.select([self.sock], [], [], wait)
        if readable:
            self._receive()
        self._fire_due()

    def run_until(self, done, deadline: float | None = None) -> bool:
        while not done():
            if deadline is not None and time.monotonic() >= deadline:
                return False
            self.poll()
        return True

    # --- roles ---------------------------------------------------------------

    def sell(self, buyer: NodeId, amount: int, description: bytes = b"goods", deadline: float | None = None) -> str:
        """Run one purchase to completion; returns committed / aborted / reason."""
        # Sequence numbers come from the clock so an id is never reused even
        # when an earlier run left no log records behind.
        self.node.next_sequence = max(self.node.next_sequence, time.time_ns() // 1000)
        txn, effects = self.node.start_purchase(buyer, amount, description)
        self.run(effects)

        def finished() -> bool:
            return txn in self.failures or self.node.outcome(txn) in ("committed", "aborted")

        if not self.run_until(finished, deadline):
            return "timeout"
        if txn in self.failures:
            return self.failures[txn]
        state = self.node.sellers.get(txn)
        if isinstance(state, cm.SellerDone) and state.outcome in (
            cm.DoneOutcome.COMMITTED_UNACKED,
            cm.DoneOutcome.ABORTED_UNACKED,
        ):
            return state.outcome.value
        return self.node.outcome(txn)

    def _finished_txns(self) -> list[TransactionId]:
        done = [t for t, s in self.node.buyers.items() if isinstance(s, (cm.BuyerCommitted, cm.BuyerAborted))]
        done += [t for t, d in self.node.decided.items() if not d.accepted and t not in self.node.buyers]
        return done

    def serve(self, once: bool = False, deadline: float | None = None, linger: float = 1.0) -> str | None:
        """Answer lookups and run buyer transactions; with ``once`` stop after
        the first transaction finishes (lingering to answer retransmissions)."""

        seen = set(self._finished_txns())

        def fresh() -> list[TransactionId]:
            return [t for t in self._finished_txns() if t not in seen]

        if not self.run_until(lambda: once and bool(fresh()), deadline):
            return None if not once else "timeout"
        txn = fresh()[0]
        outcome = self.node.outcome(txn) if txn in self.node.buyers else "aborted"
        end = time.monotonic() + linger
        self.run_until(lambda: False, end)
        return outcome
