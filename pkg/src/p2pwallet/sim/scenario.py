"""Declarative scenario files for ``sim run``.

One directive per line; ``#`` starts a comment::

    seed 7
    loss 0.3
    dup 0.1
    delay 1 3              # uniform integer delay range
    timeout 4              # retransmission timer
    lookup-window 2
    hold 64                # buyer hold expiry after accepting a quote
    retries 3
    commit-retries 16
    max-time 2000
    fair-after 100         # losses and duplicates stop at this time
    policy retry           # or: abort
    envelopes on           # or: off
    suite toy              # or: reference
    torn-writes on
    node S seller          # seller | buyer | idle
    node B buyer
    charge B 100
    purchase S B 40 at 0
    crash B at-effect 6 restart-after 5
    crash B after REDO restart-after 5
    crash random 1
"""

from __future__ import annotations

from dataclasses import replace

from .. import commit as cm
from ..stablelog import RecordKind
from ..wallet import Mode
from .simulator import ConfigInvalid, CrashPoint, Purchase, Script, SimConfig, Topology

_MODES = {"seller": Mode.SELLER, "buyer": Mode.BUYER, "idle": Mode.IDLE}
_SWITCH = {"on": True, "off": False, "yes": True, "no": False}

_SCALARS = {
    "seed": ("seed", int),
    "loss": ("loss_prob", float),
    "dup": ("dup_prob", float),
    "timeout": ("timeout_units", int),
    "lookup-window": ("lookup_window", int),
    "hold": ("hold_units", int),
    "retries": ("retries", int),
    "commit-retries": ("commit_retries", int),
    "max-time": ("max_time", int),
    "fair-after": ("fair_after", int),
}


def _options(tokens: list[str], allowed: set[str]) -> dict[str, str]:
    if len(tokens) % 2:
        raise ValueError("options come in name/value pairs")
    opts = dict(zip(tokens[::2], tokens[1::2]))
    unknown = set(opts) - allowed
    if unknown:
        raise ValueError(f"unknown option {sorted(unknown)[0]}")
    return opts


def parse_scenario(text: str) -> tuple[SimConfig, Topology, Script]:
    config = SimConfig()
    topology = Topology()
    script = Script()
    crashes: list[CrashPoint] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *args = line.split()
        try:
            if word in _SCALARS:
                name, kind = _SCALARS[word]
                (value,) = args
                config = replace(config, **{name: kind(value)})
            elif word == "delay":
                lo, hi = (int(a) for a in args)
                config = replace(config, delay_min=lo, delay_max=hi)
            elif word == "policy":
                (value,) = args
                config = replace(config, policy=cm.TimeoutPolicy(value))
            elif word in ("envelopes", "torn-writes"):
                (value,) = args
                config = replace(config, **{word.replace("-", "_"): _SWITCH[value]})
            elif word == "suite":
                (value,) = args
                if value not in ("toy", "reference"):
                    raise ValueError(f"unknown suite {value}")
                config = replace(config, suite=value)
            elif word == "node":
                name, mode = args
                if name in topology.nodes:
                    raise ValueError(f"node {name} declared twice")
                topology.nodes[name] = _MODES[mode]
            elif word == "charge":
                name, amount = args
                script.charges.append((name, int(amount)))
            elif word == "purchase":
                seller, buyer, amount, *rest = args
                opts = _options(rest, {"at"})
                script.purchases.append(Purchase(seller, buyer, int(amount), int(opts.get("at", 0))))
            elif word == "crash":
                crashes.extend(_parse_crash(args))
                if args and args[0] == "random":
                    config = replace(config, random_crashes=config.random_crashes + int(args[1]))
            else:
                raise ValueError(f"unknown directive {word!r}")
        except (ValueError, KeyError) as exc:
            raise ConfigInvalid(f"line {lineno}: {raw.strip()!r}: {exc}") from None
    config = replace(config, crash_plan=crashes)
    return config, topology, script


def _parse_crash(args: list[str]) -> list[CrashPoint]:
    if not args:
        raise ValueError("crash needs a node")
    if args[0] == "random":
        if len(args) != 2 or int(args[1]) < 0:
            raise ValueError("use: crash random N")
        return []
    node, how, *rest = args
    if how == "at-effect":
        index, *rest = rest
        point = CrashPoint(node, at_effect=int(index))
    elif how == "after":
        kind, *rest = rest
        point = CrashPoint(node, after_record=RecordKind[kind.upper().replace("-", "_")])
    else:
        raise ValueError(f"unknown crash trigger {how!r}")
    opts = _options(rest, {"restart-after"})
    if "restart-after" in opts:
        point = replace(point, restart_after=int(opts["restart-after"]))
    return [point]


def format_config(config: SimConfig) -> str:
    """Header block echoing the effective configuration, for trace files."""
    fair = "none" if config.fair_after is None else str(config.fair_after)
    return (
        f"# seed={config.seed} loss={config.loss_prob} dup={config.dup_prob} "
        f"delay={config.delay_min}..{config.delay_max} timeout={config.timeout_units} "
        f"retries={config.retries}/{config.commit_retries} policy={config.policy.value} fair-after={fair}\n"
    )
