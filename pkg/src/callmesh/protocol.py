"""UDP control plane: wire formats plus the controller and agent loops.

One UDP datagram per message, UTF-8 JSON with a mandatory version field.
Stats reports flow from server agents to the controller; directives flow
back, unicast, carrying only the receiving server's rows.  There is no
retransmission of control messages: a lost directive simply means the agent
admits nothing new that slot, and stale stats are covered by the
controller's staleness rule.
"""

from __future__ import annotations

import json
import select
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

PROTOCOL_VERSION = 1
MAX_DATAGRAM = 65507
CONTROLLER_PORT = 5090
AGENT_PORT_BASE = 5090  # agent port = base + server id (1-based)


class ProtocolError(ValueError):
    """Malformed, oversize or wrong-version datagram."""


@dataclass(frozen=True)
class StatsReport:
    """Per-slot report from one server: remaining resources and fresh demand."""

    server: int                      # 1-based id
    slot: int
    cpu: float                       # remaining CPU, capacity units
    memory: float                    # remaining memory, capacity units
    local: float                     # new local call requests this slot
    outbound: Mapping[int, float] = field(default_factory=dict)  # dest id -> count

    def __post_init__(self):
        if self.server < 1:
            raise ProtocolError(f"bad server id {self.server}")
        if self.local < 0 or any(v < 0 for v in self.outbound.values()):
            raise ProtocolError("negative call counts")


@dataclass(frozen=True)
class Directive:
    """Per-slot instruction for one server: its admission row, the relay
    quotas it forwards (entries where it is the sending trunk end), and an
    optional flavor to resize to.  Quotas are integers, post-flooring."""

    server: int
    slot: int
    admit: Tuple[int, ...]                                   # row C[server, :]
    relays: Tuple[Tuple[int, int, int, int, int], ...] = ()  # (i, j, k, l, quota)
    flavor: Optional[str] = None

    def __post_init__(self):
        if any(q < 0 for q in self.admit):
            raise ProtocolError("negative admission quota")
        if any(r[4] < 0 for r in self.relays):
            raise ProtocolError("negative relay quota")


def encode_stats(report: StatsReport) -> bytes:
    payload = {
        "v": PROTOCOL_VERSION,
        "slot": report.slot,
        "srv": report.server,
        "p": report.cpu,
        "m": report.memory,
        "local": report.local,
        "out": {str(k): v for k, v in sorted(report.outbound.items())},
    }
    data = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    if len(data) > MAX_DATAGRAM:
        raise ProtocolError(f"stats datagram too large ({len(data)} bytes)")
    return data


def decode_stats(data: bytes) -> StatsReport:
    obj = _decode(data, required=("slot", "srv", "p", "m", "local", "out"))
    try:
        outbound = {int(k): float(v) for k, v in obj["out"].items()}
        return StatsReport(server=int(obj["srv"]), slot=int(obj["slot"]),
                           cpu=float(obj["p"]), memory=float(obj["m"]),
                           local=float(obj["local"]), outbound=outbound)
    except (TypeError, ValueError, AttributeError) as exc:
        raise ProtocolError(f"malformed stats payload: {exc}")


def encode_directive(directive: Directive) -> bytes:
    payload = {
        "v": PROTOCOL_VERSION,
        "slot": directive.slot,
        "srv": directive.server,
        "c": list(directive.admit),
        "r": [list(entry) for entry in directive.relays],
    }
    if directive.flavor is not None:
        payload["flavor"] = directive.flavor
    data = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    if len(data) > MAX_DATAGRAM:
        raise ProtocolError(f"directive datagram too large ({len(data)} bytes)")
    return data


def decode_directive(data: bytes) -> Directive:
    obj = _decode(data, required=("slot", "srv", "c", "r"))
    try:
        relays = tuple(tuple(int(x) for x in entry) for entry in obj["r"])
        if any(len(entry) != 5 for entry in relays):
            raise ProtocolError("relay entries must be (i, j, k, l, quota)")
        return Directive(server=int(obj["srv"]), slot=int(obj["slot"]),
                         admit=tuple(int(x) for x in obj["c"]),
                         relays=relays, flavor=obj.get("flavor"))
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed directive payload: {exc}")


def _decode(data: bytes, required: Sequence[str]) -> dict:
    if len(data) > MAX_DATAGRAM:
        raise ProtocolError("datagram exceeds UDP payload limit")
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable datagram: {exc}")
    if not isinstance(obj, dict):
        raise ProtocolError("datagram is not a JSON object")
    if obj.get("v") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {obj.get('v')!r}")
    missing = [k for k in required if k not in obj]
    if missing:
        raise ProtocolError(f"missing fields {missing}")
    return obj


# --------------------------------------------------------------------------
# service loops

@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = CONTROLLER_PORT
    tau: float = 3.0
    gather: float = 0.2          # listening window per slot
    max_slots: Optional[int] = None
    agent_addresses: Dict[int, Tuple[str, int]] = field(default_factory=dict)


def controller_serve(controller, config: ServeConfig,
                     stop: Optional[threading.Event] = None,
                     on_slot: Optional[Callable[[int, List[Directive]], None]] = None) -> None:
    """Run the duty cycle over UDP: gather reports, plan, unicast directives.

    ``controller`` is an admission Controller (``step(reports) -> directives``).
    Agent addresses are learned from report source addresses, so agents just
    need to send; static addresses may be preconfigured.  Socket errors are
    logged-and-continued: the loop never dies mid-service.
    """
    stop = stop or threading.Event()
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind((config.host, config.port))
    sock.setblocking(False)
    addresses = dict(config.agent_addresses)
    slots_done = 0
    try:
        while not stop.is_set():
            deadline = time.monotonic() + config.gather
            reports: List[StatsReport] = []
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                ready, _, _ = select.select([sock], [], [], remaining)
                if not ready:
                    break
                try:
                    data, addr = sock.recvfrom(MAX_DATAGRAM)
                    report = decode_stats(data)
                    reports.append(report)
                    addresses[report.server] = addr
                except ProtocolError:
                    continue        # ignore garbage; stale rule covers gaps
                except OSError:
                    break
            directives = controller.step(reports)
            for directive in directives:
                addr = addresses.get(directive.server)
                if addr is None:
                    continue
                try:
                    sock.sendto(encode_directive(directive), addr)
                except OSError:
                    continue
            if on_slot is not None:
                on_slot(controller.state.slot, directives)
            slots_done += 1
            if config.max_slots is not None and slots_done >= config.max_slots:
                break
            idle = config.tau - config.gather
            if idle > 0:
                stop.wait(idle)
    finally:
        sock.close()


@dataclass
class AgentConfig:
    server: int
    n: int
    controller: Tuple[str, int] = ("127.0.0.1", CONTROLLER_PORT)
    host: str = "127.0.0.1"
    port: Optional[int] = None      # default AGENT_PORT_BASE + server id
    tau: float = 3.0
    cpu: float = 100.0
    memory: float = 100.0
    max_slots: Optional[int] = None


def mock_agent(config: AgentConfig, trace: Sequence[Sequence[float]],
               stop: Optional[threading.Event] = None,
               applied: Optional[List[Directive]] = None) -> None:
    """Replay a demand trace as one server agent.

    ``trace[t]`` is the agent's offered row for slot t (index ``server-1``
    holds local calls).  Each slot the agent reports stats, waits for its
    directive, and applies it to a one-server view: duplicate directives for
    an already-applied slot are ignored, and a lost directive means no new
    admissions.  Applied directives are appended to ``applied`` if given.
    """
    stop = stop or threading.Event()
    port = config.port if config.port is not None else AGENT_PORT_BASE + config.server
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind((config.host, port))
    sock.settimeout(config.tau)
    seen_slots = set()
    try:
        for slot in range(len(trace)):
            if stop.is_set():
                break
            row = trace[slot]
            outbound = {j + 1: float(row[j]) for j in range(config.n)
                        if j != config.server - 1 and row[j] > 0}
            report = StatsReport(server=config.server, slot=slot,
                                 cpu=config.cpu, memory=config.memory,
                                 local=float(row[config.server - 1]), outbound=outbound)
            try:
                sock.sendto(encode_stats(report), config.controller)
            except OSError:
                pass
            try:
                data, _ = sock.recvfrom(MAX_DATAGRAM)
                directive = decode_directive(data)
                if directive.server != config.server:
                    continue                      # not ours: ignore with a shrug
                if directive.slot in seen_slots:
                    continue                      # idempotent application
                seen_slots.add(directive.slot)
                if applied is not None:
                    applied.append(directive)
            except socket.timeout:
                continue                          # lost directive: admit nothing new
            except ProtocolError:
                continue
            if config.max_slots is not None and slot + 1 >= config.max_slots:
                break
    finally:
        sock.close()
