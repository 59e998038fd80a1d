"""Synchronous message-round buses for the distributed market iteration.

Both transports speak the same frame format:

    {"round": int, "direction": str, "payload": {...}}

``direction`` is one of ``price_broadcast``, ``demand_reply`` or
``supply_reply`` (plus the transport-level ``register`` handshake and
``shutdown``).  The in-process bus serializes frames through the same JSON
encoder as the TCP bus, so the two produce bit-identical round sequences for
identical scenarios and configurations.

A round is a barrier: the supervisor broadcasts one price frame, then blocks
until every registered agent has replied.  Replies are ordered by agent name
before aggregation, which makes rounds deterministic regardless of arrival
order.
"""

from __future__ import annotations

import json
import socket
import threading

__all__ = ["BusTimeoutError", "InProcBus", "TcpBus", "start_tcp_agents", "frame", "parse_frame"]

PRICE_BROADCAST = "price_broadcast"
DEMAND_REPLY = "demand_reply"
SUPPLY_REPLY = "supply_reply"
REGISTER = "register"
SHUTDOWN = "shutdown"


class BusTimeoutError(RuntimeError):
    """An agent failed to reply within the round timeout."""


def frame(round_idx: int, direction: str, payload: dict) -> str:
    return json.dumps({"round": round_idx, "direction": direction, "payload": payload})


def parse_frame(line: str) -> dict:
    msg = json.loads(line)
    if not {"round", "direction", "payload"} <= msg.keys():
        raise ValueError(f"malformed frame: {line!r}")
    return msg


class InProcBus:
    """Deterministic single-process bus: agents are callables invoked in
    name order within the supervisor's thread."""

    def __init__(self):
        self._agents: dict[str, object] = {}

    def register(self, name: str, handler) -> None:
        if name in self._agents:
            raise ValueError(f"duplicate agent name {name!r}")
        self._agents[name] = handler

    @property
    def agent_names(self) -> list[str]:
        return sorted(self._agents)

    def round_trip(self, round_idx: int, price_payload: dict) -> list[dict]:
        """Broadcast a price frame, return every agent's reply payload."""
        wire = frame(round_idx, PRICE_BROADCAST, price_payload)
        replies = []
        for name in sorted(self._agents):
            msg = parse_frame(wire)
            reply = self._agents[name](msg["round"], msg["payload"])
            replies.append(parse_frame(frame(round_idx, reply["direction"], reply["payload"]))["payload"])
        return sorted(replies, key=lambda p: p["agent"])

    def close(self) -> None:
        self._agents.clear()


class TcpBus:
    """Supervisor side of the loopback-TCP transport.

    Newline-delimited JSON frames over ``127.0.0.1``; every agent connects,
    sends one ``register`` frame, then answers each price broadcast with a
    single reply frame.  ``timeout`` bounds each per-agent read in a round.
    """

    def __init__(self, n_agents: int, port: int = 0, timeout: float = 5.0):
        self.timeout = timeout
        self.n_agents = n_agents
        self._srv = socket.create_server(("127.0.0.1", port))
        self._srv.settimeout(timeout)
        self.port = self._srv.getsockname()[1]
        self._conns: dict[str, tuple[socket.socket, object]] = {}

    def wait_for_agents(self) -> None:
        while len(self._conns) < self.n_agents:
            try:
                conn, _ = self._srv.accept()
            except socket.timeout as exc:
                raise BusTimeoutError("agents did not register in time") from exc
            conn.settimeout(self.timeout)
            rfile = conn.makefile("r", encoding="utf-8", newline="\n")
            line = rfile.readline()
            msg = parse_frame(line)
            if msg["direction"] != REGISTER:
                raise ValueError(f"expected register frame, got {msg['direction']}")
            self._conns[msg["payload"]["agent"]] = (conn, rfile)

    def round_trip(self, round_idx: int, price_payload: dict) -> list[dict]:
        wire = (frame(round_idx, PRICE_BROADCAST, price_payload) + "\n").encode()
        for name in sorted(self._conns):
            self._conns[name][0].sendall(wire)
        replies = []
        for name in sorted(self._conns):
            conn, rfile = self._conns[name]
            try:
                line = rfile.readline()
            except socket.timeout as exc:
                raise BusTimeoutError(f"agent {name!r} timed out in round {round_idx}") from exc
            if not line:
                raise BusTimeoutError(f"agent {name!r} disconnected in round {round_idx}")
            msg = parse_frame(line)
            replies.append(msg["payload"])
        return sorted(replies, key=lambda p: p["agent"])

    def close(self) -> None:
        wire = (frame(-1, SHUTDOWN, {}) + "\n").encode()
        for conn, rfile in self._conns.values():
            try:
                conn.sendall(wire)
            except OSError:
                pass
            try:
                rfile.close()
                conn.close()
            except OSError:
                pass
        self._conns.clear()
        self._srv.close()


def _agent_loop(host: str, port: int, name: str, handler) -> None:
    with socket.create_connection((host, port)) as conn:
        rfile = conn.makefile("r", encoding="utf-8", newline="\n")
        conn.sendall((frame(0, REGISTER, {"agent": name}) + "\n").encode())
        while True:
            line = rfile.readline()
            if not line:
                return
            msg = parse_frame(line)
            if msg["direction"] == SHUTDOWN:
                return
            reply = handler(msg["round"], msg["payload"])
            conn.sendall((frame(msg["round"], reply["direction"], reply["payload"]) + "\n").encode())


def start_tcp_agents(host: str, port: int, handlers: dict[str, object]) -> list[threading.Thread]:
    """Launch one daemon thread per agent running the TCP client loop."""
    threads = []
    for name, handler in handlers.items():
        th = threading.Thread(target=_agent_loop, args=(host, port, name, handler), daemon=True)
        th.start()
        threads.append(th)
    return threads
