"""Per-cycle datagram link between the environment side and the agent side.

The environment side sends one :class:`StateDatagram` per cycle and waits at
most ``deadline_ms`` for the matching :class:`ActionDatagram`; anything else
(timeouts, stale or foreign replies, corrupt frames) ends in a
:class:`Fallback` that the caller turns into the start-point action.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
import zlib
from collections.abc import Callable
from dataclasses import dataclass
from struct import Struct
from typing import Protocol

import numpy as np

from .core import CycleState, RawAction
from .ddpg import TrainingReport
from .error_service import ConfigError, TransportError

logger = logging.getLogger(__name__)

MAGIC = b"EL"
VERSION = 1
KIND_STATE = 0x53  # "S"
KIND_ACTION = 0x41  # "A"
FLAG_EVALUATION = 0x01

# magic[2B] | version[1B] | kind[1B] | cycle[4B] | state[8×f32] | reward[f32] | done[1B] | flags[1B]
_STATE_BODY = Struct("<2sBBI8ffBB")
# magic[2B] | version[1B] | kind[1B] | cycle[4B] | raw action[3×f32]
_ACTION_BODY = Struct("<2sBBI3f")
_CRC = Struct("<I")

STATE_DATAGRAM_SIZE = _STATE_BODY.size + _CRC.size
ACTION_DATAGRAM_SIZE = _ACTION_BODY.size + _CRC.size
_MAX_CYCLE = (1 << 32) - 1


class DatagramError(ValueError):
    """A frame that cannot be decoded; ``reason`` names the failed check."""

    def __init__(self, reason: str, message: str) -> None:
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class StateDatagram:
    cycle: int
    state: tuple[float, ...]
    reward: float
    done: int
    evaluation: bool = False


@dataclass(frozen=True)
class ActionDatagram:
    cycle: int
    action: tuple[float, float, float]


@dataclass(frozen=True)
class Fallback:
    cycle: int
    reason: str


def _seal(body: bytes) -> bytes:
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _open(data: bytes, size: int, kind: int) -> bytes:
    if len(data) != size:
        raise DatagramError("size", f"expected {size} bytes, got {len(data)}")
    body, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size :])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise DatagramError("crc", "checksum mismatch")
    if body[:2] != MAGIC:
        raise DatagramError("magic", f"bad magic {body[:2]!r}")
    if body[2] != VERSION:
        raise DatagramError("version", f"protocol version {body[2]} != {VERSION}")
    if body[3] != kind:
        raise DatagramError("kind", f"unexpected frame kind {body[3]:#x}")
    return body


def encode_state(msg: StateDatagram) -> bytes:
    if not 0 <= msg.cycle <= _MAX_CYCLE:
        raise DatagramError("cycle", f"cycle index {msg.cycle} does not fit 32 bits")
    if len(msg.state) != 8:
        raise DatagramError("size", "state datagram carries exactly 8 state values")
    flags = FLAG_EVALUATION if msg.evaluation else 0
    body = _STATE_BODY.pack(MAGIC, VERSION, KIND_STATE, msg.cycle, *msg.state, msg.reward, msg.done, flags)
    return _seal(body)


def decode_state(data: bytes) -> StateDatagram:
    fields = _STATE_BODY.unpack(_open(data, STATE_DATAGRAM_SIZE, KIND_STATE))
    cycle, state, reward, done, flags = fields[3], fields[4:12], fields[12], fields[13], fields[14]
    if done not in (0, 1):
        raise DatagramError("done", f"done byte must be 0 or 1, got {done}")
    return StateDatagram(cycle, tuple(state), reward, done, bool(flags & FLAG_EVALUATION))


def encode_action(msg: ActionDatagram) -> bytes:
    if not 0 <= msg.cycle <= _MAX_CYCLE:
        raise DatagramError("cycle", f"cycle index {msg.cycle} does not fit 32 bits")
    return _seal(_ACTION_BODY.pack(MAGIC, VERSION, KIND_ACTION, msg.cycle, *msg.action))


def decode_action(data: bytes) -> ActionDatagram:
    fields = _ACTION_BODY.unpack(_open(data, ACTION_DATAGRAM_SIZE, KIND_ACTION))
    return ActionDatagram(fields[3], (fields[4], fields[5], fields[6]))


# ---------------------------------------------------------------------------
# Endpoints
# ---------------------------------------------------------------------------


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise ConfigError(f"udp endpoint must be host:port, got {text!r}")
    return host, int(port)


@dataclass(frozen=True)
class UdpConfig:
    listen: str = "127.0.0.1:47010"
    peer: str = "127.0.0.1:47011"
    deadline_ms: float = 9.0
    enabled: bool = False

    def __post_init__(self) -> None:
        parse_endpoint(self.listen)
        parse_endpoint(self.peer)
        if self.deadline_ms <= 0:
            raise ConfigError("udp.deadline_ms: must be > 0")


def _bind(address: tuple[str, int]) -> socket.socket:
    try:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(address)
    except OSError as exc:
        raise TransportError(f"cannot bind UDP socket to {address}: {exc}") from exc
    return sock


class EnvEndpoint:
    """Environment side: one outstanding request per cycle, bounded by the deadline."""

    def __init__(self, listen: tuple[str, int], peer: tuple[str, int], deadline_ms: float = 9.0) -> None:
        self.sock = _bind(listen)
        self.peer = peer
        self.deadline_ms = deadline_ms
        self.cycle = 0
        self.latencies: list[float] = []
        self.fallbacks = 0
        self.stale = 0
        self.mismatched = 0
        self.malformed = 0

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.sock.getsockname()[:2]
        return str(host), int(port)

    def exchange(
        self, state: CycleState, reward: float, done: int, evaluation: bool = False
    ) -> RawAction | Fallback:
        idx = self.cycle
        self.cycle = (self.cycle + 1) & _MAX_CYCLE
        payload = encode_state(StateDatagram(idx, tuple(state.as_array()), reward, done, evaluation))
        t0 = time.perf_counter()
        deadline = t0 + self.deadline_ms / 1000.0
        try:
            self.sock.sendto(payload, self.peer)
        except OSError as exc:
            raise TransportError(f"send to {self.peer} failed: {exc}") from exc
        while True:
            remaining = deadline - time.perf_counter()
            if remaining <= 0:
                return self._fallback(idx, "deadline")
            self.sock.settimeout(remaining)
            try:
                data, _ = self.sock.recvfrom(2048)
            except TimeoutError:
                return self._fallback(idx, "deadline")
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            try:
                reply = decode_action(data)
            except DatagramError as exc:
                self.malformed += 1
                logger.warning("Malformed action datagram", extra={"cycle": idx, "reason": exc.reason})
                continue
            if reply.cycle < idx:
                self.stale += 1
                continue
            if reply.cycle != idx:
                self.mismatched += 1
                continue
            self.latencies.append(time.perf_counter() - t0)
            return RawAction(tuple(float(v) for v in reply.action))

    def _fallback(self, idx: int, reason: str) -> Fallback:
        self.fallbacks += 1
        logger.warning("Agent reply missed the deadline, using fallback", extra={"cycle": idx, "reason": reason})
        return Fallback(idx, reason)

    def latency_summary(self) -> dict[str, float]:
        total = len(self.latencies) + self.fallbacks
        lat_ms = np.asarray(self.latencies) * 1000.0
        summary: dict[str, float] = {
            "exchanges": float(total),
            "fallbacks": float(self.fallbacks),
            "stale": float(self.stale),
            "mismatched": float(self.mismatched),
            "malformed": float(self.malformed),
        }
        if lat_ms.size:
            p50, p99, p999 = np.percentile(lat_ms, [50.0, 99.0, 99.9])
            summary.update({"p50_ms": float(p50), "p99_ms": float(p99), "p99_9_ms": float(p999)})
        within = int(np.count_nonzero(lat_ms <= self.deadline_ms))
        summary["within_deadline"] = within / total if total else float("nan")
        return summary

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> EnvEndpoint:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


class CycleSession(Protocol):
    def on_cycle(self, state: CycleState, reward: float, done: int, evaluation: bool = False) -> RawAction: ...

    def pop_report(self) -> TrainingReport | None: ...

    def reset(self) -> None: ...


class AgentEndpoint:
    """Agent side: answer each state datagram with the session's action."""

    def __init__(
        self,
        session: CycleSession,
        listen: tuple[str, int],
        on_report: Callable[[TrainingReport], None] | None = None,
        poll_s: float = 0.2,
    ) -> None:
        self.session = session
        self.sock = _bind(listen)
        self.on_report = on_report
        self.poll_s = poll_s
        self.served = 0
        self.duplicates = 0
        self.stale = 0
        self.malformed = 0
        self.restarts = 0
        self.version_mismatch = 0
        self._last: tuple[int, bytes] | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.sock.getsockname()[:2]
        return str(host), int(port)

    def handle(self, data: bytes) -> bytes | None:
        """Reply bytes for one request, or None when the request is dropped."""
        try:
            msg = decode_state(data)
        except DatagramError as exc:
            if exc.reason == "version":
                self.version_mismatch += 1
            else:
                self.malformed += 1
            logger.debug("Dropped state datagram", extra={"reason": exc.reason})
            return None
        if self._last is not None:
            last_idx, last_reply = self._last
            if msg.cycle == last_idx:
                self.duplicates += 1
                return last_reply
            if msg.cycle == 0:
                logger.info("Environment side restarted", extra={"last_cycle": last_idx})
                self.session.reset()
                self.restarts += 1
            elif msg.cycle < last_idx:
                self.stale += 1
                return None
        state = CycleState.from_array(np.asarray(msg.state, dtype=np.float64))
        action = self.session.on_cycle(state, float(msg.reward), msg.done, msg.evaluation)
        reply = encode_action(ActionDatagram(msg.cycle, action.values))
        self._last = (msg.cycle, reply)
        self.served += 1
        report = self.session.pop_report()
        if report is not None and self.on_report is not None:
            self.on_report(report)
        return reply

    def serve(self, stop: threading.Event | None = None) -> None:
        """Receive loop; runs until *stop* is set."""
        self.sock.settimeout(self.poll_s)
        logger.info("Agent endpoint listening", extra={"address": f"{self.address[0]}:{self.address[1]}"})
        while stop is None or not stop.is_set():
            try:
                data, addr = self.sock.recvfrom(2048)
            except TimeoutError:
                continue
            except OSError as exc:
                if stop is not None and stop.is_set():
                    break
                raise TransportError(f"receive failed: {exc}") from exc
            reply = self.handle(data)
            if reply is not None:
                self.sock.sendto(reply, addr)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> AgentEndpoint:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


class UdpAgentClient:
    """Policy adapter for the orchestrator: the agent lives behind an :class:`EnvEndpoint`."""

    def __init__(self, endpoint: EnvEndpoint) -> None:
        self.endpoint = endpoint

    def on_cycle(
        self, state: CycleState, reward: float, done: int, evaluation: bool = False
    ) -> RawAction | None:
        reply = self.endpoint.exchange(state, reward, done, evaluation)
        return None if isinstance(reply, Fallback) else reply

    def pop_report(self) -> TrainingReport | None:
        return None
