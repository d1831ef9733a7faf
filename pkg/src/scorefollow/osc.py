"""
Minimal OSC 1.0 messaging for accompaniment software.

Each follower tick becomes two UDP datagrams: /sf/position carries the
predicted score time in seconds and /sf/tempo_dev the ratio of the recent
score advance per tick to the advance expected at score tempo (1.0 means
the performer is on tempo). No bundles or time tags.
"""

import socket
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .follower import FollowTrace

POSITION_ADDRESS = "/sf/position"
TEMPO_ADDRESS = "/sf/tempo_dev"

Arg = Union[int, float, str]


class OscError(ValueError):
    pass


@dataclass
class OscMessage:
    address: str
    args: List[Arg] = field(default_factory=list)

    def __post_init__(self):
        if not self.address.startswith("/"):
            raise OscError(f"OSC address must start with '/': {self.address!r}")


def _pad(raw: bytes) -> bytes:
    """NUL-terminate and zero-pad to a multiple of four bytes."""
    return raw + b"\0" * (4 - len(raw) % 4)


def _osc_string(text: str) -> bytes:
    raw = text.encode("utf-8")
    if b"\0" in raw:
        raise OscError("OSC strings cannot contain NUL")
    return _pad(raw)


def encode(msg: OscMessage) -> bytes:
    tags = ","
    payload = []
    for arg in msg.args:
        # bool is an int subclass but has its own (argument-less) OSC tags
        if isinstance(arg, (bool, np.bool_)):
            raise OscError("boolean arguments are not supported")
        if isinstance(arg, (int, np.integer)):
            tags += "i"
            payload.append(struct.pack(">i", int(arg)))
        elif isinstance(arg, (float, np.floating)):
            tags += "f"
            payload.append(struct.pack(">f", float(arg)))
        elif isinstance(arg, str):
            tags += "s"
            payload.append(_osc_string(arg))
        else:
            raise OscError(f"unsupported OSC argument type {type(arg).__name__}")
    return _osc_string(msg.address) + _osc_string(tags) + b"".join(payload)


def _read_string(data: bytes, pos: int):
    end = data.index(b"\0", pos)
    text = data[pos:end].decode("utf-8")
    return text, pos + (end - pos) // 4 * 4 + 4


def decode(data: bytes) -> OscMessage:
    if len(data) % 4:
        raise OscError("OSC packet length is not a multiple of 4")
    try:
        address, pos = _read_string(data, 0)
        tags, pos = _read_string(data, pos)
        if not tags.startswith(","):
            raise OscError("missing type tag string")
        args: List[Arg] = []
        for tag in tags[1:]:
            if tag == "i":
                args.append(struct.unpack_from(">i", data, pos)[0])
                pos += 4
            elif tag == "f":
                args.append(struct.unpack_from(">f", data, pos)[0])
                pos += 4
            elif tag == "s":
                text, pos = _read_string(data, pos)
                args.append(text)
            else:
                raise OscError(f"unsupported type tag {tag!r}")
    except (ValueError, struct.error) as exc:
        if isinstance(exc, OscError):
            raise
        raise OscError(f"malformed OSC packet: {exc}") from exc
    return OscMessage(address, args)


# ---------------------------------------------------------------------------
# address remapping

def parse_remap(text: str) -> Dict[str, str]:
    """Lines of `internal_address external_address`; '#' starts a comment."""
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or not all(p.startswith("/") for p in parts):
            raise OscError(f"remap line {lineno}: expected two OSC addresses, got {line!r}")
        mapping[parts[0]] = parts[1]
    return mapping


def load_remap(path) -> Dict[str, str]:
    return parse_remap(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# trace -> messages

def tempo_deviation(recent_frames: Sequence[float], f_e: float, frame_duration: float) -> float:
    """OLS slope (frames per tick) of recent predictions over the score-tempo advance."""
    y = np.asarray(recent_frames, dtype=np.float64)
    if y.size < 2:
        return 1.0
    x = np.arange(y.size, dtype=np.float64)
    slope = np.polyfit(x, y, 1)[0]
    return float(slope * f_e * frame_duration)


def trace_messages(trace: FollowTrace, history: int = 20,
                   remap: Optional[Dict[str, str]] = None) -> List[OscMessage]:
    remap = remap or {}
    pos_addr = remap.get(POSITION_ADDRESS, POSITION_ADDRESS)
    tempo_addr = remap.get(TEMPO_ADDRESS, TEMPO_ADDRESS)
    frames = [e.score_frame for e in trace.entries]
    out = []
    for i, entry in enumerate(trace.entries):
        recent = frames[max(0, i + 1 - history):i + 1]
        out.append(OscMessage(pos_addr, [entry.score_frame * trace.frame_duration]))
        out.append(OscMessage(tempo_addr,
                              [tempo_deviation(recent, trace.f_e, trace.frame_duration)]))
    return out


class OscSender:
    """Fire-and-forget UDP sender."""

    def __init__(self, host: str, port: int):
        self.address = (host, int(port))
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def send(self, msg: OscMessage) -> None:
        self.sock.sendto(encode(msg), self.address)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def send_messages(messages: Iterable[OscMessage], host: str, port: int) -> int:
    count = 0
    with OscSender(host, port) as sender:
        for msg in messages:
            sender.send(msg)
            count += 1
    return count


def stream_trace(trace: FollowTrace, host: str, port: int,
                 remap: Optional[Dict[str, str]] = None, history: int = 20) -> int:
    """Send every trace entry as a position and a tempo message; returns the send count."""
    if not trace.entries:
        return 0
    return send_messages(trace_messages(trace, history, remap), host, port)
