"""
Standard MIDI File reading/writing and binary piano rolls.

parse_smf(): decode format 0/1 SMF bytes into a MidiSequence (times in seconds).
write_smf(): encode a MidiSequence as a format 0 or 1 SMF (used for synthetic corpora).
to_piano_roll(): render notes into a 128 x n binary matrix.
slice_roll(): cut (optionally zero-padded) column ranges out of a roll.
render_pgm() / parse_pgm(): grayscale image emission for roll inspection.
save_roll() / load_roll(): flat binary roll files.
"""

import math
import struct
import warnings
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

N_PITCHES = 128
DEFAULT_FRAME_DURATION = 1.0 / 96
DEFAULT_TEMPO = 500000  # microseconds per quarter note (120 BPM)

ROLL_MAGIC = b"PROLL001"

# tolerance for snapping times that land on frame boundaries up to float noise
_FRAME_EPS = 1e-9


class MidiError(ValueError):
    """Raised for malformed or unsupported MIDI data."""


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float  # seconds
    duration: float  # seconds
    velocity: int = 64
    track: int = 0

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if self.onset < 0:
            raise ValueError(f"negative onset: {self.onset}")
        if not self.duration > 0:
            raise ValueError(f"non-positive duration: {self.duration}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class MidiSequence:
    """Notes sorted by onset plus the overall length in seconds."""

    notes: List[NoteEvent] = field(default_factory=list)
    total_duration: float = 0.0

    @classmethod
    def from_notes(cls, notes, total_duration: Optional[float] = None) -> "MidiSequence":
        notes = sorted(notes, key=lambda n: (n.onset, n.pitch, n.track))
        end = max((n.end for n in notes), default=0.0)
        if total_duration is None or total_duration < end:
            total_duration = end
        return cls(notes, total_duration)

    def __len__(self):
        return len(self.notes)


@dataclass
class PianoRoll:
    """Binary 128 x n matrix; column t covers [t*frame_duration, (t+1)*frame_duration)."""

    frames: np.ndarray
    frame_duration: float = DEFAULT_FRAME_DURATION

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 2 or self.frames.shape[0] != N_PITCHES:
            raise ValueError(f"piano roll must be 128 x n, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames * self.frame_duration

    def __eq__(self, other):
        if not isinstance(other, PianoRoll):
            return NotImplemented
        return (math.isclose(self.frame_duration, other.frame_duration, rel_tol=1e-6)
                and np.array_equal(self.frames, other.frames))


# ---------------------------------------------------------------------------
# SMF decoding

def _read_varlen(data: bytes, pos: int, end: int) -> Tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiError("truncated variable-length quantity")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiError("variable-length quantity longer than 4 bytes")


def _iter_chunks(data: bytes, pos: int):
    while pos < len(data):
        if pos + 8 > len(data):
            raise MidiError("truncated chunk header")
        kind = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        start = pos + 8
        if start + length > len(data):
            raise MidiError(f"truncated {kind!r} chunk: need {length} bytes, "
                            f"have {len(data) - start}")
        yield kind, start, start + length
        pos = start + length


def _parse_track(data: bytes, start: int, end: int):
    """Return (events, end_tick); events are (tick, kind, payload) tuples.

    kind is 'on' / 'off' with payload (channel, pitch, velocity) or 'tempo'
    with payload microseconds-per-quarter.
    """
    events = []
    pos = start
    tick = 0
    status = None
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiError("truncated event")
        byte = data[pos]
        if byte & 0x80:
            pos += 1
            if byte < 0xF0:
                status = byte
        elif status is None:
            raise MidiError("running status without a preceding status byte")
        else:
            byte = status

        if byte == 0xFF:
            if pos >= end:
                raise MidiError("truncated meta event")
            meta = data[pos]
            length, pos = _read_varlen(data, pos + 1, end)
            if pos + length > end:
                raise MidiError("truncated meta event payload")
            payload = data[pos:pos + length]
            pos += length
            if meta == 0x51 and length == 3:
                events.append((tick, "tempo", int.from_bytes(payload, "big")))
            elif meta == 0x2F:
                break
        elif byte in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos, end)
            pos += length
            if pos > end:
                raise MidiError("truncated sysex event")
        elif byte >= 0xF0:
            raise MidiError(f"unexpected system message 0x{byte:02X} in track")
        else:
            kind = byte & 0xF0
            channel = byte & 0x0F
            n_data = 1 if kind in (0xC0, 0xD0) else 2
            if pos + n_data > end:
                raise MidiError("truncated channel event")
            args = data[pos:pos + n_data]
            pos += n_data
            if kind == 0x90 and args[1] > 0:
                events.append((tick, "on", (channel, args[0], args[1])))
            elif kind == 0x80 or kind == 0x90:
                events.append((tick, "off", (channel, args[0], 0)))
    return events, tick


class _TempoMap:
    """Tick to seconds conversion over a piecewise-constant tempo."""

    def __init__(self, tempo_events, division: int):
        changes = {}
        for tick, uspq in sorted(tempo_events, key=lambda e: e[0]):
            changes[tick] = uspq  # later event at the same tick wins
        if 0 not in changes:
            changes[0] = DEFAULT_TEMPO
        self.ticks = sorted(changes)
        self.tempi = [changes[t] for t in self.ticks]
        self.division = division
        # integer accumulators (tick * microseconds) keep the arithmetic exact
        self.acc = [0]
        for i in range(1, len(self.ticks)):
            span = self.ticks[i] - self.ticks[i - 1]
            self.acc.append(self.acc[-1] + span * self.tempi[i - 1])

    def seconds(self, tick: int) -> float:
        i = int(np.searchsorted(self.ticks, tick, side="right")) - 1
        num = self.acc[i] + (tick - self.ticks[i]) * self.tempi[i]
        return num / (1e6 * self.division)


def parse_smf(data: bytes) -> MidiSequence:
    """Decode a format 0 or 1 Standard MIDI File.

    Note-on with velocity 0 counts as note-off. Overlapping notes of the same
    pitch/channel are paired first-in first-out. Notes still sounding at the
    end of their track are closed there with a warning. Controllers
    (including sustain) and SysEx data are ignored.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiError("missing MThd header")
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiError(f"bad header length {hlen}")
    fmt, ntrks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise MidiError("format 2 (independent sequences) is not supported")
    if fmt not in (0, 1):
        raise MidiError(f"unknown SMF format {fmt}")

    tracks = []
    for kind, start, end in _iter_chunks(data, 8 + hlen):
        if kind == b"MTrk":
            tracks.append(_parse_track(data, start, end))
    if len(tracks) < ntrks:
        warnings.warn(f"header declares {ntrks} tracks, found {len(tracks)}")

    if division & 0x8000:
        # SMPTE timing: ticks per second is fixed, tempo events do not apply
        fps = 256 - (division >> 8)
        tpf = division & 0xFF
        ticks_per_second = fps * tpf
        if ticks_per_second == 0:
            raise MidiError("invalid SMPTE division")
        to_sec = lambda tick: tick / ticks_per_second  # noqa: E731
    else:
        if division == 0:
            raise MidiError("division of 0 ticks per quarter note")
        tempo_events = [(t, v) for events, _ in tracks for t, k, v in events if k == "tempo"]
        tmap = _TempoMap(tempo_events, division)
        to_sec = tmap.seconds

    notes = []
    for track_idx, (events, end_tick) in enumerate(tracks):
        open_notes = defaultdict(deque)
        for tick, kind, payload in events:
            if kind == "on":
                channel, pitch, velocity = payload
                open_notes[channel, pitch].append((tick, velocity))
            elif kind == "off":
                channel, pitch, _ = payload
                queue = open_notes.get((channel, pitch))
                if queue:
                    on_tick, velocity = queue.popleft()
                    notes.append((on_tick, tick, pitch, velocity, track_idx))
        dangling = [(key, item) for key, queue in open_notes.items() for item in queue]
        if dangling:
            warnings.warn(f"track {track_idx}: {len(dangling)} note(s) left on; "
                          f"closing at end of track")
            for (channel, pitch), (on_tick, velocity) in dangling:
                notes.append((on_tick, end_tick, pitch, velocity, track_idx))

    events_out = []
    for on_tick, off_tick, pitch, velocity, track_idx in notes:
        onset = to_sec(on_tick)
        duration = to_sec(off_tick) - onset
        if duration <= 0:
            continue
        events_out.append(NoteEvent(pitch, onset, duration, velocity, track_idx))
    return MidiSequence.from_notes(events_out)


def read_midi(path) -> MidiSequence:
    return parse_smf(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# SMF encoding

def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _track_chunk(events) -> bytes:
    body = bytearray()
    last = 0
    for tick, payload, _ in sorted(events, key=lambda e: (e[0], e[2])):
        body += _varlen(tick - last) + payload
        last = tick
    body += b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def write_smf(seq: MidiSequence, ticks_per_beat: int = 480, tempo: int = DEFAULT_TEMPO) -> bytes:
    """Encode notes as an SMF with a single constant tempo.

    NoteEvent.track t is written to chunk t (the tempo event lives in chunk
    0), so parse_smf(write_smf(seq)) keeps track indices. Times are rounded
    to the nearest tick.
    """
    ticks_per_sec = ticks_per_beat * 1e6 / tempo
    n_tracks = max((n.track for n in seq.notes), default=0) + 1
    tracks = [[] for _ in range(n_tracks)]
    tracks[0].append((0, b"\xff\x51\x03" + tempo.to_bytes(3, "big"), -1))
    for note in seq.notes:
        on = int(round(note.onset * ticks_per_sec))
        off = max(on + 1, int(round(note.end * ticks_per_sec)))
        vel = max(1, min(127, note.velocity))
        # third element orders note-offs before note-ons at equal ticks
        tracks[note.track].append((on, bytes([0x90, note.pitch, vel]), 1))
        tracks[note.track].append((off, bytes([0x80, note.pitch, 0]), 0))
    fmt = 0 if n_tracks == 1 else 1
    header = b"MThd" + struct.pack(">IHHH", 6, fmt, n_tracks, ticks_per_beat)
    return header + b"".join(_track_chunk(events) for events in tracks)


def write_midi(seq: MidiSequence, path, **kwargs) -> None:
    Path(path).write_bytes(write_smf(seq, **kwargs))


# ---------------------------------------------------------------------------
# piano rolls

def _frame_ceil(x: float) -> int:
    return int(math.ceil(x - _FRAME_EPS))


def n_frames_for(duration: float, frame_duration: float) -> int:
    return max(0, _frame_ceil(duration / frame_duration))


def to_piano_roll(seq: MidiSequence, frame_duration: float = DEFAULT_FRAME_DURATION,
                  n_frames: Optional[int] = None) -> PianoRoll:
    """Binarised roll of all tracks; frame t is on iff onset <= t*fd < end.

    n_frames overrides the natural length (ceil(total_duration / fd)); notes
    beyond it are cropped.
    """
    if frame_duration <= 0:
        raise ValueError("frame_duration must be positive")
    if n_frames is None:
        n_frames = n_frames_for(seq.total_duration, frame_duration)
    frames = np.zeros((N_PITCHES, n_frames), dtype=np.uint8)
    for note in seq.notes:
        t0 = max(0, _frame_ceil(note.onset / frame_duration))
        t1 = min(n_frames, _frame_ceil(note.end / frame_duration))
        if t1 > t0:
            frames[note.pitch, t0:t1] = 1
    return PianoRoll(frames, frame_duration)


def roll_to_notes(roll: PianoRoll) -> List[Tuple[int, int, int]]:
    """Column runs as (pitch, start_frame, n_frames), sorted by start then pitch."""
    runs = []
    padded = np.pad(roll.frames.astype(np.int8), ((0, 0), (1, 1)))
    diff = np.diff(padded, axis=1)
    for pitch in range(N_PITCHES):
        starts = np.flatnonzero(diff[pitch] == 1)
        stops = np.flatnonzero(diff[pitch] == -1)
        runs.extend((pitch, int(s), int(e - s)) for s, e in zip(starts, stops))
    return sorted(runs, key=lambda r: (r[1], r[0]))


def slice_roll(roll: PianoRoll, start: int, length: int, pad: bool = False) -> PianoRoll:
    if length < 0:
        raise ValueError("negative slice length")
    n = roll.n_frames
    if not pad:
        if start < 0 or start + length > n:
            raise IndexError(f"slice [{start}, {start + length}) outside roll of {n} frames")
        return PianoRoll(roll.frames[:, start:start + length].copy(), roll.frame_duration)
    out = np.zeros((N_PITCHES, length), dtype=np.uint8)
    lo, hi = max(start, 0), min(start + length, n)
    if hi > lo:
        out[:, lo - start:hi - start] = roll.frames[:, lo:hi]
    return PianoRoll(out, roll.frame_duration)


def render_pgm(roll: PianoRoll) -> bytes:
    """P5 image, 128 rows (highest pitch on top), one column per frame."""
    pixels = np.flipud(roll.frames).astype(np.uint8) * 255
    header = f"P5\n{roll.n_frames} {N_PITCHES}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def parse_pgm(data: bytes, frame_duration: float = DEFAULT_FRAME_DURATION) -> PianoRoll:
    """Inverse of render_pgm (any nonzero pixel is an active cell)."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM (P5) image")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data[pos:pos + width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise ValueError("truncated PGM pixel data")
    frames = np.flipud(pixels.reshape(height, width)) > 0
    return PianoRoll(frames.astype(np.uint8), frame_duration)


def save_roll(roll: PianoRoll, path) -> None:
    ns = int(round(roll.frame_duration * 1e9))
    header = ROLL_MAGIC + struct.pack("<IQ", roll.n_frames, ns)
    Path(path).write_bytes(header + np.ascontiguousarray(roll.frames).tobytes())


def load_roll(path) -> PianoRoll:
    data = Path(path).read_bytes()
    if data[:8] != ROLL_MAGIC:
        raise ValueError("not a piano roll file")
    n, ns = struct.unpack("<IQ", data[8:20])
    body = np.frombuffer(data[20:], dtype=np.uint8)
    if body.size != N_PITCHES * n:
        raise ValueError(f"roll body holds {body.size} bytes, expected {N_PITCHES * n}")
    return PianoRoll(body.reshape(N_PITCHES, n).copy(), ns / 1e9)
