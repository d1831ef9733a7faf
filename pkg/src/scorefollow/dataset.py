"""
Static (context, window, label) training data drawn from MIDI files.

A manifest only stores positions; rolls are rendered when a row is
materialised. Labels live on the correlation lag axis of length c + w - 1:
a window starting s frames after the context start has label s + w - 1, so
that label k always names the context offset of the window's last frame.
"""

import csv
import io
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence

from .augment import apply_chain, make_rng
from .midi_io import (DEFAULT_FRAME_DURATION, MidiSequence, NoteEvent, PianoRoll,
                      read_midi, slice_roll, to_piano_roll)

MANIFEST_HEADER = ["midi_path", "context_start", "window_start", "out_of_context"]


class DataError(RuntimeError):
    """Raised when the inputs cannot yield any training sample."""


@dataclass(frozen=True)
class ManifestRow:
    midi_path: str
    context_start: int
    window_start: int
    out_of_context: bool


@dataclass(frozen=True)
class SplitConfig:
    split: str
    n_split: int
    c: int
    w: int
    seed: int = 0
    in_context_prob: float = 0.9

    def __post_init__(self):
        if self.split not in ("train", "validation", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.n_split <= 0:
            raise ValueError("n_split must be positive")
        if not self.c > self.w > 0:
            raise ValueError(f"need c > w > 0, got c={self.c}, w={self.w}")


@dataclass
class TrainingSample:
    context: PianoRoll
    window: PianoRoll
    label: Optional[int]
    out_of_context: bool
    row: Optional[ManifestRow] = None


def windows_disjoint(context_start: int, c: int, window_start: int, w: int) -> bool:
    return window_start + w <= context_start or window_start >= context_start + c


def label_for(context_start: int, window_start: int, c: int, w: int) -> Optional[int]:
    """Lag index of the window inside the context, None if they do not overlap."""
    k = window_start - context_start + w - 1
    if 0 <= k <= c + w - 2:
        return k
    return None


@lru_cache(maxsize=256)
def _load(path: str, frame_duration: float):
    seq = read_midi(path)
    return seq, to_piano_roll(seq, frame_duration)


def load_sequence(path, frame_duration: float = DEFAULT_FRAME_DURATION) -> MidiSequence:
    return _load(str(path), frame_duration)[0]


def load_roll(path, frame_duration: float = DEFAULT_FRAME_DURATION) -> PianoRoll:
    return _load(str(path), frame_duration)[1]


def generate_manifest(midi_paths: Sequence, cfg: SplitConfig,
                      frame_duration: float = DEFAULT_FRAME_DURATION) -> List[ManifestRow]:
    """Draw cfg.n_split (file, context start, window start) rows.

    Windows land fully inside the context with probability
    cfg.in_context_prob; otherwise they are placed anywhere in the piece that
    does not overlap the context (falling back to in-context when the piece
    has no room for that).
    """
    rng = make_rng(cfg.seed)
    usable = []
    for path in midi_paths:
        n = load_roll(path, frame_duration).n_frames
        if n < cfg.c:
            warnings.warn(f"{path}: {n} frames is shorter than the context ({cfg.c}); skipped")
            continue
        usable.append((str(path), n))
    if not usable:
        raise DataError("no MIDI file is long enough to hold a context")

    rows = []
    c, w = cfg.c, cfg.w
    for _ in range(cfg.n_split):
        path, n = usable[int(rng.integers(len(usable)))]
        cs = int(rng.integers(0, n - c + 1))
        ws = None
        if rng.random() >= cfg.in_context_prob:
            before = max(0, cs - w + 1)  # window starts 0 .. cs - w
            after = max(0, n - w - (cs + c) + 1)  # window starts cs + c .. n - w
            if before + after > 0:
                j = int(rng.integers(before + after))
                ws = j if j < before else cs + c + (j - before)
        if ws is None:
            ws = cs + int(rng.integers(0, c - w + 1))
        rows.append(ManifestRow(path, cs, ws, windows_disjoint(cs, c, ws, w)))
    return rows


def format_manifest(rows: Sequence[ManifestRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in rows:
        writer.writerow([r.midi_path, r.context_start, r.window_start,
                         "true" if r.out_of_context else "false"])
    return buf.getvalue()


def write_manifest(rows: Sequence[ManifestRow], path) -> None:
    Path(path).write_bytes(format_manifest(rows).encode("utf-8"))


def read_manifest(path) -> List[ManifestRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise DataError(f"{path}: unexpected manifest header {reader.fieldnames}")
        return [ManifestRow(r["midi_path"], int(r["context_start"]), int(r["window_start"]),
                            r["out_of_context"].strip().lower() == "true")
                for r in reader]


def materialize(row: ManifestRow, c: int, w: int,
                frame_duration: float = DEFAULT_FRAME_DURATION) -> TrainingSample:
    roll = load_roll(row.midi_path, frame_duration)
    context = slice_roll(roll, row.context_start, c, pad=True)
    window = slice_roll(roll, row.window_start, w, pad=True)
    label = label_for(row.context_start, row.window_start, c, w)
    out = row.out_of_context or label is None
    return TrainingSample(context, window, None if out else label, out, row)


def excerpt(seq: MidiSequence, start: float, length: float) -> MidiSequence:
    """Notes sounding in [start, start + length), clipped and shifted to t=0."""
    stop = start + length
    notes = []
    for n in seq.notes:
        on, off = max(n.onset, start), min(n.end, stop)
        if off > on:
            notes.append(NoteEvent(n.pitch, on - start, off - on, n.velocity, n.track))
    return MidiSequence.from_notes(notes, length)


def augment_window(seq: MidiSequence, window_start: int, w: int, chain, rng,
                   frame_duration: float = DEFAULT_FRAME_DURATION) -> PianoRoll:
    """Render the w-frame window after augmenting its notes in the MIDI domain."""
    start = window_start * frame_duration
    part = excerpt(seq, start, w * frame_duration)
    part = apply_chain(part, chain, rng)
    return to_piano_roll(part, frame_duration, n_frames=w)


def training_batch(samples: Sequence[TrainingSample], chain, rng,
                   frame_duration: float = DEFAULT_FRAME_DURATION) -> List[TrainingSample]:
    """Copies of samples whose windows went through the augmentation chain.

    Contexts and labels are left untouched. Samples without a manifest row
    (built by hand) are passed through unchanged.
    """
    if not chain:
        return list(samples)
    rng = make_rng(rng)
    out = []
    for s in samples:
        if s.row is None:
            out.append(s)
            continue
        seq = load_sequence(s.row.midi_path, frame_duration)
        window = augment_window(seq, s.row.window_start, s.window.n_frames, chain, rng,
                                frame_duration)
        out.append(TrainingSample(s.context, window, s.label, s.out_of_context, s.row))
    return out

