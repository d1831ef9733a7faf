"""Synthetic piano pieces for desk-scale training and following experiments."""

from pathlib import Path

import numpy as np

from .augment import make_rng
from .midi_io import DEFAULT_FRAME_DURATION, MidiSequence, NoteEvent, write_midi

# note lengths in frames; with 1/96 s frames these are 1/8 .. 1/2 s at 120 BPM
_MELODY_LENGTHS = np.array([12, 12, 24, 24, 24, 36, 48])
_BASS_LENGTHS = np.array([48, 72, 96])


def random_piece(rng, duration: float = 30.0,
                 frame_duration: float = DEFAULT_FRAME_DURATION) -> MidiSequence:
    """A melody over a slower bass line with occasional chord tones.

    All times are whole multiples of frame_duration, so the piano roll of the
    result reproduces the notes exactly. The melody is a bounded random walk,
    which keeps every few-second stretch locally distinctive.
    """
    rng = make_rng(rng)
    n_frames = int(round(duration / frame_duration))
    notes = []

    t = 0
    pitch = int(rng.integers(62, 79))
    while t < n_frames:
        length = int(rng.choice(_MELODY_LENGTHS))
        length = min(length, n_frames - t)
        step = int(rng.integers(-4, 5))
        pitch = int(np.clip(pitch + step, 55, 88))
        gap = 0 if rng.random() < 0.8 else 6
        sounding = max(1, length - gap)
        notes.append(NoteEvent(pitch, t * frame_duration, sounding * frame_duration, 80, 0))
        if rng.random() < 0.25:
            third = int(np.clip(pitch - int(rng.choice([3, 4, 7])), 0, 127))
            notes.append(NoteEvent(third, t * frame_duration, sounding * frame_duration, 70, 0))
        t += length

    t = 0
    bass = int(rng.integers(38, 50))
    while t < n_frames:
        length = min(int(rng.choice(_BASS_LENGTHS)), n_frames - t)
        bass = int(np.clip(bass + int(rng.integers(-5, 6)), 31, 54))
        notes.append(NoteEvent(bass, t * frame_duration, length * frame_duration, 70, 0))
        t += length

    return MidiSequence.from_notes(notes)


def write_corpus(out_dir, n_pieces: int, seed: int = 0, duration: float = 30.0):
    """Write n_pieces synthetic .mid files; returns their paths in order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    paths = []
    for i in range(n_pieces):
        seq = random_piece(rng, duration)
        path = out_dir / f"piece_{i:03d}.mid"
        write_midi(seq, path)
        paths.append(path)
    return paths
