"""
Randomised MIDI-domain transforms that imitate performer imperfections.

Five transforms are provided (pitch shift, onset shift, duration shift,
note deletion, note insertion). Each takes a MidiSequence, an AugmentSpec and
a numpy Generator and returns a new MidiSequence; inputs are never mutated.
"""

import configparser
from dataclasses import dataclass, fields, replace
from typing import List, Sequence, Tuple

import numpy as np

from .midi_io import DEFAULT_FRAME_DURATION, MidiSequence, NoteEvent

KINDS = ("PitchShift", "OnsetTimeShift", "DurationShift", "NoteDelete", "NoteAdd")
MODES = ("up", "down", "both")


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    max_shift: float = 0.0
    mode: str = "both"
    probability: float = 0.1
    note_num_range: Tuple[int, int] = (20, 120)
    note_duration_range: Tuple[float, float] = (0.5, 1.5)
    restrict_to_instrument_time: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")
        if self.max_shift < 0:
            raise ValueError("max_shift must be non-negative")
        lo, hi = self.note_num_range
        if not 0 <= lo <= hi <= 127:
            raise ValueError(f"bad note_num_range {self.note_num_range}")
        dlo, dhi = self.note_duration_range
        if not 0 < dlo <= dhi:
            raise ValueError(f"bad note_duration_range {self.note_duration_range}")


def make_rng(seed) -> np.random.Generator:
    """Generator from a 64-bit seed; an existing Generator is passed through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def default_chain() -> List[AugmentSpec]:
    """The five-transform configuration used for training (p = 0.1 each)."""
    return [
        AugmentSpec("PitchShift", max_shift=5, mode="both", probability=0.1),
        AugmentSpec("OnsetTimeShift", max_shift=0.5, mode="both", probability=0.1),
        AugmentSpec("DurationShift", max_shift=0.25, mode="both", probability=0.1),
        AugmentSpec("NoteDelete", probability=0.1),
        AugmentSpec("NoteAdd", probability=0.1, note_num_range=(20, 120),
                    note_duration_range=(0.5, 1.5), restrict_to_instrument_time=True),
    ]


def _selected(n: int, p: float, rng) -> np.ndarray:
    return rng.random(n) < p


def _int_shifts(count: int, spec: AugmentSpec, rng) -> np.ndarray:
    m = int(spec.max_shift)
    if spec.mode == "both":
        return rng.integers(-m, m + 1, size=count)
    if m < 1:
        return np.zeros(count, dtype=np.int64)
    mag = rng.integers(1, m + 1, size=count)
    return mag if spec.mode == "up" else -mag


def _real_shifts(count: int, spec: AugmentSpec, rng) -> np.ndarray:
    m = float(spec.max_shift)
    if spec.mode == "both":
        return rng.uniform(-m, m, size=count)
    # uniform on [0, m) never returns m; 1 - u maps it onto (0, m]
    mag = m * (1.0 - rng.random(count))
    return mag if spec.mode == "up" else -mag


def _check(spec: AugmentSpec, kind: str):
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} spec, got {spec.kind}")


def pitch_shift(seq: MidiSequence, spec: AugmentSpec, rng) -> MidiSequence:
    _check(spec, "PitchShift")
    rng = make_rng(rng)
    notes = list(seq.notes)
    mask = _selected(len(notes), spec.probability, rng)
    shifts = _int_shifts(int(mask.sum()), spec, rng)
    for i, shift in zip(np.flatnonzero(mask), shifts):
        pitch = int(np.clip(notes[i].pitch + int(shift), 0, 127))
        notes[i] = replace(notes[i], pitch=pitch)
    return MidiSequence.from_notes(notes, seq.total_duration)


def onset_time_shift(seq: MidiSequence, spec: AugmentSpec, rng) -> MidiSequence:
    _check(spec, "OnsetTimeShift")
    rng = make_rng(rng)
    notes = list(seq.notes)
    mask = _selected(len(notes), spec.probability, rng)
    shifts = _real_shifts(int(mask.sum()), spec, rng)
    for i, shift in zip(np.flatnonzero(mask), shifts):
        notes[i] = replace(notes[i], onset=max(0.0, notes[i].onset + float(shift)))
    return MidiSequence.from_notes(notes, seq.total_duration)


def duration_shift(seq: MidiSequence, spec: AugmentSpec, rng,
                   min_duration: float = DEFAULT_FRAME_DURATION) -> MidiSequence:
    _check(spec, "DurationShift")
    rng = make_rng(rng)
    notes = list(seq.notes)
    mask = _selected(len(notes), spec.probability, rng)
    shifts = _real_shifts(int(mask.sum()), spec, rng)
    for i, shift in zip(np.flatnonzero(mask), shifts):
        duration = max(min_duration, notes[i].duration + float(shift))
        notes[i] = replace(notes[i], duration=duration)
    return MidiSequence.from_notes(notes, seq.total_duration)


def note_delete(seq: MidiSequence, spec: AugmentSpec, rng) -> MidiSequence:
    _check(spec, "NoteDelete")
    rng = make_rng(rng)
    mask = _selected(len(seq.notes), spec.probability, rng)
    kept = [n for n, drop in zip(seq.notes, mask) if not drop]
    return MidiSequence(kept, seq.total_duration)


def note_add(seq: MidiSequence, spec: AugmentSpec, rng) -> MidiSequence:
    """Insert Binomial(len(seq), p) random notes.

    With restrict_to_instrument_time every inserted note ends by
    seq.total_duration; durations longer than the sequence are capped to it.
    """
    _check(spec, "NoteAdd")
    rng = make_rng(rng)
    if not seq.notes or seq.total_duration <= 0:
        return seq
    count = int(rng.binomial(len(seq.notes), spec.probability))
    if count == 0:
        return MidiSequence(list(seq.notes), seq.total_duration)
    lo, hi = spec.note_num_range
    dlo, dhi = spec.note_duration_range
    total = seq.total_duration
    pitches = rng.integers(lo, hi + 1, size=count)
    durations = np.minimum(rng.uniform(dlo, dhi, size=count), total)
    if spec.restrict_to_instrument_time:
        onsets = rng.random(count) * (total - durations)
    else:
        onsets = rng.random(count) * total
    donors = rng.integers(0, len(seq.notes), size=count)
    added = []
    for pitch, onset, duration, donor in zip(pitches, onsets, durations, donors):
        template = seq.notes[donor]
        added.append(NoteEvent(int(pitch), float(onset), float(duration),
                               template.velocity, template.track))
    return MidiSequence.from_notes(list(seq.notes) + added, seq.total_duration)


TRANSFORMS = {
    "PitchShift": pitch_shift,
    "OnsetTimeShift": onset_time_shift,
    "DurationShift": duration_shift,
    "NoteDelete": note_delete,
    "NoteAdd": note_add,
}


def apply_chain(seq: MidiSequence, specs: Sequence[AugmentSpec], rng) -> MidiSequence:
    """Apply transforms in order, threading one generator through all of them."""
    rng = make_rng(rng)
    for spec in specs:
        seq = TRANSFORMS[spec.kind](seq, spec, rng)
    return seq


# ---------------------------------------------------------------------------
# chain configuration files
#
# INI layout, one section per transform in application order. The section name
# is the transform kind, optionally followed by ":label" to allow repeats:
#
#   [PitchShift]
#   max_shift = 5
#   mode = both
#   probability = 0.1

def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if name in ("note_num_range",):
        lo, hi = (int(v) for v in raw.strip("()").split(","))
        return (lo, hi)
    if name == "note_duration_range":
        lo, hi = (float(v) for v in raw.strip("()").split(","))
        return (lo, hi)
    if name == "restrict_to_instrument_time":
        return raw.lower() in ("1", "true", "yes", "on")
    if name in ("max_shift", "probability"):
        return float(raw)
    return raw


def parse_chain_config(text: str) -> List[AugmentSpec]:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    known = {f.name for f in fields(AugmentSpec)} - {"kind"}
    specs = []
    for section in parser.sections():
        kind = section.split(":", 1)[0].strip()
        kwargs = {}
        for key, raw in parser[section].items():
            if key not in known:
                raise ValueError(f"[{section}]: unknown key {key!r}")
            kwargs[key] = _parse_value(key, raw)
        specs.append(AugmentSpec(kind, **kwargs))
    return specs


def format_chain_config(specs: Sequence[AugmentSpec]) -> str:
    lines = []
    seen = {}
    for spec in specs:
        seen[spec.kind] = seen.get(spec.kind, 0) + 1
        name = spec.kind if seen[spec.kind] == 1 else f"{spec.kind}:{seen[spec.kind]}"
        lines.append(f"[{name}]")
        for f in fields(AugmentSpec):
            if f.name == "kind":
                continue
            value = getattr(spec, f.name)
            if isinstance(value, tuple):
                value = f"{value[0]}, {value[1]}"
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)


def load_chain(path) -> List[AugmentSpec]:
    with open(path, encoding="utf-8") as fh:
        return parse_chain_config(fh.read())
