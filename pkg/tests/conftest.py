import struct

import numpy as np
import pytest

from scorefollow.corpus import random_piece, write_corpus
from scorefollow.midi_io import to_piano_roll

# acceptance results, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# hand-assembled SMF bytes (independent of the package's writer)

def vlq(value):
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def mtrk(body: bytes, end_of_track: bool = True) -> bytes:
    if end_of_track:
        body = body + b"\x00\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + body


def smf(tracks, fmt=None, division=480):
    if fmt is None:
        fmt = 0 if len(tracks) == 1 else 1
    return b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), division) + b"".join(tracks)


@pytest.fixture(scope="session")
def corpus_paths(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return write_corpus(out, 4, seed=3, duration=12.0)


@pytest.fixture(scope="session")
def piece_roll():
    return to_piano_roll(random_piece(11, 20.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
