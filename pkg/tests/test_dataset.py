import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scorefollow.augment import AugmentSpec, default_chain
from scorefollow.dataset import (MANIFEST_HEADER, DataError, ManifestRow, SplitConfig,
                                 TrainingSample, excerpt, format_manifest, generate_manifest,
                                 label_for, materialize, read_manifest, training_batch,
                                 windows_disjoint, write_manifest)
from scorefollow.midi_io import MidiSequence, NoteEvent, PianoRoll, write_midi


def brute_correlation(C, W):
    """P[k] = sum_j sum_p W[p, j] * C[p, k + j - w + 1], zero outside C."""
    c, w = C.shape[1], W.shape[1]
    out = np.zeros(c + w - 1)
    for k in range(c + w - 1):
        for j in range(w):
            t = k + j - w + 1
            if 0 <= t < c:
                out[k] += float(W[:, j] @ C[:, t])
    return out


@pytest.fixture
def one_second_file(tmp_path):
    path = tmp_path / "one.mid"
    write_midi(MidiSequence.from_notes([NoteEvent(60, 0.0, 1.0)]), path)
    return path


# ---------------------------------------------------------------------------
# labels

def test_label_examples():
    c, w = 1250, 500
    assert label_for(100, 100, c, w) == w - 1
    assert label_for(100, 100 + c - w, c, w) == c - 1
    assert label_for(0, -(w - 1), c, w) == 0
    assert label_for(0, c - 1, c, w) == c + w - 2
    assert label_for(0, c, c, w) is None
    assert label_for(0, -w, c, w) is None


def test_windows_disjoint():
    assert windows_disjoint(100, 50, 20, 80)
    assert not windows_disjoint(100, 50, 21, 80)
    assert windows_disjoint(100, 50, 150, 10)
    assert not windows_disjoint(100, 50, 149, 10)


def test_correlation_peak_is_label(rng):
    # on a random binary roll the exact-match lag dominates the correlation
    c, w = 60, 20
    roll = (rng.random((128, 200)) < 0.05).astype(np.float64)
    for offset in (0, 7, 40):
        C = roll[:, 50:50 + c]
        W = roll[:, 50 + offset:50 + offset + w]
        assert int(np.argmax(brute_correlation(C, W))) == label_for(50, 50 + offset, c, w)


# ---------------------------------------------------------------------------
# manifest

def test_exact_length_file_forces_context_start_zero(one_second_file):
    rows = generate_manifest([one_second_file], SplitConfig("train", 20, 96, 32, seed=5,
                                                            in_context_prob=1.0))
    assert {r.context_start for r in rows} == {0}
    assert all(0 <= r.window_start <= 64 and not r.out_of_context for r in rows)


def test_short_file_only_raises(one_second_file):
    with pytest.warns(UserWarning, match="shorter"):
        with pytest.raises(DataError):
            generate_manifest([one_second_file], SplitConfig("train", 5, 200, 32))


def test_out_of_context_rows_are_disjoint(corpus_paths):
    cfg = SplitConfig("validation", 300, 512, 256, seed=2, in_context_prob=0.5)
    rows = generate_manifest(corpus_paths, cfg)
    flags = [r.out_of_context for r in rows]
    assert 0 < sum(flags) < len(rows)
    for r in rows:
        assert r.out_of_context == windows_disjoint(r.context_start, 512, r.window_start, 256)
        if not r.out_of_context:
            assert r.context_start <= r.window_start <= r.context_start + 512 - 256


def test_in_context_fraction(corpus_paths):
    cfg = SplitConfig("train", 2000, 512, 256, seed=9, in_context_prob=0.9)
    rows = generate_manifest(corpus_paths, cfg)
    frac = np.mean([not r.out_of_context for r in rows])
    assert frac == pytest.approx(0.9, abs=0.025)


def test_manifest_determinism_and_format(corpus_paths, tmp_path):
    cfg = SplitConfig("train", 25, 512, 256, seed=4)
    a = generate_manifest(corpus_paths, cfg)
    assert a == generate_manifest(corpus_paths, cfg)
    assert a != generate_manifest(corpus_paths, SplitConfig("train", 25, 512, 256, seed=5))
    text = format_manifest(a)
    assert text.splitlines()[0] == ",".join(MANIFEST_HEADER)
    assert "\r" not in text and text.endswith("\n")
    path = tmp_path / "m.csv"
    write_manifest(a, path)
    assert read_manifest(path) == a


def test_read_manifest_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_manifest(path)


def test_split_config_validation():
    with pytest.raises(ValueError):
        SplitConfig("dev", 1, 10, 5)
    with pytest.raises(ValueError):
        SplitConfig("train", 1, 5, 5)
    with pytest.raises(ValueError):
        SplitConfig("train", 0, 10, 5)


# ---------------------------------------------------------------------------
# materialisation and batching

def test_materialize_shapes_and_label(corpus_paths):
    rows = generate_manifest(corpus_paths, SplitConfig("train", 30, 512, 256, seed=1,
                                                       in_context_prob=0.5))
    for r in rows:
        s = materialize(r, 512, 256)
        assert s.context.frames.shape == (128, 512)
        assert s.window.frames.shape == (128, 256)
        if r.out_of_context:
            assert s.label is None and s.out_of_context
        else:
            assert s.label == r.window_start - r.context_start + 255
            off = r.window_start - r.context_start
            assert np.array_equal(s.window.frames, s.context.frames[:, off:off + 256])


def test_excerpt_clips_and_shifts():
    seq = MidiSequence.from_notes([NoteEvent(60, 0.0, 2.0), NoteEvent(62, 1.5, 0.25),
                                   NoteEvent(64, 3.0, 1.0)])
    out = excerpt(seq, 1.0, 1.0)
    assert [(n.pitch, n.onset, n.duration) for n in out.notes] == [(60, 0.0, 1.0), (62, 0.5, 0.25)]
    assert out.total_duration == 1.0


def _samples(corpus_paths, n=12):
    rows = generate_manifest(corpus_paths, SplitConfig("train", n, 512, 256, seed=3))
    return [materialize(r, 512, 256) for r in rows]


def test_batch_identity_chains(corpus_paths):
    samples = _samples(corpus_paths)
    for chain in ([], [AugmentSpec(k, probability=0.0) for k in ("NoteDelete", "NoteAdd")]):
        out = training_batch(samples, chain, 0)
        for a, b in zip(samples, out):
            assert np.array_equal(a.window.frames, b.window.frames)
            assert a.context is b.context and a.label == b.label


def test_batch_determinism_and_change(corpus_paths):
    samples = _samples(corpus_paths)
    a = training_batch(samples, default_chain(), 7)
    b = training_batch(samples, default_chain(), 7)
    assert all(np.array_equal(x.window.frames, y.window.frames) for x, y in zip(a, b))
    changed = sum(not np.array_equal(x.window.frames, s.window.frames)
                  for x, s in zip(a, samples))
    assert changed > 0
    assert all(x.window.n_frames == 256 for x in a)


def test_batch_passes_through_handmade_samples():
    s = TrainingSample(PianoRoll(np.zeros((128, 4))), PianoRoll(np.ones((128, 2))), 1, False)
    assert training_batch([s], default_chain(), 0)[0] is s


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 5000), st.integers(2, 400), st.integers(1, 200), st.integers(-600, 600))
def test_label_position_law(cs, c_extra, w, offset):
    # window offset o inside [-(w-1), c-1] maps to label o + w - 1, absolute anchor + label
    c = w + c_extra
    k = label_for(cs, cs + offset, c, w)
    if -(w - 1) <= offset <= c - 1:
        assert k == offset + w - 1
        assert cs - (w - 1) + k == cs + offset
    else:
        assert k is None


def test_manifest_row_equality():
    assert ManifestRow("a", 1, 2, False) == ManifestRow("a", 1, 2, False)
