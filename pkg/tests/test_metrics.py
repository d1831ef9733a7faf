import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scorefollow.follower import FollowerConfig, FollowTrace, TraceEntry
from scorefollow.metrics import (REPORT_HEADER, THRESHOLDS_MS, WarpingPath, alignment_errors,
                                 dtw_align, evaluate, format_sweep, ground_truth_position,
                                 ground_truth_positions, hamming_costs, latency_stats,
                                 misalign_rate, path_cost, report_from_errors, sweep,
                                 tempo_rescale)
from scorefollow.midi_io import PianoRoll
from scorefollow.model import delta_params

FD = 1.0 / 96


def roll(cols, n_pitch=128):
    frames = np.zeros((n_pitch, len(cols)), np.uint8)
    for j, pitches in enumerate(cols):
        frames[list(pitches), j] = 1
    return PianoRoll(frames, FD)


def all_paths(n, m):
    """Every monotone path from (0, 0) to (n - 1, m - 1) with unit steps."""
    def rec(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                for rest in rec(i + di, j + dj):
                    yield [(i, j)] + rest
    return rec(0, 0)


def entry(tick, sim, frame, source="model", latency=1.0):
    return TraceEntry(tick, 0.0, sim, frame, source, latency)


# ---------------------------------------------------------------------------
# DTW

def test_hamming_costs_example():
    a = roll([{60}, {60, 64}])
    b = roll([{60}, {62}, set()])
    assert hamming_costs(a, b).tolist() == [[0, 2, 1], [1, 3, 2]]


def test_dtw_matches_exhaustive_search(rng):
    for _ in range(25):
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        a = PianoRoll((rng.random((128, n)) < 0.02).astype(np.uint8), FD)
        b = PianoRoll((rng.random((128, m)) < 0.02).astype(np.uint8), FD)
        best = min(path_cost(a, b, p) for p in all_paths(n, m))
        path = dtw_align(a, b)
        assert path.cost == best == path_cost(a, b, path.pairs)


def test_dtw_identity_is_diagonal(piece_roll):
    part = PianoRoll(piece_roll.frames[:, :200], FD)
    path = dtw_align(part, part)
    assert path.cost == 0
    assert np.array_equal(path.pairs, np.stack([np.arange(200)] * 2, axis=1))


def test_dtw_duplicated_columns_maps_to_half():
    # every score column played twice: performance frame i sits at score frame i // 2.
    # Neighbouring score columns all differ, so the zero-cost path is unique.
    score = roll([{j % 100, 110 + j % 7} for j in range(150)])
    perf = PianoRoll(np.repeat(score.frames, 2, axis=1), FD)
    path = dtw_align(perf, score)
    assert path.cost == 0
    assert ground_truth_positions(path).tolist() == [i // 2 for i in range(300)]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 25), st.integers(1, 25), st.integers(0, 2**32))
def test_path_validity(n, m, seed):
    r = np.random.default_rng(seed)
    a = PianoRoll((r.random((128, n)) < 0.05).astype(np.uint8), FD)
    b = PianoRoll((r.random((128, m)) < 0.05).astype(np.uint8), FD)
    p = dtw_align(a, b).pairs
    assert tuple(p[0]) == (0, 0) and tuple(p[-1]) == (n - 1, m - 1)
    steps = np.diff(p, axis=0)
    assert {tuple(s) for s in steps} <= {(1, 1), (1, 0), (0, 1)}


def test_dtw_rejects_empty():
    with pytest.raises(ValueError):
        dtw_align(roll([]), roll([{1}]))


def test_ground_truth_lower_median():
    path = WarpingPath(np.array([(0, 0), (0, 1), (1, 2), (1, 3), (1, 4), (1, 5), (2, 6)]))
    assert ground_truth_positions(path).tolist() == [0, 3, 6]
    assert ground_truth_position(path, 1) == 3
    with pytest.raises(IndexError):
        ground_truth_position(path, 3)


# ---------------------------------------------------------------------------
# errors and rates

def diagonal(n):
    return WarpingPath(np.stack([np.arange(n)] * 2, axis=1))


def test_alignment_errors_skip_stabilizing_and_clamp():
    trace = FollowTrace([entry(1, 0.1, 8, "stabilizing"), entry(2, 0.2, 20),
                         entry(3, 10.0, 50)], FD)
    errs = alignment_errors(trace, diagonal(60), FD)
    # tick 2 sees perf frame 18; tick 3 is past the end and clamps to 59
    assert errs == pytest.approx([2 * FD * 1000, 9 * FD * 1000])
    assert len(alignment_errors(trace, diagonal(60), FD, include_stabilizing=True)) == 3


def test_misalign_rate_example():
    rate, mu, sd = misalign_rate([10.0, 30.0, 60.0], 25)
    assert rate == pytest.approx(200 / 3) and mu == 10.0 and sd == 0.0
    rate, mu, sd = misalign_rate([10.0, 30.0, 60.0], 60)
    assert rate == 0.0 and mu == pytest.approx(100 / 3)
    assert sd == pytest.approx(np.sqrt(np.mean((np.array([10, 30, 60]) - 100 / 3) ** 2)))


def test_misalign_rate_edges():
    rate, mu, sd = misalign_rate([500.0], 100)
    assert rate == 100.0 and math.isnan(mu) and math.isnan(sd)
    assert misalign_rate([100.0], 100)[0] == 0.0  # boundary counts as aligned
    with pytest.raises(ValueError):
        misalign_rate([], 100)
    with pytest.raises(ValueError):
        misalign_rate([1.0], 0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 2000), min_size=1, max_size=50))
def test_rate_monotone_in_threshold(errors):
    rates = [misalign_rate(errors, t)[0] for t in THRESHOLDS_MS]
    assert all(0 <= r <= 100 for r in rates)
    assert rates == sorted(rates, reverse=True)


def test_latency_stats():
    trace = FollowTrace([entry(1, 0.1, 0, latency=10), entry(2, 0.2, 0, latency=20)])
    assert latency_stats(trace) == (15.0, 5.0)
    assert latency_stats(FollowTrace([entry(1, 0.1, 0, latency=7)])) == (7.0, 0.0)
    with pytest.raises(ValueError):
        latency_stats(FollowTrace())


def test_report_csv():
    report = report_from_errors([10.0, 30.0, 60.0], (25, 100), latency=(2.0, 0.5))
    lines = report.to_csv().splitlines()
    assert lines[0] == REPORT_HEADER
    assert lines[1] == "25,66.6667,10.0000,0.0000"
    assert lines[2] == "100,0.0000,33.3333,20.5480"
    assert lines[3] == "latency,,2.0000,0.5000"
    assert report.rate_at(100) == 0.0


def test_evaluate_perfect_trace(piece_roll):
    n = 300
    perf = PianoRoll(piece_roll.frames[:, :n], FD)
    entries = [entry(i, i / 10, int(math.floor(i / 10 / FD + 1e-9)) - 1) for i in range(1, 31)]
    report = evaluate(FollowTrace(entries, FD), perf, perf)
    assert all(r.misalign_rate_pct == 0.0 for r in report.rows)
    assert report.latency_mean_ms == 1.0


# ---------------------------------------------------------------------------
# tempo rescale and sweeps

def test_tempo_rescale_examples():
    r = roll([{1}, {2}, {3}, {4}])
    assert tempo_rescale(r, 1.0) == r
    doubled = tempo_rescale(r, 2.0)
    assert [int(np.flatnonzero(doubled.frames[:, j])[0]) for j in range(8)] == [1, 1, 2, 2, 3, 3, 4, 4]
    half = tempo_rescale(r, 0.5)
    assert [int(np.flatnonzero(half.frames[:, j])[0]) for j in range(2)] == [1, 3]
    assert tempo_rescale(r, 1.2).n_frames == 5
    with pytest.raises(ValueError):
        tempo_rescale(r, 0)


def test_sweep_rows_and_errors(piece_roll):
    cfg = FollowerConfig(c=400, w=150)
    part = PianoRoll(piece_roll.frames[:, :960], FD)
    rows = sweep("tempo_mismatch", [1.0], part, part, delta_params(), cfg)
    assert rows[0][0] == 1.0 and rows[0][1] < 10
    rows = sweep("inference_rate", [5.0, 10.0], part, part, delta_params(), cfg)
    assert [g for g, _ in rows] == [5.0, 10.0]
    assert format_sweep(rows).splitlines()[0] == "grid_value,misalign_rate_pct"
    with pytest.raises(ValueError):
        sweep("tempo_mismatch", [], part, part, delta_params(), cfg)
    with pytest.raises(ValueError):
        sweep("loudness", [1.0], part, part, delta_params(), cfg)
