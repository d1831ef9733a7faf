"""
Offline evaluation of follow traces.

Ground truth comes from an unconstrained DTW between the performance and
score rolls (Hamming column cost). Each post-stabilisation tick is scored by
the distance between its predicted score frame and the frame the warping
path pairs with the newest performance frame at that tick.
"""

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .follower import FollowerConfig, FollowTrace, run_follow, tick_perf_frame
from .midi_io import PianoRoll
from .model import ModelParams

THRESHOLDS_MS = (25, 50, 75, 100, 125, 300, 500, 750, 1000)
REPORT_HEADER = "theta_ms,misalign_rate_pct,mean_err_ms,sd_err_ms"
SWEEP_HEADER = "grid_value,misalign_rate_pct"


@dataclass
class WarpingPath:
    pairs: np.ndarray  # L x 2 of (performance_frame, score_frame)
    cost: int = 0

    @property
    def n_perf(self) -> int:
        return int(self.pairs[-1, 0]) + 1

    @property
    def n_score(self) -> int:
        return int(self.pairs[-1, 1]) + 1


def hamming_costs(perf: PianoRoll, score: PianoRoll) -> np.ndarray:
    """cost[i, j] = number of pitches on in exactly one of perf[:, i], score[:, j]."""
    a = perf.frames.astype(np.int32)
    b = score.frames.astype(np.int32)
    return a.sum(0)[:, None] + b.sum(0)[None, :] - 2 * (a.T @ b)


def dtw_align(perf: PianoRoll, score: PianoRoll) -> WarpingPath:
    """Full DTW with unit steps; ties in backtracking prefer (1,1), then (1,0), then (0,1)."""
    if perf.n_frames == 0 or score.n_frames == 0:
        raise ValueError("DTW needs two non-empty rolls")
    if not math.isclose(perf.frame_duration, score.frame_duration, rel_tol=1e-6):
        raise ValueError("frame durations differ")
    cost = hamming_costs(perf, score)
    n, m = cost.shape
    big = np.iinfo(np.int64).max // 4
    D = np.full((n + 1, m + 1), big, dtype=np.int64)
    D[0, 0] = 0
    # sweep anti-diagonals so each update is one vectorised step
    for d in range(n + m - 1):
        i = np.arange(max(0, d - m + 1), min(n - 1, d) + 1)
        j = d - i
        best = np.minimum(np.minimum(D[i, j], D[i, j + 1]), D[i + 1, j])
        D[i + 1, j + 1] = cost[i, j] + best

    pairs = []
    i, j = n - 1, m - 1
    while True:
        pairs.append((i, j))
        if i == 0 and j == 0:
            break
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = D[i, j], D[i, j + 1], D[i + 1, j]
            if diag <= up and diag <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
    return WarpingPath(np.array(pairs[::-1], dtype=np.int64), int(D[n, m]))


def path_cost(perf: PianoRoll, score: PianoRoll, pairs) -> int:
    cost = hamming_costs(perf, score)
    pairs = np.asarray(pairs)
    return int(cost[pairs[:, 0], pairs[:, 1]].sum())


def ground_truth_positions(path: WarpingPath) -> np.ndarray:
    """Score frame for every performance frame (lower median of its pairs)."""
    out = np.empty(path.n_perf, dtype=np.int64)
    perf = path.pairs[:, 0]
    bounds = np.flatnonzero(np.diff(perf)) + 1
    starts = np.concatenate(([0], bounds))
    stops = np.concatenate((bounds, [len(perf)]))
    for s, e in zip(starts, stops):
        frames = np.sort(path.pairs[s:e, 1])
        out[perf[s]] = frames[(len(frames) - 1) // 2]
    return out


def ground_truth_position(path: WarpingPath, perf_frame: int) -> int:
    if not 0 <= perf_frame < path.n_perf:
        raise IndexError(f"performance frame {perf_frame} outside [0, {path.n_perf})")
    frames = np.sort(path.pairs[path.pairs[:, 0] == perf_frame, 1])
    return int(frames[(len(frames) - 1) // 2])


def alignment_errors(trace: FollowTrace, path: WarpingPath, frame_duration: float,
                     include_stabilizing: bool = False) -> np.ndarray:
    """Per-tick |ground truth - prediction| in milliseconds."""
    truth = ground_truth_positions(path)
    errors = []
    for entry in trace.entries:
        if entry.source == "stabilizing" and not include_stabilizing:
            continue
        frame = tick_perf_frame(entry.sim_time_s, frame_duration)
        if frame < 0:
            continue
        frame = min(frame, len(truth) - 1)
        errors.append(abs(int(truth[frame]) - entry.score_frame) * frame_duration * 1000.0)
    return np.array(errors, dtype=np.float64)


def misalign_rate(errors, theta_ms: float) -> Tuple[float, float, float]:
    """(percentage of errors above theta, mean and SD of the errors at or below it).

    SD is the population standard deviation; both statistics are NaN when no
    error is within theta.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no alignment errors to score")
    if theta_ms <= 0:
        raise ValueError("threshold must be positive")
    aligned = errors[errors <= theta_ms]
    rate = 100.0 * (errors.size - aligned.size) / errors.size
    if aligned.size == 0:
        return rate, float("nan"), float("nan")
    return rate, float(aligned.mean()), float(aligned.std())


def latency_stats(trace: FollowTrace) -> Tuple[float, float]:
    lat = np.array([e.latency_ms for e in trace.entries], dtype=np.float64)
    if lat.size == 0:
        raise ValueError("empty trace")
    return float(lat.mean()), float(lat.std())


@dataclass
class ReportRow:
    theta_ms: float
    misalign_rate_pct: float
    mean_err_ms: float
    sd_err_ms: float


@dataclass
class EvalReport:
    rows: List[ReportRow] = field(default_factory=list)
    latency_mean_ms: float = float("nan")
    latency_sd_ms: float = float("nan")

    def rate_at(self, theta_ms: float) -> float:
        for r in self.rows:
            if r.theta_ms == theta_ms:
                return r.misalign_rate_pct
        raise KeyError(theta_ms)

    def to_csv(self) -> str:
        lines = [REPORT_HEADER]
        for r in self.rows:
            lines.append(f"{r.theta_ms:g},{r.misalign_rate_pct:.4f},{r.mean_err_ms:.4f},{r.sd_err_ms:.4f}")
        lines.append(f"latency,,{self.latency_mean_ms:.4f},{self.latency_sd_ms:.4f}")
        return "\n".join(lines) + "\n"


def report_from_errors(errors, thresholds: Sequence[float] = THRESHOLDS_MS,
                       latency: Optional[Tuple[float, float]] = None) -> EvalReport:
    rows = [ReportRow(float(t), *misalign_rate(errors, t)) for t in thresholds]
    report = EvalReport(rows)
    if latency is not None:
        report.latency_mean_ms, report.latency_sd_ms = latency
    return report


def evaluate(trace: FollowTrace, perf: PianoRoll, score: PianoRoll,
             thresholds: Sequence[float] = THRESHOLDS_MS,
             path: Optional[WarpingPath] = None) -> EvalReport:
    if path is None:
        path = dtw_align(perf, score)
    errors = alignment_errors(trace, path, perf.frame_duration)
    latency = latency_stats(trace) if trace.entries else None
    return report_from_errors(errors, thresholds, latency)


def tempo_rescale(roll: PianoRoll, factor: float) -> PianoRoll:
    """Nearest-neighbour time stretch: output column t copies column floor(t / factor)."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    n = roll.n_frames
    n_out = int(math.floor(n * factor + 0.5))
    src = np.floor(np.arange(n_out) / factor + 1e-9).astype(np.int64)
    src = np.minimum(src, max(n - 1, 0))
    return PianoRoll(roll.frames[:, src], roll.frame_duration)


def sweep(experiment: str, grid: Sequence[float], score: PianoRoll, perf: PianoRoll,
          params: ModelParams, cfg: FollowerConfig, theta_ms: float = 100.0):
    """Misalign rate at theta_ms for each grid value.

    experiment 'tempo_mismatch' stretches the score by each factor before
    following; 'inference_rate' replaces f_e.
    """
    if not grid:
        raise ValueError("empty sweep grid")
    if experiment not in ("tempo_mismatch", "inference_rate"):
        raise ValueError(f"unknown experiment {experiment!r}")
    rows = []
    path = None
    for value in grid:
        if experiment == "tempo_mismatch":
            run_score = tempo_rescale(score, value)
            run_cfg = cfg
            path = dtw_align(perf, run_score)
        else:
            run_score = score
            run_cfg = replace(cfg, f_e=float(value))
            if path is None:
                path = dtw_align(perf, score)
        trace = run_follow(run_score, perf, params, run_cfg)
        errors = alignment_errors(trace, path, perf.frame_duration)
        rate = misalign_rate(errors, theta_ms)[0] if errors.size else float("nan")
        rows.append((float(value), rate))
    return rows


def format_sweep(rows) -> str:
    lines = [SWEEP_HEADER] + [f"{g:g},{r:.4f}" for g, r in rows]
    return "\n".join(lines) + "\n"
