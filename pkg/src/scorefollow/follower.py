"""
Heuristic score following on top of the correlation matcher.

Every tick the matcher scores all positions of the latest performance
window inside a score context. The heuristic layer smooths that output,
collects prominent peaks, and checks them against a linear extrapolation of
recent predictions held in a ring buffer. When no peak is plausible it falls
back to the extrapolation (or its mean with the best peak), but only for a
bounded number of consecutive ticks.
"""

import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.signal import peak_prominences

from .midi_io import DEFAULT_FRAME_DURATION, N_PITCHES, PianoRoll, slice_roll
from .model import ModelParams, forward

SOURCES = ("model", "buffer", "mean", "stabilizing")
TRACE_HEADER = "tick,sim_time_s,wall_latency_ms,score_frame,source"

_TIME_EPS = 1e-9


@dataclass
class FollowerConfig:
    f_e: float = 10.0  # ticks per second
    w: int = 500
    c: int = 1250
    smooth_window: int = 5
    buffer_capacity: int = 20
    stabilization_count: int = 5
    prominence_min: float = 3.0
    lower_bound: int = -48  # frames
    upper_bound: int = 96  # frames
    rate_min: float = 0.5
    rate_max: float = 1.5
    max_consecutive_buffer: int = 5
    frame_duration: float = DEFAULT_FRAME_DURATION
    anchor_ratio: float = 0.6

    def __post_init__(self):
        if not self.c > self.w > 0:
            raise ValueError(f"need c > w > 0, got c={self.c}, w={self.w}")
        if self.buffer_capacity < self.stabilization_count:
            raise ValueError("buffer_capacity must be >= stabilization_count")
        if not self.rate_min < self.rate_max:
            raise ValueError("rate_min must be < rate_max")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be a positive odd number")
        if self.f_e <= 0 or self.frame_duration <= 0:
            raise ValueError("f_e and frame_duration must be positive")

    @property
    def frames_per_tick(self) -> float:
        return 1.0 / (self.f_e * self.frame_duration)


@dataclass
class FollowerState:
    buffer: deque  # (tick_index, score_position)
    consecutive_buffer_uses: int = 0
    last_prediction: Optional[int] = None
    context_anchor: int = 0
    tick: int = 0

    @classmethod
    def initial(cls, cfg: FollowerConfig) -> "FollowerState":
        return cls(deque(maxlen=cfg.buffer_capacity))


@dataclass
class TraceEntry:
    tick: int
    wall_time_s: float
    sim_time_s: float
    score_frame: int
    source: str
    latency_ms: float


@dataclass
class FollowTrace:
    entries: List[TraceEntry] = field(default_factory=list)
    frame_duration: float = DEFAULT_FRAME_DURATION
    f_e: float = 10.0

    def __len__(self):
        return len(self.entries)

    def to_csv(self) -> str:
        lines = [TRACE_HEADER]
        for e in self.entries:
            lines.append(f"{e.tick},{e.sim_time_s:.6f},{e.latency_ms:.4f},{e.score_frame},{e.source}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, frame_duration: float = DEFAULT_FRAME_DURATION,
                 f_e: float = 10.0) -> "FollowTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != TRACE_HEADER:
            raise ValueError("not a follow trace CSV")
        entries = []
        for ln in lines[1:]:
            tick, sim, lat, frame, source = ln.split(",")
            entries.append(TraceEntry(int(tick), float("nan"), float(sim), int(frame),
                                      source.strip(), float(lat)))
        return cls(entries, frame_duration, f_e)


# ---------------------------------------------------------------------------
# building blocks

def smooth(v, window: int = 5) -> np.ndarray:
    """Centred moving average; near the edges only the available samples count."""
    v = np.asarray(v, dtype=np.float64)
    if window % 2 == 0:
        raise ValueError("window must be odd")
    n = v.size
    if n == 0:
        return v.copy()
    half = window // 2
    csum = np.concatenate(([0.0], np.cumsum(v)))
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def local_maxima(v: np.ndarray) -> np.ndarray:
    """Interior samples higher than both neighbours; a flat top reports its left-most sample."""
    v = np.asarray(v, dtype=np.float64)
    if v.size < 3:
        return np.zeros(0, dtype=np.int64)
    starts = np.concatenate(([0], np.flatnonzero(np.diff(v) != 0) + 1))
    vals = v[starts]
    if vals.size < 3:
        return np.zeros(0, dtype=np.int64)
    interior = (vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])
    return starts[1:-1][interior]


def find_peaks(v, prominence_min: float = 3.0) -> List[Tuple[int, float]]:
    """(index, prominence) of local maxima whose prominence reaches prominence_min.

    Prominence is the peak height minus the larger of the two minima found
    walking left and right from the peak until a strictly higher sample or
    the boundary.
    """
    v = np.asarray(v, dtype=np.float64)
    peaks = local_maxima(v)
    if peaks.size == 0:
        return []
    prominences = peak_prominences(v, peaks)[0]
    return [(int(i), float(p)) for i, p in zip(peaks, prominences) if p >= prominence_min]


def regress_extrapolate(buffer) -> Tuple[float, float]:
    """OLS line through (tick, position) pairs; returns (value at next tick, slope)."""
    if len(buffer) < 2:
        raise ValueError("need at least two buffered predictions")
    ticks = np.array([t for t, _ in buffer], dtype=np.float64)
    pos = np.array([p for _, p in buffer], dtype=np.float64)
    tm, pm = ticks.mean(), pos.mean()
    sxx = np.sum((ticks - tm) ** 2)
    slope = np.sum((ticks - tm) * (pos - pm)) / sxx if sxx > 0 else 0.0
    nxt = ticks.max() + 1
    return float(pm + slope * (nxt - tm)), float(slope)


def _candidates(P: np.ndarray, cfg: FollowerConfig) -> List[int]:
    """Peak positions (lag indices) ordered by prominence, best first."""
    smoothed = smooth(P, cfg.smooth_window)
    peaks = find_peaks(smoothed, cfg.prominence_min)
    if peaks:
        peaks.sort(key=lambda ip: (-ip[1], ip[0]))
        positions = [i for i, _ in peaks]
    else:
        positions = [int(np.argmax(smoothed))]
    # the moving average spreads a sharp maximum over the window; snap back to it
    half = cfg.smooth_window // 2
    refined = []
    for i in positions:
        lo, hi = max(0, i - half), min(P.size, i + half + 1)
        refined.append(lo + int(np.argmax(P[lo:hi])))
    return refined


def heuristic_step(state: FollowerState, P, cfg: FollowerConfig,
                   score_length: Optional[int] = None) -> Tuple[int, str]:
    """Choose this tick's score frame from correlation output P; updates state."""
    P = np.asarray(P, dtype=np.float64)
    candidates = [state.context_anchor + k for k in _candidates(P, cfg)]
    best = candidates[0]

    if len(state.buffer) < cfg.stabilization_count:
        position, source = float(best), "stabilizing"
    else:
        buffer_pred, slope = regress_extrapolate(state.buffer)
        last = state.last_prediction
        accepted = None
        for q in candidates:
            if q < last + cfg.lower_bound:
                continue
            if not cfg.lower_bound <= q - buffer_pred <= cfg.upper_bound:
                continue
            # a stalled or backwards trend gives no rate to compare against
            if slope > 1e-9 and not cfg.rate_min <= (q - last) / slope <= cfg.rate_max:
                continue
            accepted = q
            break
        if accepted is not None:
            position, source = float(accepted), "model"
            state.consecutive_buffer_uses = 0
        else:
            state.consecutive_buffer_uses += 1
            mean = (buffer_pred + best) / 2
            if abs(mean - best) <= cfg.upper_bound:
                position, source = mean, "mean"
            else:
                position, source = buffer_pred, "buffer"
            if state.consecutive_buffer_uses > cfg.max_consecutive_buffer:
                position, source = float(best), "model"
                state.consecutive_buffer_uses = 0

    frame = int(math.floor(position + 0.5))
    if score_length is not None:
        frame = min(max(frame, 0), max(score_length - 1, 0))
    state.buffer.append((state.tick, frame))
    state.last_prediction = frame
    state.tick += 1
    return frame, source


def advance_context(state: FollowerState, cfg: FollowerConfig, score_length: int) -> int:
    """Anchor the next context so the last prediction sits anchor_ratio into it."""
    if score_length <= cfg.c or state.last_prediction is None:
        return 0
    anchor = state.last_prediction - int(math.floor(cfg.anchor_ratio * cfg.c))
    return int(min(max(anchor, 0), score_length - cfg.c))


def tick_perf_end(sim_time: float, frame_duration: float) -> int:
    """Number of performance frames available at sim_time."""
    return int(math.floor(sim_time / frame_duration + _TIME_EPS))


def tick_perf_frame(sim_time: float, frame_duration: float) -> int:
    """Index of the newest performance frame at sim_time (-1 before the first)."""
    return tick_perf_end(sim_time, frame_duration) - 1


# ---------------------------------------------------------------------------
# following loop

class Follower:
    """Owns the heuristic state and the score; call step() once per tick."""

    def __init__(self, score: PianoRoll, params: ModelParams, cfg: FollowerConfig):
        self.score = score
        self.params = params
        self.cfg = cfg
        self.state = FollowerState.initial(cfg)

    def step(self, window) -> Tuple[int, str]:
        context = slice_roll(self.score, self.state.context_anchor, self.cfg.c, pad=True)
        P = forward(context, window, self.params)
        frame, source = heuristic_step(self.state, P, self.cfg, self.score.n_frames)
        self.state.context_anchor = advance_context(self.state, self.cfg, self.score.n_frames)
        return frame, source


def run_follow(score: PianoRoll, performance: PianoRoll, params: ModelParams,
               cfg: FollowerConfig, n_ticks: Optional[int] = None,
               clock=time.perf_counter) -> FollowTrace:
    """Simulate real-time following of a recorded performance.

    Tick i (1-based) happens at i / f_e seconds and sees the last w
    performance frames available then, zero-padded before the start. By
    default the run ends with the last tick that fits in the performance.
    """
    if not math.isclose(score.frame_duration, performance.frame_duration, rel_tol=1e-6):
        raise ValueError("score and performance frame durations differ")
    fd = performance.frame_duration
    if n_ticks is None:
        n_ticks = int(math.floor(performance.n_frames * fd * cfg.f_e + _TIME_EPS))
    follower = Follower(score, params, cfg)
    trace = FollowTrace(frame_duration=fd, f_e=cfg.f_e)
    start = clock()
    for i in range(1, n_ticks + 1):
        sim_time = i / cfg.f_e
        end = min(tick_perf_end(sim_time, fd), performance.n_frames)
        window = slice_roll(performance, end - cfg.w, cfg.w, pad=True)
        t0 = clock()
        frame, source = follower.step(window)
        t1 = clock()
        trace.entries.append(TraceEntry(i, t1 - start, sim_time, frame, source, (t1 - t0) * 1e3))
    return trace


class FrameQueue:
    """Bounded, thread-safe store of incoming performance frames.

    A single producer pushes roll columns as they are transcribed; the
    follower thread reads the newest w of them once per tick.
    """

    def __init__(self, capacity: int):
        self._frames = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self.pushed = 0

    def push(self, columns) -> None:
        columns = np.asarray(columns, dtype=np.uint8)
        if columns.ndim == 1:
            columns = columns[:, None]
        with self._lock:
            for j in range(columns.shape[1]):
                self._frames.append(columns[:, j].copy())
            self.pushed += columns.shape[1]

    def latest(self, w: int, frame_duration: float = DEFAULT_FRAME_DURATION) -> PianoRoll:
        with self._lock:
            cols = list(self._frames)[-w:]
        out = np.zeros((N_PITCHES, w), dtype=np.uint8)
        if cols:
            out[:, w - len(cols):] = np.stack(cols, axis=1)
        return PianoRoll(out, frame_duration)
