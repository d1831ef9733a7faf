"""
Dual-encoder correlation matcher ("MiniTyke" architecture) in plain numpy.

Two single-layer 1-D convolutional encoders (128 -> e channels, kernel k,
stride 1, zero padding k//2, ReLU) map the score context C (128 x c) and
the performance window W (128 x w) into a latent space. The window latent
is slid over the zero-padded context latent; the resulting c + w - 1 scores
are trained as logits of a categorical distribution over window positions.
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.linalg import toeplitz

from .augment import make_rng
from .dataset import ManifestRow, materialize, training_batch
from .midi_io import DEFAULT_FRAME_DURATION, N_PITCHES, PianoRoll

CHECKPOINT_MAGIC = b"TYKE0001"
PARAM_FIELDS = ("enc_c_weights", "enc_c_bias", "enc_w_weights", "enc_w_bias")
METRIC_FIELDS = ("train_loss", "val_loss", "train_acc", "val_acc", "val_bacc")


@dataclass
class ModelParams:
    enc_c_weights: np.ndarray  # e x 128 x k
    enc_c_bias: np.ndarray  # e
    enc_w_weights: np.ndarray  # e x 128 x k
    enc_w_bias: np.ndarray  # e

    @property
    def e(self) -> int:
        return self.enc_c_weights.shape[0]

    @property
    def k(self) -> int:
        return self.enc_c_weights.shape[2]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def arrays(self) -> List[np.ndarray]:
        return [getattr(self, name) for name in PARAM_FIELDS]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))


def init_params(rng=0, e: int = 64, k: int = 3, n_in: int = N_PITCHES) -> ModelParams:
    """Kernels uniform in +-1/sqrt(n_in * k), biases zero."""
    rng = make_rng(rng)
    bound = 1.0 / math.sqrt(n_in * k)
    return ModelParams(
        rng.uniform(-bound, bound, size=(e, n_in, k)),
        np.zeros(e),
        rng.uniform(-bound, bound, size=(e, n_in, k)),
        np.zeros(e),
    )


def delta_params(k: int = 3, n_in: int = N_PITCHES) -> ModelParams:
    """Identity encoders (e = n_in): the model reduces to raw roll correlation."""
    weights = np.zeros((n_in, n_in, k))
    weights[np.arange(n_in), np.arange(n_in), k // 2] = 1.0
    return ModelParams(weights, np.zeros(n_in), weights.copy(), np.zeros(n_in))


def _as_array(x) -> np.ndarray:
    if isinstance(x, PianoRoll):
        x = x.frames
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# layers

def _pad_time(x: np.ndarray, k: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (k // 2, k - 1 - k // 2)))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Stack the k shifted copies of the padded input: row d*n_in + ch holds tap d."""
    n = x.shape[1]
    xp = _pad_time(x, k)
    return np.concatenate([xp[:, d:d + n] for d in range(k)], axis=0)


def conv1d_forward(x, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """out[i, j] = bias[i] + sum_{ch, d} weights[i, ch, d] * x[ch, j + d - k//2]."""
    x = _as_array(x)
    e, n_in, k = weights.shape
    if x.shape[0] != n_in:
        raise ValueError(f"input has {x.shape[0]} channels, kernels expect {n_in}")
    flat = weights.transpose(0, 2, 1).reshape(e, k * n_in)
    return flat @ _im2col(x, k) + bias[:, None]


def conv1d_backward(x, grad_out: np.ndarray, k: int):
    """Gradients of conv1d_forward w.r.t. (weights, bias) given dL/d(out)."""
    x = _as_array(x)
    n_in = x.shape[0]
    e = grad_out.shape[0]
    grad_flat = grad_out @ _im2col(x, k).T
    grad_w = grad_flat.reshape(e, k, n_in).transpose(0, 2, 1)
    return np.ascontiguousarray(grad_w), grad_out.sum(axis=1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _diagonal_sums(M: np.ndarray) -> np.ndarray:
    """out[k] = sum_j M[j, k + j - (w - 1)] over valid columns, for M of shape w x c."""
    w, c = M.shape
    Mp = np.zeros((w, c + 2 * (w - 1)))
    Mp[:, w - 1:w - 1 + c] = M
    s0, s1 = Mp.strides
    view = as_strided(Mp, shape=(w, c + w - 1), strides=(s0 + s1, s1), writeable=False)
    return view.sum(axis=0)


def cross_correlate(cp: np.ndarray, wp: np.ndarray) -> np.ndarray:
    """P[k] = sum_{i, j} wp[i, j] * cp_pad[i, k + j], cp_pad = cp with w-1 zeros each side.

    Length c + w - 1; index k is the context offset of the window's last
    frame. Computed as one matrix product plus diagonal sums, which keeps
    integer-valued inputs exact (ties stay ties).
    """
    cp = _as_array(cp)
    wp = _as_array(wp)
    if cp.shape[0] != wp.shape[0]:
        raise ValueError(f"channel mismatch: {cp.shape[0]} vs {wp.shape[0]}")
    return _diagonal_sums(wp.T @ cp)


def _correlation_grads(cp: np.ndarray, wp: np.ndarray, grad_P: np.ndarray):
    """(dL/dcp, dL/dwp) for P = cross_correlate(cp, wp)."""
    w = wp.shape[1]
    g = np.asarray(grad_P, dtype=np.float64)
    # P[k] = sum_j wp[:, j] . cp[:, t] with t = k + j - w + 1
    # dwp[:, j] = sum_t cp[:, t] g[t - j + w - 1]
    # dcp[:, t] = sum_j wp[:, j] g[t - j + w - 1]
    T = toeplitz(g[w - 1::-1], g[w - 1:])  # T[j, t] = g[t - j + w - 1], shape w x c
    return wp @ T, cp @ T.T


# ---------------------------------------------------------------------------
# model

@dataclass
class ForwardCache:
    C: np.ndarray
    W: np.ndarray
    zc: np.ndarray  # pre-activation context latent
    zw: np.ndarray
    cp: np.ndarray  # post-ReLU latents
    wp: np.ndarray


def forward(C, W, params: ModelParams, return_cache: bool = False):
    C = _as_array(C)
    W = _as_array(W)
    zc = conv1d_forward(C, params.enc_c_weights, params.enc_c_bias)
    zw = conv1d_forward(W, params.enc_w_weights, params.enc_w_bias)
    cp, wp = relu(zc), relu(zw)
    out = cross_correlate(cp, wp)
    if return_cache:
        return out, ForwardCache(C, W, zc, zw, cp, wp)
    return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x)
    return shifted - np.log(np.sum(np.exp(shifted)))


def loss(P: np.ndarray, label: int) -> float:
    """Categorical cross-entropy of softmax(P) against a one-hot label."""
    P = np.asarray(P, dtype=np.float64)
    if not 0 <= label < P.size:
        raise ValueError(f"label {label} outside [0, {P.size - 1}]")
    return float(-log_softmax(P)[label])


def loss_grad(P: np.ndarray, label: int) -> np.ndarray:
    g = np.exp(log_softmax(P))
    g[label] -= 1.0
    return g


def backward_from_output(cache: ForwardCache, grad_P: np.ndarray, params: ModelParams):
    """Parameter gradients (ModelParams layout) given dL/dP."""
    k = params.k
    grad_cp, grad_wp = _correlation_grads(cache.cp, cache.wp, grad_P)
    grad_zc = grad_cp * (cache.zc > 0)
    grad_zw = grad_wp * (cache.zw > 0)
    gcw, gcb = conv1d_backward(cache.C, grad_zc, k)
    gww, gwb = conv1d_backward(cache.W, grad_zw, k)
    return ModelParams(gcw, gcb, gww, gwb)


def backward(C, W, params: ModelParams, label: int):
    """(loss, gradients) for a single sample."""
    P, cache = forward(C, W, params, return_cache=True)
    return loss(P, label), backward_from_output(cache, loss_grad(P, label), params)


def predict(P) -> int:
    """Arg-max position; ties go to the lowest index."""
    P = np.asarray(P)
    if P.size == 0:
        raise ValueError("empty correlation output")
    return int(np.argmax(P))


def baseline_predict(C, W) -> int:
    """Arg-max of the correlation between the raw binary rolls."""
    return predict(cross_correlate(_as_array(C), _as_array(W)))


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 64
    min_lr: float = 1e-6
    quarter_cycle: int = 10  # epochs
    train_samples: int = 500  # per epoch
    val_samples: int = 50
    c: int = 512
    w: int = 256
    e: int = 64
    k: int = 3
    seed: int = 0
    frame_duration: float = DEFAULT_FRAME_DURATION

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "min_lr", "quarter_cycle",
                     "train_samples", "val_samples", "c", "w", "e", "k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.min_lr > self.lr:
            raise ValueError("min_lr must not exceed lr")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def cosine_lr(epoch: float, cfg: TrainConfig) -> float:
    """Cosine annealing from cfg.lr to cfg.min_lr over 4 quarter cycles, no restarts."""
    period = 4 * cfg.quarter_cycle
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * epoch / period)) / 2


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()])


def adamw_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float,
               cfg: TrainConfig) -> ModelParams:
    """One decoupled-weight-decay Adam update; state is advanced in place."""
    state.step += 1
    t = state.step
    bc1 = 1 - cfg.beta1 ** t
    bc2 = 1 - cfg.beta2 ** t
    new = []
    for i, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
        p = p * (1 - lr * cfg.weight_decay)
        state.m[i] = cfg.beta1 * state.m[i] + (1 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1 - cfg.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new.append(p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
    return ModelParams(*new)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    val_bacc: float
    lr: float = 0.0


@dataclass
class TrainResult:
    params: ModelParams  # best validation accuracy
    history: List[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0


def _accumulate(total: Optional[ModelParams], grads: ModelParams) -> ModelParams:
    if total is None:
        return grads
    return ModelParams(*(a + b for a, b in zip(total.arrays(), grads.arrays())))


def evaluate_samples(samples, params: ModelParams):
    """(mean loss, accuracy, baseline accuracy) over in-context samples."""
    losses, hits, base_hits = [], 0, 0
    for s in samples:
        if s.out_of_context:
            continue
        P = forward(s.context, s.window, params)
        losses.append(loss(P, s.label))
        hits += predict(P) == s.label
        base_hits += baseline_predict(s.context, s.window) == s.label
    n = len(losses)
    if n == 0:
        return float("nan"), float("nan"), float("nan")
    return float(np.mean(losses)), hits / n, base_hits / n


def train(train_rows: Sequence[ManifestRow], val_rows: Sequence[ManifestRow],
          cfg: TrainConfig, chain=(), log=None, init: Optional[ModelParams] = None) -> TrainResult:
    """Mini-batch AdamW training with on-the-fly window augmentation.

    Each epoch visits cfg.train_samples rows: whole shuffled passes over the
    manifest, the last one truncated. Rows seen twice in an epoch get fresh
    augmentations.
    Training accuracy is measured on each batch before its update. The
    validation windows are augmented with a generator reseeded every epoch,
    so every epoch scores the same validation set. Returns the parameters of
    the epoch with the best validation accuracy.
    """
    if not train_rows or not val_rows:
        raise ValueError("training and validation splits must be non-empty")
    rng = make_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(rng, cfg.e, cfg.k)
    state = AdamState.zeros_like(params)
    fd = cfg.frame_duration

    val_base = [materialize(r, cfg.c, cfg.w, fd) for r in val_rows[:cfg.val_samples]]
    result = TrainResult(params.copy())
    best_acc = -1.0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        passes = -(-cfg.train_samples // len(train_rows))
        order = np.concatenate([rng.permutation(len(train_rows))
                                for _ in range(passes)])[:cfg.train_samples]
        losses, hits, seen = [], 0, 0
        for start in range(0, len(order), cfg.batch_size):
            rows = [train_rows[i] for i in order[start:start + cfg.batch_size]]
            batch = [materialize(r, cfg.c, cfg.w, fd) for r in rows]
            batch = training_batch(batch, chain, rng, fd)
            total, count = None, 0
            for s in batch:
                if s.out_of_context:
                    continue
                P, cache = forward(s.context, s.window, params, return_cache=True)
                losses.append(loss(P, s.label))
                hits += predict(P) == s.label
                total = _accumulate(total, backward_from_output(cache, loss_grad(P, s.label), params))
                count += 1
            if count == 0:
                continue
            seen += count
            mean_grads = ModelParams(*(a / count for a in total.arrays()))
            params = adamw_step(params, mean_grads, state, lr, cfg)

        val = training_batch(val_base, chain, make_rng(cfg.seed + 1), fd)
        val_loss, val_acc, val_bacc = evaluate_samples(val, params)
        metrics = EpochMetrics(epoch + 1, float(np.mean(losses)) if losses else float("nan"),
                               val_loss, hits / seen if seen else float("nan"),
                               val_acc, val_bacc, lr)
        result.history.append(metrics)
        if log is not None:
            log(metrics)
        if val_acc > best_acc:
            best_acc = val_acc
            result.params = params.copy()
            result.best_epoch = epoch + 1
    return result


# ---------------------------------------------------------------------------
# persistence

def save_checkpoint(params: ModelParams, path) -> None:
    e, n_in, k = params.enc_c_weights.shape
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", e, n_in, k)]
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    e, n_in, k = struct.unpack("<III", data[8:20])
    shapes = [(e, n_in, k), (e,), (e, n_in, k), (e,)]
    pos = 20
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape))
        chunk = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
        arrays.append(chunk.astype(np.float64).reshape(shape))
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: checkpoint size mismatch")
    return ModelParams(*arrays)


def format_metrics(history: Sequence[EpochMetrics]) -> str:
    lines = ["epoch," + ",".join(METRIC_FIELDS)]
    for m in history:
        lines.append(f"{m.epoch}," + ",".join(f"{getattr(m, f):.6f}" for f in METRIC_FIELDS))
    return "\n".join(lines) + "\n"


def metrics_dict(m: EpochMetrics) -> Dict[str, float]:
    return {f: getattr(m, f) for f in METRIC_FIELDS}
