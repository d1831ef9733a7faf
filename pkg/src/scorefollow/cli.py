"""
Command-line entry point.

    scorefollow corpus | dataset | train | delta-checkpoint | follow | eval |
                sweep | ablate | augment-preview

Exit codes: 0 success, 2 usage or configuration error, 3 data or runtime
error. Every subcommand writes config.txt (flat key=value) to --out-dir.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from . import metrics
from .augment import AugmentSpec, apply_chain, default_chain, load_chain, make_rng
from .corpus import write_corpus
from .dataset import (DataError, SplitConfig, generate_manifest, read_manifest,
                      write_manifest)
from .follower import FollowerConfig, FollowTrace, run_follow
from .midi_io import DEFAULT_FRAME_DURATION, MidiError, PianoRoll, read_midi, render_pgm, to_piano_roll
from .model import (TrainConfig, delta_params, format_metrics, load_checkpoint,
                    save_checkpoint, train)
from .osc import load_remap, stream_trace

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
CONFIG_ECHO = "config.txt"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers

def _float_list(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    return values


def write_config_echo(args: argparse.Namespace, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in sorted(vars(args)):
        if key == "func":
            continue
        value = getattr(args, key)
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path = out_dir / CONFIG_ECHO
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _load_params(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _load_roll(path, fd: float) -> PianoRoll:
    return to_piano_roll(read_midi(path), fd)


def _chain_from_arg(value: str) -> List[AugmentSpec]:
    if value == "default":
        return default_chain()
    if value == "none":
        return []
    return load_chain(value)


def _follower_config(args) -> FollowerConfig:
    return FollowerConfig(f_e=args.fe, w=args.w, c=args.c, frame_duration=args.frame_duration)


def _train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
                       batch_size=args.batch_size, train_samples=args.train_samples,
                       val_samples=args.val_samples, c=args.c, w=args.w, e=args.e, k=args.k,
                       seed=args.seed, frame_duration=args.frame_duration)


def ablation_chains(chain: Sequence[AugmentSpec] = None) -> List[Tuple[str, List[AugmentSpec]]]:
    """Full chain first, then cumulatively drop NoteAdd, NoteDelete, DurationShift,
    OnsetTimeShift and PitchShift. Labels name the augmentation dropped at each row."""
    chain = list(default_chain() if chain is None else chain)
    order = ["NoteAdd", "NoteDelete", "DurationShift", "OnsetTimeShift", "PitchShift"]
    rows = [("all", list(chain))]
    current = list(chain)
    for kind in order:
        current = [s for s in current if s.kind != kind]
        rows.append((f"-{kind}", list(current)))
    return rows


# ---------------------------------------------------------------------------
# subcommands

def cmd_corpus(args) -> int:
    paths = write_corpus(args.out_dir, args.n_pieces, seed=args.seed, duration=args.duration)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_dataset(args) -> int:
    if not args.midi:
        raise DataError("no MIDI files given")
    missing = [p for p in args.midi if not Path(p).is_file()]
    if missing:
        raise DataError(f"missing MIDI file(s): {', '.join(missing)}")
    cfg = SplitConfig(args.split, args.n, args.c, args.w, seed=args.seed,
                      in_context_prob=args.in_context_prob)
    rows = generate_manifest(args.midi, cfg, args.frame_duration)
    out = Path(args.out) if args.out else Path(args.out_dir) / f"{args.split}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(rows, out)
    print(f"{len(rows)} rows -> {out}")
    return EXIT_OK


def _read_manifests(args):
    rows = []
    for path in (args.train_manifest, args.val_manifest):
        if not Path(path).is_file():
            raise DataError(f"missing manifest {path}")
        rows.append(read_manifest(path))
    if not rows[0] or not rows[1]:
        raise DataError("empty manifest")
    return rows


def cmd_train(args) -> int:
    cfg = _train_config(args)
    chain = _chain_from_arg(args.augment)
    train_rows, val_rows = _read_manifests(args)
    out_dir = Path(args.out_dir)

    def report(m):
        print(f"epoch {m.epoch:3d}  train_loss {m.train_loss:.4f}  val_loss {m.val_loss:.4f}  "
              f"train_acc {m.train_acc:.3f}  val_acc {m.val_acc:.3f}  val_bacc {m.val_bacc:.3f}  "
              f"lr {m.lr:.2e}", flush=True)

    result = train(train_rows, val_rows, cfg, chain, log=report)
    save_checkpoint(result.params, out_dir / "model.ckpt")
    (out_dir / "metrics.csv").write_text(format_metrics(result.history), encoding="utf-8")
    print(f"best epoch {result.best_epoch}; checkpoint -> {out_dir / 'model.ckpt'}")
    return EXIT_OK


def cmd_delta_checkpoint(args) -> int:
    out = Path(args.out) if args.out else Path(args.out_dir) / "delta.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(delta_params(args.k), out)
    print(out)
    return EXIT_OK


def cmd_follow(args) -> int:
    cfg = _follower_config(args)
    params = _load_params(args.checkpoint)
    score = _load_roll(args.score, args.frame_duration)
    perf = _load_roll(args.performance, args.frame_duration)
    if args.tempo_factor != 1.0:
        score = metrics.tempo_rescale(score, args.tempo_factor)
    trace = run_follow(score, perf, params, cfg)
    out = Path(args.out_dir) / "trace.csv"
    out.write_text(trace.to_csv(), encoding="utf-8")
    print(f"{len(trace)} ticks -> {out}")
    if args.osc_host:
        remap = load_remap(args.osc_remap) if args.osc_remap else None
        sent = stream_trace(trace, args.osc_host, args.osc_port, remap)
        print(f"{sent} OSC datagrams -> {args.osc_host}:{args.osc_port}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.trace).is_file():
        raise DataError(f"missing trace {args.trace}")
    trace = FollowTrace.from_csv(Path(args.trace).read_text(encoding="utf-8"),
                                 args.frame_duration, args.fe)
    score = _load_roll(args.score, args.frame_duration)
    perf = _load_roll(args.performance, args.frame_duration)
    if args.tempo_factor != 1.0:
        score = metrics.tempo_rescale(score, args.tempo_factor)
    report = metrics.evaluate(trace, perf, score, args.thresholds)
    out = Path(args.out_dir) / "report.csv"
    out.write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.grid:
        raise ConfigError("empty sweep grid")
    params = _load_params(args.checkpoint)
    score = _load_roll(args.score, args.frame_duration)
    perf = _load_roll(args.performance, args.frame_duration)
    rows = metrics.sweep(args.experiment, args.grid, score, perf, params,
                         _follower_config(args), theta_ms=args.theta)
    text = metrics.format_sweep(rows)
    (Path(args.out_dir) / "sweep.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def run_ablation(train_rows, val_rows, pairs, train_cfg: TrainConfig,
                 follow_cfg: FollowerConfig, thresholds, n_variants: int = 6, log_fn=None):
    """Train and evaluate each ablation variant; returns [(label, EvalReport)].

    pairs is a list of (score, performance) rolls; errors and latencies are
    pooled over all pairs.
    """
    variants = ablation_chains()
    if not 1 <= n_variants <= len(variants):
        raise ConfigError(f"variants must be in 1..{len(variants)}")
    paths = [metrics.dtw_align(perf, score) for score, perf in pairs]
    out = []
    for label, chain in variants[:n_variants]:
        result = train(train_rows, val_rows, train_cfg, chain)
        errors, latencies = [], []
        for (score, perf), path in zip(pairs, paths):
            trace = run_follow(score, perf, result.params, follow_cfg)
            errors.append(metrics.alignment_errors(trace, path, perf.frame_duration))
            latencies.extend(e.latency_ms for e in trace.entries)
        lat = np.asarray(latencies)
        report = metrics.report_from_errors(np.concatenate(errors), thresholds,
                                            (float(lat.mean()), float(lat.std())))
        if log_fn:
            log_fn(label, report)
        out.append((label, report))
    return out


def format_ablation(rows) -> str:
    lines = ["variant," + metrics.REPORT_HEADER]
    for label, report in rows:
        body = report.to_csv().splitlines()[1:]
        lines.extend(f"{label},{line}" for line in body)
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    if args.variants < 1:
        raise ConfigError("need at least one ablation variant")
    if len(args.score) != len(args.performance):
        raise ConfigError("--score and --performance must be given the same number of times")
    train_rows, val_rows = _read_manifests(args)
    pairs = [(_load_roll(s, args.frame_duration), _load_roll(p, args.frame_duration))
             for s, p in zip(args.score, args.performance)]
    follow_cfg = FollowerConfig(f_e=args.fe, w=args.follow_w, c=args.follow_c,
                                frame_duration=args.frame_duration)

    def report(label, r):
        print(f"{label}: misalign rate {r.rows[0].misalign_rate_pct:.2f}% "
              f"at {r.rows[0].theta_ms:g} ms", flush=True)

    rows = run_ablation(train_rows, val_rows, pairs, _train_config(args), follow_cfg,
                        args.thresholds, args.variants, log_fn=report)
    text = format_ablation(rows)
    (Path(args.out_dir) / "ablation.csv").write_text(text, encoding="utf-8")
    return EXIT_OK


def side_by_side(left: PianoRoll, right: PianoRoll, gap: int = 4) -> PianoRoll:
    sep = np.zeros((left.frames.shape[0], gap), dtype=np.uint8)
    return PianoRoll(np.concatenate([left.frames, sep, right.frames], axis=1), left.frame_duration)


def cmd_augment_preview(args) -> int:
    seq = read_midi(args.midi)
    chain = _chain_from_arg(args.chain)
    augmented = apply_chain(seq, chain, make_rng(args.seed))
    n = max(to_piano_roll(seq, args.frame_duration).n_frames,
            to_piano_roll(augmented, args.frame_duration).n_frames)
    original_roll = to_piano_roll(seq, args.frame_duration, n_frames=n)
    augmented_roll = to_piano_roll(augmented, args.frame_duration, n_frames=n)
    out_dir = Path(args.out_dir)
    (out_dir / "original.pgm").write_bytes(render_pgm(original_roll))
    (out_dir / "augmented.pgm").write_bytes(render_pgm(augmented_roll))
    (out_dir / "side_by_side.pgm").write_bytes(render_pgm(side_by_side(original_roll, augmented_roll)))
    print(f"{len(seq.notes)} -> {len(augmented.notes)} notes; images in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame-duration", type=float, default=DEFAULT_FRAME_DURATION)
    p.add_argument("--out-dir", default=".")


def _model_flags(p, c=512, w=256):
    p.add_argument("--c", type=int, default=c, help="context length in frames")
    p.add_argument("--w", type=int, default=w, help="window length in frames")


def _train_flags(p):
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--train-samples", type=int, default=500)
    p.add_argument("--val-samples", type=int, default=50)
    p.add_argument("--e", type=int, default=64, help="latent channels")
    p.add_argument("--k", type=int, default=3, help="kernel size")


def _follow_flags(p):
    _model_flags(p, c=1250, w=500)
    p.add_argument("--fe", type=float, default=10.0, help="inference rate in Hz")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scorefollow", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="write synthetic MIDI pieces")
    _common(p)
    p.add_argument("--n-pieces", type=int, default=24)
    p.add_argument("--duration", type=float, default=30.0)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("dataset", help="generate a (context, window) manifest")
    _common(p)
    _model_flags(p)
    p.add_argument("midi", nargs="*")
    p.add_argument("--split", choices=("train", "validation", "test"), default="train")
    p.add_argument("--n", type=int, default=500, help="rows to draw")
    p.add_argument("--in-context-prob", type=float, default=0.9)
    p.add_argument("--out", help="manifest path (default OUT_DIR/SPLIT.csv)")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the window/context encoders")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--augment", default="default",
                   help="'default', 'none', or an INI chain config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("delta-checkpoint", help="write an identity-encoder checkpoint")
    _common(p)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_delta_checkpoint)

    p = sub.add_parser("follow", help="simulate following a performance")
    _common(p)
    _follow_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--score", required=True)
    p.add_argument("--performance", required=True)
    p.add_argument("--tempo-factor", type=float, default=1.0)
    p.add_argument("--osc-host")
    p.add_argument("--osc-port", type=int, default=9000)
    p.add_argument("--osc-remap", help="address remap file")
    p.set_defaults(func=cmd_follow)

    p = sub.add_parser("eval", help="score a follow trace against DTW ground truth")
    _common(p)
    p.add_argument("--fe", type=float, default=10.0)
    p.add_argument("--trace", required=True)
    p.add_argument("--score", required=True)
    p.add_argument("--performance", required=True)
    p.add_argument("--tempo-factor", type=float, default=1.0)
    p.add_argument("--thresholds", type=_float_list, default=list(metrics.THRESHOLDS_MS))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="tempo-mismatch or inference-rate sweep")
    _common(p)
    _follow_flags(p)
    p.add_argument("--experiment", choices=("tempo_mismatch", "inference_rate"), required=True)
    p.add_argument("--grid", type=_float_list, required=True)
    p.add_argument("--theta", type=float, default=100.0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--score", required=True)
    p.add_argument("--performance", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train and evaluate the augmentation ablation")
    _common(p)
    _train_flags(p)
    p.add_argument("--c", type=int, default=512, help="training context length")
    p.add_argument("--w", type=int, default=256, help="training window length")
    p.add_argument("--follow-c", type=int, default=1250)
    p.add_argument("--follow-w", type=int, default=500)
    p.add_argument("--fe", type=float, default=10.0)
    p.add_argument("--variants", type=int, default=6)
    p.add_argument("--score", action="append", default=[])
    p.add_argument("--performance", action="append", default=[])
    p.add_argument("--thresholds", type=_float_list, default=list(metrics.THRESHOLDS_MS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("augment-preview", help="render a MIDI file before and after augmentation")
    _common(p)
    p.add_argument("midi")
    p.add_argument("--chain", default="default", help="'default', 'none', or an INI chain config")
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        write_config_echo(args, Path(args.out_dir))
        return args.func(args)
    except (DataError, MidiError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
