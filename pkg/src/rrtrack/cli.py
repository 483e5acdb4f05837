"""Command-line surface.

Subcommands: gen-data, train, track, eval, bench. Every command is
deterministic given its --seed and inputs. Exit codes: 0 success,
1 internal/numerical error, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .evaluation import (GroundTruthPlayback, ROBUSTNESS_NOTE, baseline_static,
                         compare, merge_results, ope_evaluate, vot_evaluate)
from .geometry import BoundingBox
from .network import NetworkParams, load_params
from .ppm import read_ppm
from .synthgen import generate_sequence, load_sequence, save_sequence
from .tracker import Tracker, track_sequence
from .trainer import (DirectorySource, SyntheticSource, TrainingDiverged,
                      sequence_config_from, settings_from_config, train)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rrtrack",
                                description="recurrent regression tracker toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic sequence datasets")
    g.add_argument("--config", type=Path, default=None)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--length", type=int, default=32)
    g.add_argument("--seed", type=int, default=None,
                   help="override the config seed")

    t = sub.add_parser("train", help="train a tracker")
    t.add_argument("--config", type=Path, default=None)
    t.add_argument("--data", type=Path, default=None,
                   help="dataset directory; omitted = generate on the fly")
    t.add_argument("--iters", type=int, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--quiet", action="store_true")

    k = sub.add_parser("track", help="run the tracker over a frame directory")
    k.add_argument("--ckpt", type=Path, required=True)
    k.add_argument("--frames-dir", type=Path, required=True)
    k.add_argument("--init-box", required=True, metavar="x1,y1,x2,y2")
    k.add_argument("--out", type=Path, required=True)
    k.add_argument("--reset-interval", type=int, default=32)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", type=Path, default=None)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--mode", choices=("ope", "vot"), default="ope")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--oracle", action="store_true",
                   help="add a ground-truth playback row")
    e.add_argument("--reset-interval", type=int, default=32)
    e.add_argument("--reinit-gap", type=int, default=5)

    b = sub.add_parser("bench", help="measure per-frame tracking latency")
    b.add_argument("--ckpt", type=Path, default=None)
    b.add_argument("--frames", type=int, default=200)
    b.add_argument("--out", type=Path, default=None)
    b.add_argument("--seed", type=int, default=0)
    return p


def _parse_box(text: str) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"--init-box wants x1,y1,x2,y2, got {text!r}")
    try:
        vals = [float(v) for v in parts]
    except ValueError:
        raise UsageError(f"--init-box has non-numeric values: {text!r}") from None
    if vals[0] >= vals[2] or vals[1] >= vals[3]:
        raise UsageError(f"--init-box is degenerate (need x1<x2, y1<y2): {text!r}")
    return BoundingBox(*vals)


def _load_tracker_params(path: Path | None, cfg: dict) -> NetworkParams:
    if path is None:
        # An untrained network: useful for plumbing tests and benchmarks.
        from .trainer import settings_from_config
        settings = settings_from_config(cfg)
        return NetworkParams(settings.net_config, seed=cfg["seed"],
                             dtype=settings.numpy_dtype())
    return load_params(path)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.count < 1 or args.length < 2:
        raise UsageError("--count must be >= 1 and --length >= 2")
    seq_config = sequence_config_from(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seq = generate_sequence(seq_config, args.length, seed=cfg["seed"] + i)
        save_sequence(args.out / f"seq_{i:04d}", seq)
    print(f"wrote {args.count} sequences of {args.length} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    settings = settings_from_config(cfg)
    ad.set_default_dtype(settings.numpy_dtype())
    if args.data is not None:
        source = DirectorySource(args.data)
    else:
        source = SyntheticSource(sequence_config_from(cfg), base_seed=cfg["seed"])
    progress = None
    if not args.quiet:
        def progress(it, total, loss, elapsed):
            print(f"iter {it}/{total} loss {loss:.4f} "
                  f"({elapsed:.1f}s)", flush=True)
    result = train(settings, source, args.iters, out_dir=args.out,
                   progress=progress)
    print(f"finished {args.iters} iterations; checkpoints in {args.out}")
    return EXIT_OK


def _read_frames_dir(frames_dir: Path) -> list:
    if not frames_dir.is_dir():
        raise UsageError(f"not a directory: {frames_dir}")
    files = sorted(frames_dir.glob("*.ppm"))
    if len(files) < 2:
        raise UsageError(f"need at least 2 .ppm frames in {frames_dir}")
    return [read_ppm(f) for f in files]


def cmd_track(args) -> int:
    init_box = _parse_box(args.init_box)
    frames = _read_frames_dir(args.frames_dir)
    params = load_params(args.ckpt)
    boxes = track_sequence(params, frames, init_box,
                           reset_interval=args.reset_interval)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        f.write("frame_index,x1,y1,x2,y2\n")
        for i, b in enumerate(boxes, start=1):
            f.write(f"{i},{b.x1!r},{b.y1!r},{b.x2!r},{b.y2!r}\n")
    print(f"tracked {len(boxes)} frames -> {args.out}")
    return EXIT_OK


def _load_dataset(data_dir: Path) -> list:
    if not data_dir.is_dir():
        raise UsageError(f"not a directory: {data_dir}")
    dirs = sorted(d for d in data_dir.iterdir()
                  if d.is_dir() and (d / "annotations.txt").is_file())
    if not dirs:
        raise UsageError(f"no sequence directories in {data_dir}")
    return [load_sequence(d) for d in dirs]


def cmd_eval(args) -> int:
    cfg = load_config(None)
    sequences = _load_dataset(args.data)
    params = _load_tracker_params(args.ckpt, cfg)
    results = []

    if args.mode == "ope":
        per_seq, base_seq, oracle_seq = [], [], []
        for seq in sequences:
            pred = track_sequence(params, seq.frames, seq.truth[0],
                                  reset_interval=args.reset_interval)
            per_seq.append(ope_evaluate(pred, seq.truth[1:], seq.occluded[1:]))
            base = baseline_static(seq.frames, seq.truth[0])
            base_seq.append(ope_evaluate(base, seq.truth[1:], seq.occluded[1:]))
            if args.oracle:
                oracle_seq.append(ope_evaluate(seq.truth[1:], seq.truth[1:],
                                               seq.occluded[1:]))
        results.append(merge_results(per_seq, "tracker"))
        results.append(merge_results(base_seq, "static_baseline"))
        if args.oracle:
            results.append(merge_results(oracle_seq, "oracle"))
    else:
        per_seq, oracle_seq = [], []
        for seq in sequences:
            tr = Tracker(params, reset_interval=args.reset_interval)
            per_seq.append(vot_evaluate(tr, seq.frames, seq.truth, seq.occluded,
                                        reinit_gap=args.reinit_gap))
            if args.oracle:
                oracle_seq.append(vot_evaluate(GroundTruthPlayback(seq.truth),
                                               seq.frames, seq.truth,
                                               seq.occluded,
                                               reinit_gap=args.reinit_gap))
        results.append(merge_results(per_seq, "tracker"))
        if args.oracle:
            results.append(merge_results(oracle_seq, "oracle"))

    rows = compare(results, out_dir=args.out)
    print(f"# {ROBUSTNESS_NOTE}")
    for row in rows:
        print(",".join(row.values()))
    print(f"reports in {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    cfg = load_config(None)
    params = _load_tracker_params(args.ckpt, cfg)
    seq_config = sequence_config_from(cfg)
    # One long synthetic sequence to step through; generation cost is
    # excluded from the timings.
    seq = generate_sequence(seq_config, args.frames + 1, seed=args.seed)
    tracker = Tracker(params)
    tracker.init(seq.frames[0], seq.truth[0])
    latencies = []
    for t in range(1, args.frames + 1):
        t0 = time.perf_counter()
        tracker.step(seq.frames[t])
        latencies.append((time.perf_counter() - t0) * 1000.0)
    mean_ms = statistics.fmean(latencies)
    median_ms = statistics.median(latencies)
    fps = 1000.0 / mean_ms
    print(f"frames: {args.frames}")
    print(f"mean latency: {mean_ms:.3f} ms")
    print(f"median latency: {median_ms:.3f} ms")
    print(f"fps: {fps:.1f}")
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame_index", "latency_ms"])
            for i, ms in enumerate(latencies, start=1):
                w.writerow([i, repr(ms)])
            w.writerow([])
            w.writerow(["mean_ms", repr(mean_ms)])
            w.writerow(["median_ms", repr(median_ms)])
            w.writerow(["fps", repr(fps)])
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, TrainingDiverged, FloatingPointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
