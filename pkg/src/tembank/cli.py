"""Command-line surface: track, eval, fit, synth, augment, gradcheck.

Every subcommand that owns an output location drops a `manifest.json` there,
success or failure, recording the effective flags, frame counts, wall time
and any error. Exit codes: 0 success, 2 for usage or unusable input, 1 for
everything that breaks at runtime.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .augment import TrainingSequence, maybe_augment
from .evalio import (
    MetricsReport,
    SynthSceneConfig,
    _indexed,
    evaluate_masks,
    load_sequence,
    read_frame,
    read_mask,
    save_masks,
    save_sequence,
    synth_sequence,
)
from .grid import InvalidInputError, LabelMask, ShapeMismatchError
from .learn import (
    TrainableParams,
    TrainingError,
    finite_diff_report,
    fit,
    load_params,
    save_params,
)
from .tracker import EmbedderConfig, TrackerConfig, track_sequence

USAGE_ERROR = 2
RUNTIME_ERROR = 1

_USAGE_EXCEPTIONS = (InvalidInputError, ShapeMismatchError, FileNotFoundError, NotADirectoryError)


def _write_manifest(outdir, doc) -> None:
    """Best-effort manifest drop; never masks the original failure."""
    if outdir is None:
        return
    try:
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "manifest.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError:
        pass


def _run_with_manifest(args, outdir, work) -> int:
    """Execute one subcommand body, always leaving a manifest behind.

    `work(manifest_dict)` fills in command-specific fields and may raise;
    the manifest records flags, wall time and the error either way.
    """
    doc = {
        "subcommand": args.command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "func")},
        "error": None,
    }
    start = time.perf_counter()
    try:
        work(doc)
        return 0
    except _USAGE_EXCEPTIONS as exc:
        doc["error"] = str(exc)
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (TrainingError, RuntimeError, ValueError, OSError) as exc:
        doc["error"] = str(exc)
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    finally:
        doc["wall_time_s"] = round(time.perf_counter() - start, 6)
        _write_manifest(outdir, doc)


def _frames_dir(path) -> str:
    nested = os.path.join(path, "frames")
    return nested if os.path.isdir(nested) else path


def _masks_dir(path) -> str:
    nested = os.path.join(path, "masks")
    return nested if os.path.isdir(nested) else path


def _tracker_config(args) -> tuple:
    """(TrackerConfig, params_source) from an optional params file."""
    if getattr(args, "params", None):
        if not os.path.isfile(args.params):
            raise InvalidInputError(f"params file not found: {args.params}")
        params, embedder = load_params(args.params)
        return params.apply_to(TrackerConfig(embedder=embedder)), args.params
    embedder = EmbedderConfig(feature_dim=args.feature_dim, stride=args.stride)
    return TrackerConfig(embedder=embedder), "builtin-defaults"


# ---------------------------------------------------------------------------
# subcommands


def cmd_track(args) -> int:
    def work(doc):
        if not os.path.isfile(args.init_mask):
            raise InvalidInputError(f"init mask not found: {args.init_mask}")
        cfg, source = _tracker_config(args)
        doc["params_source"] = source
        frame_paths = _indexed(_frames_dir(args.frames), (".ppm", ".png"))
        frames = [read_frame(p) for p in frame_paths]
        init = read_mask(args.init_mask)
        preds = track_sequence(frames, init, cfg)
        save_masks(args.out, preds, fmt="pgm")
        doc["frame_count"] = len(frames)
        doc["object_ids"] = [int(k) for k in init.object_ids]

    return _run_with_manifest(args, args.out, work)


def cmd_eval(args) -> int:
    def work(doc):
        pred_paths = _indexed(_masks_dir(args.pred), (".pgm", ".png"))
        gt_paths = _indexed(_masks_dir(args.gt), (".pgm", ".png"))
        if len(pred_paths) != len(gt_paths):
            raise InvalidInputError(
                f"{len(pred_paths)} predicted masks vs {len(gt_paths)} references"
            )
        preds = [read_mask(p) for p in pred_paths]
        gts = [read_mask(p) for p in gt_paths]
        name = os.path.basename(os.path.normpath(args.pred))
        score = evaluate_masks(preds, gts, name=name, tolerance_px=args.tolerance)
        report = MetricsReport(per_sequence=(score,))
        print(report.to_json())
        doc["frame_count"] = len(preds)
        doc["mean"] = report.mean()

    return _run_with_manifest(args, None, work)


def cmd_fit(args) -> int:
    outdir = os.path.dirname(os.path.abspath(args.out)) or "."

    def work(doc):
        if not os.path.isdir(args.data):
            raise InvalidInputError(f"data directory not found: {args.data}")
        roots = sorted(
            os.path.join(args.data, d)
            for d in os.listdir(args.data)
            if os.path.isdir(os.path.join(args.data, d, "frames"))
        )
        if os.path.isdir(os.path.join(args.data, "frames")):
            roots = [args.data]
        if not roots:
            raise InvalidInputError(f"no sequence directories under {args.data}")
        dataset = [load_sequence(r) for r in roots]
        cfg = TrackerConfig(
            embedder=EmbedderConfig(feature_dim=args.feature_dim, stride=args.stride)
        )
        if args.epochs > 0:
            params, history = fit(
                dataset,
                epochs=args.epochs,
                cfg=cfg,
                augment_probability=args.augment_prob,
                rng_seed=args.seed,
                batch_size=args.batch_size,
                steps_per_epoch=args.steps_per_epoch,
                crop=args.crop,
                frames_per_clip=args.frames_per_clip,
                min_fg_pixels=args.min_fg_pixels,
                lr=args.lr,
            )
        else:
            params, history = TrainableParams.from_config(cfg), []
        os.makedirs(outdir, exist_ok=True)
        save_params(args.out, params, cfg.embedder)
        doc["sequence_count"] = len(dataset)
        doc["loss_history"] = history

    return _run_with_manifest(args, outdir, work)


def cmd_synth(args) -> int:
    def work(doc):
        cfg = SynthSceneConfig(
            frames=args.frames,
            height=args.size,
            width=args.size,
            objects=args.objects,
            distractors=args.distractors,
            motion=args.motion,
            target_motion=args.target_motion,
            object_cells=args.object_cells,
            seed=args.seed,
        )
        seq = synth_sequence(cfg)
        save_sequence(args.out, seq)
        doc["frame_count"] = len(seq)
        doc["object_ids"] = [int(k) for k in seq.object_ids]

    return _run_with_manifest(args, args.out, work)


def cmd_augment(args) -> int:
    def work(doc):
        a = load_sequence(args.seq_a)
        b = load_sequence(args.seq_b)
        a2, b2 = maybe_augment(a, b, args.prob, args.seed)
        save_sequence(os.path.join(args.out, "a"), a2)
        save_sequence(os.path.join(args.out, "b"), b2)
        doc["frame_count"] = len(a2)
        doc["augmented"] = bool(a2 is not a)

    return _run_with_manifest(args, args.out, work)


def cmd_gradcheck(args) -> int:
    def work(doc):
        cfg, source = _tracker_config(args)
        doc["params_source"] = source
        params = TrainableParams.from_config(cfg)
        rng = np.random.default_rng(args.seed)
        batch = [
            synth_sequence(
                SynthSceneConfig(
                    frames=3,
                    height=32,
                    width=32,
                    seed=int(rng.integers(0, 2**31)),
                    distractors=1,
                    motion=1,
                    object_cells=2,
                )
            )
            for _ in range(2)
        ]
        report = finite_diff_report(params, batch, cfg)
        worst = max(float(np.max(v)) for v in report.values())
        doc["worst_relative_error"] = worst
        print(
            json.dumps(
                {
                    "per_param": {k: float(np.max(v)) for k, v in sorted(report.items())},
                    "worst_relative_error": worst,
                    "ok": worst <= args.tolerance,
                },
                indent=2,
                sort_keys=True,
            )
        )
        if worst > args.tolerance:
            raise TrainingError(f"gradient check failed: worst relative error {worst:.3e}")

    return _run_with_manifest(args, None, work)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tembank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_embedder_flags(p):
        p.add_argument("--feature-dim", type=int, default=32, dest="feature_dim")
        p.add_argument("--stride", type=int, default=4)

    p = sub.add_parser("track", help="propagate a first-frame annotation")
    p.add_argument("--frames", required=True, help="frame directory (or sequence root)")
    p.add_argument("--init-mask", required=True, dest="init_mask")
    p.add_argument("--out", required=True)
    p.add_argument("--params", default=None, help="trained params JSON")
    p.add_argument("--seed", type=int, default=0)
    add_embedder_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predicted masks against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tolerance", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit", help="train the scalar parameters")
    p.add_argument("--data", required=True, help="directory of sequence directories")
    p.add_argument("--out", required=True, help="output params JSON")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--augment-prob", type=float, default=0.2, dest="augment_prob")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=2, dest="batch_size")
    p.add_argument("--steps-per-epoch", type=int, default=10, dest="steps_per_epoch")
    p.add_argument("--crop", type=int, default=96)
    p.add_argument("--frames-per-clip", type=int, default=6, dest="frames_per_clip")
    p.add_argument("--min-fg-pixels", type=int, default=100, dest="min_fg_pixels")
    add_embedder_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synth", help="render a bouncing-squares sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--motion", type=int, default=1)
    p.add_argument("--target-motion", type=int, default=-1, dest="target_motion")
    p.add_argument("--object-cells", type=int, default=4, dest="object_cells")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="swap-and-attach two sequences")
    p.add_argument("--seq-a", required=True, dest="seq_a")
    p.add_argument("--seq-b", required=True, dest="seq_b")
    p.add_argument("--out", required=True)
    p.add_argument("--prob", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the tape")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--params", default=None, help="trained params JSON")
    add_embedder_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def entrypoint(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(entrypoint())
