"""Command-line entry point: ``c3dvqa <command> ...``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, gradcheck, maps, plotting
from .data import load_manifest, load_raw_video, make_clip, make_split
from .model import C3DVQA, predict_video
from .train import (
    PRESETS,
    RunConfig,
    TrainingDiverged,
    evaluate_protocol,
    model_scorer,
    psnr_scorer,
    sweep_csv,
    sweep_frames,
    train_model,
    training_scorer_factory,
)

log = logging.getLogger("c3dvqa")

# flag name -> RunConfig field
OVERRIDES = {
    "manifest": str,
    "frames": int,
    "patch": int,
    "fc_hidden": int,
    "variant": str,
    "lr": float,
    "epochs": int,
    "batch_size": int,
    "lambda1": float,
    "lambda2": float,
    "seed": int,
    "repeats": int,
    "train_fraction": float,
    "output_dir": str,
    "threads": int,
}


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags below override it")
    p.add_argument("--preset", choices=sorted(PRESETS), help="learning-rate preset")
    for name, typ in OVERRIDES.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def _run_config(args) -> RunConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    if args.preset:
        base["preset"] = args.preset
    for name in OVERRIDES:
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    cfg = RunConfig.from_dict(base)
    if not cfg.manifest:
        raise SystemExit("error: no manifest given (config key 'manifest' or --manifest)")
    if not Path(cfg.manifest).is_file():
        raise SystemExit(f"error: manifest {cfg.manifest} not found")
    return cfg


@contextlib.contextmanager
def _threads(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _load_model(path, patch=112, frames=None) -> C3DVQA:
    return C3DVQA.from_state_dict(checkpoint.load(path), patch=patch, frames=frames)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(cfg.manifest)
    if args.all:
        entries, split = manifest.distorted, None
    else:
        split = make_split(manifest, cfg.train_fraction, seed=cfg.seed)
        entries = manifest.distorted_of(split.train)
    with _threads(cfg.threads):
        try:
            model, tlog = train_model(manifest, entries, cfg)
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return 2
    checkpoint.save(out / "checkpoint.bin", model.state_dict())
    (out / "train_log.csv").write_text(tlog.to_csv())
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    if split is not None:
        (out / "split.json").write_text(json.dumps(split.to_dict(), indent=2))
    plotting.plot_training_log(tlog, out / "train_loss.png")
    best = tlog.rows[tlog.best_epoch]
    print(f"trained {len(tlog.rows)} epochs; best epoch {best.epoch} loss {best.loss:.6g}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(cfg.manifest)
    with _threads(cfg.threads):
        if args.scorer == "psnr":
            report = evaluate_protocol(manifest, cfg, lambda plan, r: psnr_scorer)
        elif args.checkpoint:
            model = _load_model(args.checkpoint, cfg.patch, cfg.frames)
            if model.cfg.variant != cfg.variant:
                log.info("checkpoint variant %s overrides config", model.cfg.variant)
            scorer = model_scorer(model)
            report = evaluate_protocol(manifest, cfg, lambda plan, r: scorer)
        else:
            logs: list = []
            report = evaluate_protocol(manifest, cfg, training_scorer_factory(manifest, cfg, logs))
            for i, tl in enumerate(logs):
                (out / f"train_log_run{i}.csv").write_text(tl.to_csv())
    stem = out / "eval_report"
    report.write(stem)
    plotting.plot_eval_scatter(report.runs[0], out / "eval_scatter_run0.png")
    print(report.to_csv(), end="")
    print(f"median PLCC {report.median_plcc:.4f}  median SROCC {report.median_srocc:.4f}")
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint, args.window, args.frames)
    ref = load_raw_video(args.ref)
    dist = load_raw_video(args.dist)
    with _threads(args.threads):
        score, segments = predict_video(model, ref, dist, args.window)
    if args.json:
        print(json.dumps({"segments": [float(s) for s in segments], "score": score}))
    else:
        for i, s in enumerate(segments):
            print(f"segment {i}: {s:.6f}")
        print(f"score: {score:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck.run_all(args.seed)
    print(gradcheck.format_table(rows))
    return 0 if all(r.passed for r in rows) else 1


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(cfg.manifest)
    frame_list = [int(x) for x in args.frames_list.split(",") if x.strip()]
    curves: dict = {}
    with _threads(cfg.threads):
        rows = sweep_frames(manifest, cfg, frame_list, curves)
    text = sweep_csv(rows)
    (out / "sweep.csv").write_text(text)
    (out / "sweep.json").write_text(json.dumps({
        "rows": [r.__dict__ for r in rows],
        "srocc_curves": {str(k): v for k, v in curves.items()},
    }, indent=2))
    plotting.plot_sweep(rows, curves, out / "sweep.png")
    print(text, end="")
    for r in rows:
        if r.error:
            print(f"D={r.frames} failed: {r.error}", file=sys.stderr)
    return 0


def cmd_dump_maps(args) -> int:
    model = _load_model(args.checkpoint, args.window, args.frames)
    ref = load_raw_video(args.ref)
    dist = load_raw_video(args.dist)
    D = model.cfg.frames
    if args.offset + D > dist.frames or args.row + args.window > dist.height or args.col + args.window > dist.width:
        raise SystemExit("error: requested clip lies outside the video")
    clip = make_clip(ref, dist, args.offset, args.row, args.col, D, args.window)
    frames = None if args.frame_list is None else [int(x) for x in args.frame_list.split(",")]
    try:
        written = maps.dump_maps(model, clip.distorted, clip.residual, args.out, frames)
    except OSError as exc:
        raise SystemExit(f"error: cannot write maps: {exc}")
    responses = maps.response_maps(model, clip.distorted, clip.residual)
    shown = frames if frames is not None else list(range(min(D, 4)))
    plotting.plot_maps(responses, shown, Path(args.out) / "maps.png")
    n = sum(len(v) for v in written.values())
    print(f"wrote {n} PGM maps to {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_synthetic_dataset

    path = make_synthetic_dataset(args.out, n_refs=args.refs, width=args.size, height=args.size,
                                  frames=args.num_frames, seed=args.seed)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c3dvqa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the training side of a content split")
    _add_run_options(p)
    p.add_argument("--all", action="store_true", help="train on every distorted video (no split)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="repeat-split SROCC/PLCC evaluation")
    _add_run_options(p)
    p.add_argument("--checkpoint", help="score with this model instead of training per split")
    p.add_argument("--scorer", choices=("model", "psnr"), default="model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score one distorted video against its reference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--window", type=int, default=112)
    p.add_argument("--frames", type=int, default=None, help="segment length (2-D variant only)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-frames", help="train/evaluate one model per segment length")
    _add_run_options(p)
    p.add_argument("--frames-list", default="15,30,60,120")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-maps", help="write branch, threshold and masked-residual maps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=112)
    p.add_argument("--frames", type=int, default=None, help="segment length (2-D variant only)")
    p.add_argument("--offset", type=int, default=0, help="first frame of the clip")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--col", type=int, default=0)
    p.add_argument("--frame-list", default=None, help="comma-separated frames to dump (default all)")
    p.set_defaults(func=cmd_dump_maps)

    p = sub.add_parser("synth", help="write a procedural noise-graded dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--refs", type=int, default=6)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-frames", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
