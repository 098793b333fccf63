"""``panoground`` command line: synth, train, eval, ground, bench, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps training bitwise reproducible and timings honest;
# must be set before numpy loads
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("panoground")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    """Parse ``HxW`` (e.g. 256x512)."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def _emit(doc: dict, path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _select_split(manifest, split: str, seed: int):
    from .synthdata import split as split_manifest

    if split == "all":
        return manifest
    parts = split_manifest(manifest, (0.8, 0.1, 0.1), seed)
    return parts[SPLITS.index(split)]


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from . import synthdata

    man = synthdata.generate(args.out, seed=args.seed, n_videos=args.videos, frames_per_video=args.frames,
                             n_objects_range=args.objects, size=args.size)
    n_frames = sum(len(v.frames) for v in man.videos)
    log.info("wrote %d videos / %d frames to %s", len(man.videos), n_frames, args.out)
    return 0


def cmd_train(args) -> int:
    from . import synthdata
    from .config import RunConfig
    from .training import train

    cfg = RunConfig.load(args.config)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    manifest = _select_split(synthdata.load(args.data), args.split, cfg.split_seed)
    train(manifest, cfg, args.ckpt_out, resume=args.resume, log=print)
    return 0


def cmd_eval(args) -> int:
    from . import synthdata
    from .evaluation import evaluate, model_strategy, standard_strategies
    from .geometry import candidate_grid
    from .imageio import load_png, save_png
    from .geometry import nfov_mask
    from .evaluation import overlay

    model = vocab = None
    if args.ckpt:
        from .training import latest_checkpoint, load_model

        ckpt = latest_checkpoint(args.ckpt)
        model, vocab, meta = load_model(ckpt)
        cfg = model.cfg
        grid = model.grid
        model_id = str(ckpt)
    else:
        from .config import RunConfig

        cfg = RunConfig.load(args.config)
        grid = candidate_grid(cfg.hfov, lons=cfg.lons(), lats=cfg.lats())
        model_id = "none"
    manifest = _select_split(synthdata.load(args.data), args.split, cfg.split_seed)

    names = [] if args.baselines == "none" else ["RS", "CS", "Oracle"] if args.baselines == "all" else args.baselines.split(",")
    strategies = {}
    if model is not None:
        strategies["model"] = model_strategy(model, vocab)
    strategies.update(standard_strategies(grid, manifest.width, manifest.height, seed=args.seed, which=names))
    if not strategies:
        raise UsageError("nothing to evaluate: give --ckpt and/or --baselines")
    report = evaluate(manifest, grid, strategies, model_id=model_id)
    report.config = cfg.to_dict()
    _emit(report.to_dict(), args.report)
    if args.csv:
        report.write_csv(args.csv)
    if args.overlays:
        out = Path(args.overlays)
        out.mkdir(parents=True, exist_ok=True)
        first = next(iter(strategies))
        for r in report.rows:
            if r["strategy"] != first:
                continue
            frame = next(v for v in manifest.videos if v.id == r["video"]).frames[r["frame"]]
            img = load_png(manifest.image_path(frame))
            mask = nfov_mask(grid[r["candidate"]], manifest.width, manifest.height)
            save_png(out / f"{r['video']}_{r['frame']:04d}_{r['subtitle']}.png",
                     overlay(img, mask, frame.subtitles[r["subtitle"]].boxes))
    return 0


def cmd_ground(args) -> int:
    from .autodiff import no_grad
    from .evaluation import overlay
    from .geometry import nfov_mask
    from .imageio import load_png, save_png
    from .text import encode_subtitle, stack_tokens
    from .training import load_model

    model, vocab, _ = load_model(args.ckpt)
    pano = load_png(args.pano)
    tokens, lengths = stack_tokens([encode_subtitle(args.text, vocab, model.cfg.m)])
    with no_grad():
        if args.features:
            from .grounding import load_feature_maps

            cands = model.candidates_from_feature_map(load_feature_maps(args.features)[:1])
            out = model.forward_from_candidates(cands, tokens, lengths, with_loss=False)
        else:
            out = model.forward(pano[None], tokens, lengths, with_loss=False)
    idx = int(out.y[0])
    cam = model.grid[idx]
    _emit({
        "candidate": idx,
        "lon": cam.lon,
        "lat": cam.lat,
        "hfov": cam.hfov,
        "alpha": [float(a) for a in out.alpha.data[0]],
        "text": args.text,
        "config": model.cfg.to_dict(),
    }, args.out)
    if args.overlay_out:
        save_png(args.overlay_out, overlay(pano, nfov_mask(cam, pano.shape[1], pano.shape[0])))
    return 0


def cmd_bench(args) -> int:
    from . import synthdata
    from .config import RunConfig
    from .evaluation import SCALES, bench
    from .grounding import GroundingModel
    from .imageio import load_png, resize
    from .text import END

    if args.ckpt:
        from .training import load_model

        model, _, _ = load_model(args.ckpt)
    else:
        cfg = RunConfig.load(args.config)
        model = GroundingModel(cfg, vocab_size=16)
    manifest = _select_split(synthdata.load(args.data), args.split, model.cfg.split_seed)
    paths = [manifest.image_path(f) for v in manifest.videos for f in v.frames][: args.frames]
    if not paths:
        raise RuntimeError("no frames to benchmark")
    frames = [load_png(p) for p in paths]
    if args.resize:
        h, w = args.resize
        frames = [resize(f, w, h) for f in frames]
    tokens = np.array([[4, 5, 6, END] + [0] * (model.cfg.m - 4)], dtype=np.int64)
    lengths = np.array([4])
    scales = list(SCALES) if args.scale == "all" else [args.scale]
    modes = ["feature", "pixel"] if args.mode == "all" else [args.mode]
    results = [bench(model, frames, tokens, lengths, mode=m, scale=s).to_dict() for m in modes for s in scales]
    _emit({"results": results, "candidates": len(model.grid), "config": model.cfg.to_dict()}, args.report)
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import miniature_config, model_gradcheck
    from .config import RunConfig

    cfg = miniature_config() if args.config is None else RunConfig.load(args.config, env=False)
    report = model_gradcheck(cfg, seed=args.seed, h=args.h, tol=args.tol, corrupt=args.corrupt_adjoint)
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} worst max rel err {report.worst:.3e} (tol {report.tol:g})")
    if args.report:
        _emit({**report.to_dict(), "config": cfg.to_dict()}, args.report)
    return 0 if report.passed else 1


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panoground", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--videos", type=int, default=12)
    s.add_argument("--frames", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=_size, default=(256, 512), help="HxW, default 256x512")
    s.add_argument("--objects", type=_range, default=(2, 4), help="objects per scene LO,HI")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a grounding model")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--ckpt-out", required=True)
    s.add_argument("--resume", help="checkpoint file or directory to continue from")
    s.add_argument("--epochs", type=int, help="override the config's epoch count")
    s.add_argument("--split", choices=SPLITS + ("all",), default="train")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a model and/or baselines")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--config", help="grid/hfov settings when no checkpoint is given")
    s.add_argument("--baselines", default="all", help="all, none, or a comma list of RS,CS,Oracle")
    s.add_argument("--split", choices=SPLITS + ("all",), default="test")
    s.add_argument("--seed", type=int, default=0, help="random-selection seed")
    s.add_argument("--report")
    s.add_argument("--csv")
    s.add_argument("--overlays", help="directory for overlay PNGs")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ground", help="ground one subtitle in one panorama")
    s.add_argument("--pano", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out")
    s.add_argument("--overlay-out")
    s.add_argument("--features", help="precomputed (h, w, d) feature map (.npy) used instead of the conv encoder")
    s.set_defaults(fn=cmd_ground)

    s = sub.add_parser("bench", help="time the feature-space and pixel-space paths")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt")
    s.add_argument("--config")
    s.add_argument("--mode", choices=("feature", "pixel", "all"), default="feature")
    s.add_argument("--scale", choices=("full", "1/4", "1/16", "all"), default="full")
    s.add_argument("--split", choices=SPLITS + ("all",), default="test")
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--resize", type=_size, help="resize frames to HxW first, e.g. 720x1280")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    s.add_argument("--config", help="model config; default is the built-in miniature")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-4)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--corrupt-adjoint", metavar="OP", help="scale OP's backward pass (negative control)")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"panoground {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, don't dump a traceback
        log.debug("traceback", exc_info=True)
        print(f"panoground {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
