"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio, pipeline, raster
from .config import TrainConfig
from .geometry import CameraError
from .optim import NumericalError
from .synth import SynthSpec, random_corruption

log = logging.getLogger("sparsesplat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, help="dataset manifest JSON")
    p.add_argument("--checkpoint", type=Path, help="checkpoint file")
    p.add_argument("--out", type=Path, help="output path or directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iters-scale", type=float, default=None, help="divide all iteration counts by this factor")
    p.add_argument("--samples-per-pixel", type=int, default=None, choices=(1, 4))
    p.add_argument("--beta-m", type=float, default=None)
    p.add_argument("--beta-f", type=float, default=None)
    p.add_argument("--channels-C", dest="channels", type=int, default=None)
    p.add_argument("--tau", type=float, default=None, help="flow consistency threshold in pixels")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsesplat", description="Per-pixel Gaussian splatting from a few posed views.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write an analytic two-plane dataset")
    _common(p)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--size", type=int, default=64, help="image width and height")
    p.add_argument("--baseline", type=float, default=0.15)
    p.add_argument("--depth-noise", type=float, default=0.0, help="noise std as a fraction of the depth range")
    p.add_argument("--corrupt", action="store_true", help="plant random per-view scale/offset corruption")

    p = sub.add_parser("init", help="masks, alignment, segmentation and initial checkpoint")
    _common(p)
    p.add_argument("--no-decoder", action="store_true", help="optimize per-pixel residual maps directly")
    p.add_argument("--no-align", action="store_true", help="skip the coarse depth alignment")

    p = sub.add_parser("train", help="run (or resume) the optimization schedule")
    _common(p)
    p.add_argument("--until", type=int, default=None, help="stop after this iteration")
    p.add_argument("--log-every", type=int, default=100)

    p = sub.add_parser("render", help="render a camera to PNG + depth PFM")
    _common(p)
    p.add_argument("--camera", type=Path, required=True, help="camera JSON")

    p = sub.add_parser("eval", help="score held-out views and write a JSON report")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _common(p)
    p.add_argument("--trials", type=int, default=100)
    return parser


def _overrides(args) -> dict:
    out = {}
    for flag, key in (("seed", "seed"), ("iters_scale", "scale_factor"), ("samples_per_pixel", "samples_per_pixel"),
                      ("beta_m", "beta_m"), ("beta_f", "beta_f"), ("channels", "channels"), ("tau", "tau")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    if getattr(args, "no_decoder", False):
        out["use_decoder"] = False
    if getattr(args, "no_align", False):
        out["use_alignment"] = False
    return out


def _config(base: TrainConfig | None, args) -> TrainConfig:
    d = (base or TrainConfig()).to_dict()
    d.update(_overrides(args))
    try:
        return TrainConfig.from_dict(d)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for '{args.command}'")


def cmd_synth(args) -> int:
    _require(args, "out")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    spec = SynthSpec(width=args.size, height=args.size, n_views=args.views, focal=float(args.size),
                     baseline=args.baseline, depth_noise=args.depth_noise, seed=seed,
                     corruption=random_corruption(args.views, rng) if args.corrupt else None)
    path = pipeline.write_synth_dataset(args.out, spec)
    print(path)
    return EXIT_OK


def cmd_init(args) -> int:
    _require(args, "manifest", "checkpoint")
    cfg = _config(None, args)
    ds = fileio.load_dataset(args.manifest)
    bundle = pipeline.run_init(ds, cfg)
    fileio.save_checkpoint(args.checkpoint, bundle)
    a = bundle.align
    print(f"initialized {bundle.n_views} views, {bundle.num_gaussians} Gaussians; "
          f"scales {np.round(a.scales, 4).tolist()} offsets {np.round(a.offsets, 4).tolist()}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "manifest", "checkpoint")
    bundle = fileio.load_checkpoint(args.checkpoint)
    bundle.config = _config(bundle.config, args)
    ds = fileio.load_dataset(args.manifest)

    def progress(rec):
        it = rec["iteration"]
        if args.log_every and (it % args.log_every == 0 or it + 1 == bundle.config.scaled_total_iters):
            log.info("iter %d view %d total %.5f photo %.5f", it, rec["view"], rec["total"], rec["photometric"])

    pipeline.run_train(bundle, ds, until=args.until, callback=progress)
    fileio.save_checkpoint(args.out or args.checkpoint, bundle)
    print(f"trained to iteration {bundle.iteration}")
    return EXIT_OK


def cmd_render(args) -> int:
    _require(args, "checkpoint", "out")
    bundle = fileio.load_checkpoint(args.checkpoint)
    cam = fileio.read_camera(args.camera)
    out = pipeline.render_view(bundle, cam, args.samples_per_pixel)
    stem = args.out.with_suffix("")
    fileio.write_png(stem.with_suffix(".png"), np.clip(out.color.data, 0, 1))
    fileio.write_pfm(stem.parent / (stem.name + "_depth.pfm"), pipeline.surface_depth(out).astype(np.float32))
    print(stem.with_suffix(".png"))
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "manifest", "checkpoint")
    bundle = fileio.load_checkpoint(args.checkpoint)
    ds = fileio.load_dataset(args.manifest)
    out_dir = args.out or ds.output or Path("eval")
    report = pipeline.evaluate(bundle, ds, out_dir)
    m = report["mean"]
    print(f"psnr {m['psnr']} ssim {m['ssim']} coverage {m['coverage']} depth_mae {m['depth_mae']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    results = gradcheck.run(trials=args.trials, seed=0 if args.seed is None else args.seed)
    print(gradcheck.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "init": cmd_init,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        raster.set_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (fileio.DataError, CameraError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
