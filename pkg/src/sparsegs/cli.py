"""Command-line surface: synth / train / render / eval.

Exit codes: 0 on success, 2 for usage errors (unknown or malformed flags),
1 for any package error.  Failures print one JSON object on stderr with a
machine-readable ``code`` field; nothing else is written to stderr.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, evalkit, training
from .exceptions import CLIUsageError, SparseGSError, ValidationError
from .rasterizer import RenderSettings, render


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so errors can be serialized."""

    def error(self, message):
        raise CLIUsageError(message, prog=self.prog)


def _onoff(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


def build_parser():
    p = _Parser(prog="sparsegs",
                description="Sparse-view deformable Gaussian splatting toolkit")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    sp = sub.add_parser("synth", help="generate a synthetic oracle dataset")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--gaussians", type=int, default=120)
    sp.add_argument("--views", type=int, default=12)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--deform", type=_onoff, default=True, metavar="{on,off}")

    tp = sub.add_parser("train", help="optimize a scene from a dataset")
    tp.add_argument("--data", required=True, help="dataset directory")
    tp.add_argument("--out", required=True, help="run output directory")
    tp.add_argument("--views", type=int, default=0,
                    help="training-view budget, 0 = all (evenly strided subset)")
    tp.add_argument("--prior-diff", type=_onoff, default=True, metavar="{on,off}")
    tp.add_argument("--prior-geo", type=_onoff, default=True, metavar="{on,off}")
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--iters-warmup", type=int, default=None)
    tp.add_argument("--iters-main", type=int, default=None)
    tp.add_argument("--denoiser", default="oracle",
                    help="oracle | zero | file:<dir> | subprocess:<cmd>")
    tp.add_argument("--depth", default="oracle",
                    help="oracle | file:<dir> | subprocess:<cmd>")
    tp.add_argument("--init-points", type=int, default=None)
    tp.add_argument("--threads", type=int, default=1)
    tp.add_argument("--quiet", action="store_true")

    rp = sub.add_parser("render", help="render one view from a checkpoint")
    rp.add_argument("--ckpt", required=True)
    rp.add_argument("--view-id", type=int, required=True,
                    help="camera id stored in the checkpoint")
    rp.add_argument("--time", type=float, default=None,
                    help="override the stored timestamp (in [0, 1])")
    rp.add_argument("--out", required=True, help="output image path (.png)")

    ep = sub.add_parser("eval", help="score a checkpoint against a dataset")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--report", required=True, help="output report JSON path")
    ep.add_argument("--view-ids", default=None,
                    help="comma-separated subset of view ids (default: all)")
    ep.add_argument("--fps", action="store_true",
                    help="include the wall-clock FPS measurement")
    return p


def cmd_synth(args):
    dataio.synth_generate(args.out, seed=args.seed, n_gaussians=args.gaussians,
                          n_views=args.views, width=args.width, height=args.height,
                          deform=args.deform)
    print(json.dumps({"status": "ok", "out": str(args.out), "views": args.views}))
    return 0


def cmd_train(args):
    ds = dataio.load_dataset(args.data)
    cfg = training.TrainConfig(seed=args.seed, view_budget=args.views,
                               use_diffusion_prior=args.prior_diff,
                               use_geo_prior=args.prior_geo,
                               denoiser=args.denoiser, depth_provider=args.depth,
                               threads=args.threads)
    if args.iters_warmup is not None:
        cfg.warmup_iters = args.iters_warmup
    if args.iters_main is not None:
        cfg.main_iters = args.iters_main
    if args.init_points is not None:
        cfg.init_points = args.init_points

    def progress(rec):
        if not args.quiet and rec["iter"] % 100 == 0:
            print(f"iter {rec['iter']:6d}  rgb {rec['l_rgb']:.4f}  "
                  f"diff {rec['l_diff']:.4f}  geo {rec['l_geo']:.4f}  "
                  f"n {rec['n_gaussians']}")

    state, _ = training.run_schedule(ds, cfg, out_dir=args.out, progress=progress)
    print(json.dumps({"status": "ok", "out": str(args.out),
                      "iterations": state.iteration,
                      "n_gaussians": len(state.cloud)}))
    return 0


def cmd_render(args):
    lc = training.load_checkpoint_state(args.ckpt)
    if args.view_id not in lc.cameras:
        raise ValidationError(
            f"checkpoint has no camera {args.view_id}",
            available=sorted(lc.cameras))
    view = lc.cameras[args.view_id]
    tau = view.time if args.time is None else args.time
    from .deformation import apply_deformation
    cloud, _ = apply_deformation(lc.cloud, lc.field, lc.head, tau)
    out = render(cloud, view, settings=RenderSettings())
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_png(path, out.color)
    dataio.write_pfm(path.with_suffix(".pfm"), out.color)
    print(json.dumps({"status": "ok", "out": str(path), "view_id": args.view_id,
                      "time": tau}))
    return 0


def cmd_eval(args):
    lc = training.load_checkpoint_state(args.ckpt)
    ds = dataio.load_dataset(args.data)
    views = ds.views
    if args.view_ids is not None:
        try:
            wanted = [int(s) for s in args.view_ids.split(",") if s]
        except ValueError:
            raise CLIUsageError(f"--view-ids must be comma-separated ints, "
                                f"got {args.view_ids!r}")
        views = [v for v in ds.views if v.view_id in wanted]
        if len(views) != len(wanted):
            have = {v.view_id for v in ds.views}
            raise ValidationError(
                f"view ids not in dataset: {sorted(set(wanted) - have)}")
    report = evalkit.evaluate(lc, views, with_fps=args.fps)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    evalkit.write_report(path, report)
    print(json.dumps({"status": "ok", "report": str(path),
                      "aggregate": report["aggregate"]}))
    return 0


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render,
             "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise CLIUsageError("no command given (expected one of: "
                                + ", ".join(_COMMANDS) + ")")
        return _COMMANDS[args.command](args)
    except CLIUsageError as err:
        print(json.dumps(err.to_json()), file=sys.stderr)
        return 2
    except SparseGSError as err:
        print(json.dumps(err.to_json()), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
