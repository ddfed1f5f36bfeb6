"""Command-line entry point: ``posesynth <command> [--config FILE] [flags]``.

Exit codes: 0 success, 2 usage or invalid config, 3 missing prerequisite,
4 numeric failure.
"""

import argparse
import logging
import sys

from posesynth._validation import InvalidArgumentError, MissingPrerequisiteError, NumericFailure
from posesynth.config import RunConfig
from posesynth.data import DataLoadError
from posesynth.refiner import FreezeViolation
from posesynth import pipeline

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _pair(text):
    try:
        v, f = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected VIEW,FRAME, got {text!r}")
    return v, f


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key-value config file")
    common.add_argument("--out", help="output root (overrides [run] out)")
    common.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="posesynth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--views", type=int, help="cameras per subject")

    p = sub.add_parser("train-nerf", parents=[common], help="train the coarse radiance field (resumable)")
    p.add_argument("--steps", type=int, help="total iterations")

    p = sub.add_parser("render-coarse", parents=[common], help="render coarse rgb, alpha, mask and normals")
    p.add_argument("--reference", type=_pair, default=(0, 0), metavar="VIEW,FRAME")

    p = sub.add_parser("train-refiner", parents=[common], help="train the refiner, phase 1 then phase 2")
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--steps", type=int, help="total steps for this phase")
    p.add_argument("--views", type=int, help="use the first N views of each frame")
    p.add_argument("--cond-strategy", choices=("conv_add", "concat"))

    p = sub.add_parser("infer", parents=[common], help="refine the target views of the eval split")
    p.add_argument("--reference", type=_pair, default=(0, 0), metavar="VIEW,FRAME")
    p.add_argument("--views", type=int, help="refine the first N views of each frame")
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--cond-strategy", choices=("conv_add", "concat"))
    p.add_argument("--checkpoint", help="explicit refiner checkpoint")
    p.add_argument("--toy", action="store_true", help="generate and use a seeded toy checkpoint")
    p.add_argument("--split", choices=("train", "test"))

    p = sub.add_parser("eval", parents=[common], help="score an inference run")
    p.add_argument("--run", help="inference run directory (default <out>/infer)")
    p.add_argument("--protocol", choices=("all", "novel_view", "novel_pose"))
    p.add_argument("--masked", action="store_true", help="composite onto black with the ground-truth mask")

    p = sub.add_parser("ablate", parents=[common], help="paired refiner runs along one axis")
    p.add_argument("--axis", required=True, choices=sorted(pipeline.ABLATION_AXES))
    p.add_argument("--cond-strategy", choices=("conv_add", "concat"))
    return parser


def resolve_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    cfg = cfg.override("run", seed=args.seed, out=args.out)
    get = lambda name: getattr(args, name, None)
    cfg = cfg.override("refiner", cond_strategy=get("cond_strategy"))
    if args.command == "gen-data":
        cfg = cfg.override("data", n_views=get("views"))
    elif args.command == "train-nerf":
        cfg = cfg.override("nerf", iterations=get("steps"))
    elif args.command == "train-refiner" and get("steps") is not None:
        cfg = cfg.override("refiner", **{f"phase{args.phase}_steps": args.steps})
    elif args.command == "infer":
        cfg = cfg.override("refiner", sample_steps=get("steps"))
        cfg = cfg.override("eval", split=get("split"))
    elif args.command == "eval":
        cfg = cfg.override("eval", protocol=get("protocol"), masked=True if get("masked") else None)
    return cfg


def run(args):
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "gen-data":
        manifest = pipeline.cmd_gen_data(cfg)
        print(f"dataset at {manifest.root}: train {manifest.subjects('train')} test {manifest.subjects('test')}")
    elif cmd == "train-nerf":
        pipeline.cmd_train_nerf(cfg)
        print(f"stage-1 checkpoint at {pipeline.Paths(cfg.run.out).nerf_ckpt}")
    elif cmd == "render-coarse":
        n = pipeline.cmd_render_coarse(cfg, reference=args.reference)
        print(f"rendered {n} coarse views into {pipeline.Paths(cfg.run.out).coarse}")
    elif cmd == "train-refiner":
        pipeline.cmd_train_refiner(cfg, args.phase, views=args.views)
        print(f"refiner phase {args.phase} checkpoint at {pipeline.Paths(cfg.run.out).phase(args.phase)}")
    elif cmd == "infer":
        ckpt = args.checkpoint
        if args.toy:
            ckpt = pipeline.make_toy_checkpoint(pipeline.Paths(cfg.run.out).refiner / "toy.zip", cfg)
        out = pipeline.cmd_infer(cfg, reference=args.reference, targets=pipeline.first_views(cfg, args.views),
                                 checkpoint=ckpt)
        print(f"inference outputs in {out}")
    elif cmd == "eval":
        report = pipeline.cmd_eval(cfg, run=args.run)
        print(report.table(), end="")
    elif cmd == "ablate":
        print(pipeline.cmd_ablate(cfg, args.axis), end="")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except (MissingPrerequisiteError, DataLoadError) as exc:
        print(f"posesynth {args.command}: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericFailure, FreezeViolation) as exc:
        print(f"posesynth {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgumentError, OSError) as exc:
        print(f"posesynth {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
