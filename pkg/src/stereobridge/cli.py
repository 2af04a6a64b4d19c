"""Command-line entry point.

Verbs: train, eval, infer, ablate. Exit codes: 0 success, 2 bad
configuration or arguments, 3 numerical failure during optimization.
"""

import argparse
import sys
from typing import List, Optional

from .config import (
    PRESETS,
    ConfigError,
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
)
from .harness import NumericalError, ablate, evaluate, infer, train


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file applied on top of the preset")
    p.add_argument(
        "--preset", default="desk", choices=sorted(PRESETS), help="base configuration"
    )
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override any config field; repeatable",
    )
    p.add_argument("--out", help="output directory (overrides paths.out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereobridge",
        description="Iterative stereo matching with a bridge-style refinement process",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="optimize a model on synthetic scenes")
    _add_common(p_train)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--steps", type=int, help="shortcut for train.steps")

    p_eval = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--iters", help="comma list of refinement iteration counts")

    p_infer = sub.add_parser("infer", help="disparity for one image pair")
    _add_common(p_infer)
    p_infer.add_argument("checkpoint")
    p_infer.add_argument("left")
    p_infer.add_argument("right")
    p_infer.add_argument("--iters", type=int, help="refinement iterations")

    p_abl = sub.add_parser("ablate", help="train-and-eval grid of config variants")
    _add_common(p_abl)
    p_abl.add_argument(
        "--flags", default="te,ca", help="comma list from te,ca,smish,ffn,aa"
    )
    p_abl.add_argument(
        "--schedules", default="", help="comma list of mixing-schedule presets"
    )
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = PRESETS[args.preset]()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if getattr(args, "steps", None):
        cfg = apply_overrides(cfg, [f"train.steps={args.steps}"])
    if args.out:
        cfg = apply_overrides(cfg, [f"paths.out_dir={args.out}"])
    return cfg


def _split_csv(raw: str) -> List[str]:
    return [p.strip() for p in raw.split(",") if p.strip()]


def run(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        if args.verb == "train":
            result = train(cfg, quiet=False, resume=args.resume)
            print(f"checkpoint: {result.checkpoint}")
            print(f"final loss: {result.losses[-1]:.4f} ({result.seconds:.1f}s, "
                  f"config {config_hash(cfg)})")
        elif args.verb == "eval":
            iters = [int(v) for v in _split_csv(args.iters)] if args.iters else None
            rows = evaluate(cfg, args.checkpoint, iters_list=iters)
            for row in rows:
                print(f"iters={row['iters']} epe={row['epe']:.4f} "
                      f"bad3={row['bad3']:.3f} d1_all={row['d1_all']:.3f}")
        elif args.verb == "infer":
            paths = infer(cfg, args.checkpoint, args.left, args.right, iters=args.iters)
            for kind, path in paths.items():
                print(f"{kind}: {path}")
        elif args.verb == "ablate":
            rows = ablate(cfg, flags=_split_csv(args.flags), schedules=_split_csv(args.schedules))
            for row in rows:
                print(f"{row['variant']}: epe={row['epe']:.4f} ({row['config_hash']})")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    raise SystemExit(run())


if __name__ == "__main__":
    main()
