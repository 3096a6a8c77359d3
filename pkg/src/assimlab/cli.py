"""Command-line entry point.

Subcommands: generate-data, train, assimilate, evaluate, ablate,
sweep-sparsity, plot. Global flags: --config (YAML file), --set (dotted
overrides), --out (out_dir override), --seed, --force.
"""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config, save_config
from .experiment import (CommandError, cmd_ablate, cmd_assimilate,
                         cmd_evaluate, cmd_generate_data, cmd_plot,
                         cmd_sweep_sparsity, cmd_train)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="assimlab",
        description="Desk-scale data assimilation lab: physics-regularized "
                    "score diffusion over a rotating shallow-water toy system.")
    parser.add_argument("--config", help="YAML config file (defaults when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override, "
                        "e.g. --set train.steps=2000")
    parser.add_argument("--out", help="override out_dir")
    parser.add_argument("--seed", type=int, help="override the command's seed")
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate-data", help="integrate toy trajectories and "
                   "write the train/val/test dataset")

    p = sub.add_parser("train", help="train a diffusion checkpoint")
    p.add_argument("--variant", default="full",
                   choices=("full", "no_prdo", "no_vre", "conv_encoder"))
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", type=int, default=100)

    p = sub.add_parser("assimilate", help="assimilate a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("--fraction", type=float)
    p.add_argument("--split", default="test")
    p.add_argument("--n-states", type=int)

    p = sub.add_parser("evaluate", help="metric report over analysis files")
    p.add_argument("analyses", nargs="+")
    p.add_argument("--report", help="output JSON path")
    p.add_argument("--allow-mixed", action="store_true")

    p = sub.add_parser("ablate", help="train and compare the model variants")
    p.add_argument("--variants", nargs="+",
                   default=["full", "no_prdo", "no_vre", "conv_encoder"])
    p.add_argument("--log-every", type=int, default=100)

    p = sub.add_parser("sweep-sparsity", help="evaluate one checkpoint across "
                       "observation fractions")
    p.add_argument("checkpoint")

    p = sub.add_parser("plot", help="field maps and spectra from an analysis file")
    p.add_argument("analysis")
    p.add_argument("--channels", nargs="+")
    p.add_argument("--state-index", type=int, default=0)
    p.add_argument("--plot-out", help="output directory for images")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"out_dir={args.out}")
        config = load_config(args.config, overrides)

        if args.command == "generate-data":
            if args.seed is not None:
                config = load_config(args.config,
                                     overrides + [f"data.seed={args.seed}"])
            cmd_generate_data(config, force=args.force)
            save_config(config, f"{config.out_dir}/config.yaml")
        elif args.command == "train":
            cmd_train(config, variant=args.variant, seed=args.seed,
                      resume=args.resume, force=args.force,
                      log_every=args.log_every)
        elif args.command == "assimilate":
            cmd_assimilate(config, args.checkpoint, fraction=args.fraction,
                           seed=args.seed if args.seed is not None else 0,
                           split=args.split, n_states=args.n_states,
                           force=args.force)
        elif args.command == "evaluate":
            cmd_evaluate(args.analyses, out_path=args.report,
                         allow_mixed=args.allow_mixed)
        elif args.command == "ablate":
            cmd_ablate(config, variants=tuple(args.variants), force=args.force,
                       log_every=args.log_every)
        elif args.command == "sweep-sparsity":
            cmd_sweep_sparsity(config, args.checkpoint, force=args.force)
        elif args.command == "plot":
            cmd_plot(args.analysis, channels=args.channels,
                     out_dir=args.plot_out, state_index=args.state_index)
    except (ConfigError, CommandError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
