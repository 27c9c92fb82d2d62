"""
main.py - Command-line entry point
meta-train, run, evaluate, aggregate and plot over JSON experiment configs

    python main.py meta-train --config data/quad_meta_train.json
    python main.py run --config data/quad_stab.json --trials 3 --seed 7
    python main.py aggregate --dir results/quad_stab
    python main.py plot --dir results/quad_stab
"""

import argparse
import logging
import sys
from typing import List, Optional

from config import apply_overrides, load_experiment_config
from errors import AdaptMpcError, ConfigurationError, exit_code_for
from experiments import aggregate, run_experiment, run_few_shot_eval, run_meta_train
from logger import AuditTrail
from plotting import plot_directory

logger = logging.getLogger(__name__)


def _load(args: argparse.Namespace):
    cfg = load_experiment_config(args.config)
    return apply_overrides(
        cfg,
        paper_scale=getattr(args, "paper_scale", False),
        trials=getattr(args, "trials", None),
        seed=getattr(args, "seed", None),
    )


def cmd_meta_train(args: argparse.Namespace) -> None:
    cfg = _load(args)
    if cfg.experiment != "meta_train":
        raise ConfigurationError(f"meta-train needs a meta_train config, got {cfg.experiment}")
    checkpoint = run_meta_train(cfg)
    print(f"Checkpoint written to {checkpoint}")


def cmd_run(args: argparse.Namespace) -> None:
    cfg = _load(args)
    if cfg.experiment in ("meta_train", "few_shot_eval"):
        raise ConfigurationError(f"Use the dedicated subcommand for {cfg.experiment}")
    run_experiment(cfg)
    print(f"Results written to {cfg.output_dir}")


def cmd_evaluate(args: argparse.Namespace) -> None:
    cfg = _load(args)
    if cfg.experiment != "few_shot_eval":
        raise ConfigurationError(f"evaluate needs a few_shot_eval config, got {cfg.experiment}")
    result = run_few_shot_eval(cfg)
    print(f"Meta beat fresh on {result['meta_wins']}/{result['comparisons']} comparisons")


def cmd_aggregate(args: argparse.Namespace) -> None:
    aggregate(args.dir)
    print(f"Summary written to {args.dir}/summary.json")


def cmd_plot(args: argparse.Namespace) -> None:
    for path in plot_directory(args.dir):
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptive-mpc", description="Meta-learned adaptive neural MPC experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="meta-train a residual network and write its checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--paper-scale", action="store_true", help="use the configured paper-scale epoch count")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("run", help="run an experiment, then aggregate and plot it")
    p.add_argument("--config", required=True)
    p.add_argument("--paper-scale", action="store_true", help="use the configured paper-scale trial count")
    p.add_argument("--trials", type=int, help="number of trials (wins over --paper-scale)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="few-shot comparison of a checkpoint against fresh networks")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("aggregate", help="recompute summary.json from a results directory")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("plot", help="render the SVG figures of a results directory")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except AdaptMpcError as e:
        code = exit_code_for(e)
        AuditTrail.log_error(args.command, type(e).__name__, str(e), code)
        print(f"Error: {e}", file=sys.stderr)
        return code
    except Exception as e:
        logger.exception(f"[{args.command}] unexpected failure")
        AuditTrail.log_error(args.command, type(e).__name__, str(e), 1)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
