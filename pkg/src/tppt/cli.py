"""Command-line experiment runner.

``tppt run CONFIG [--set section.key=value ...] [--seeds 0,1,2] [--out DIR] [--mode MODE]``

Per seed the run writes metrics.json, accuracy_matrix.csv, stage_metrics.csv,
summary.csv and pool.bin under ``<out>/seed_<s>/``; the encoder checkpoint and
aggregate.csv land in ``<out>/``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from tppt import checkpoint
from tppt import config as config_mod
from tppt.continual import MODES, run_stream
from tppt.encoders import pretrain_dual_encoder
from tppt.errors import ConfigError, ContractError, NumericalError, PretrainingError
from tppt.evaluation import aggregate_csv
from tppt.synthdata import generate

log = logging.getLogger("tppt")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PRETRAIN = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tppt", description="Class-incremental prompt tuning experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-stage progress")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment config over one or more seeds")
    run.add_argument("config", help="path to a JSON experiment config")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config field, e.g. train.lr=0.05 (repeatable)")
    run.add_argument("--seeds", help="comma-separated seed list, replaces the config's seeds")
    run.add_argument("--out", help="output directory, replaces the config's output_dir")
    run.add_argument("--mode", choices=MODES, help="training mode, replaces the config's mode")
    return parser


def resolve(args: argparse.Namespace) -> config_mod.ExperimentConfig:
    overrides = list(args.overrides)
    if args.seeds is not None:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
        overrides.append("seeds=" + json.dumps(seeds))
    if args.out is not None:
        overrides.append("output_dir=" + json.dumps(args.out))
    if args.mode is not None:
        overrides.append("mode=" + json.dumps(args.mode))
    return config_mod.load(args.config, overrides)


def run_experiment(cfg: config_mod.ExperimentConfig) -> list:
    """Pretrain (or load) the encoder once, then train and evaluate every seed."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate(cfg.data)
    pretrain_info = None
    if cfg.encoder_path:
        if not Path(cfg.encoder_path).is_file():
            raise ConfigError(f"encoder_path {cfg.encoder_path} does not exist")
        encoder = checkpoint.load_encoder(cfg.encoder_path)
        if encoder.cfg != cfg.encoder:
            raise ConfigError("encoder checkpoint was built with a different encoder config")
    else:
        encoder, info = pretrain_dual_encoder(dataset, cfg.encoder, seed=cfg.pretrain.seed,
                                              pretrain=cfg.pretrain)
        pretrain_info = {"zero_shot_accuracy": info["zero_shot_accuracy"], "chance": info["chance"],
                         "final_loss": info["losses"][-1] if info["losses"] else None}
    checkpoint.save_encoder(out / "encoder.bin", encoder)

    echo = cfg.to_dict()
    logs = []
    for seed in cfg.seeds:
        mlog, state, _ = run_stream(encoder, dataset, cfg.mode, cfg.train, seed, config_echo=echo)
        if pretrain_info is not None:
            mlog.extra["pretraining"] = pretrain_info
        seed_dir = out / f"seed_{seed}"
        mlog.write(seed_dir)
        if state.pool is not None:
            checkpoint.save_pool(seed_dir / "pool.bin", state.pool)
        log.info("seed %d: average %.4f final %.4f forgetting %.4f", seed, mlog.average_accuracy,
                 mlog.final_accuracy, mlog.average_forgetting)
        logs.append(mlog)
    (out / "aggregate.csv").write_text(aggregate_csv(logs))
    return logs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        run_experiment(cfg)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PretrainingError as exc:
        print(f"pretraining failure: {exc}", file=sys.stderr)
        return EXIT_PRETRAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
