# main.py
"""
Command-line pipeline for measuring agent contributions in federated learning.

A run simulates K agents training a shared model under attention-weighted
aggregation, while the FedCM ledger scores every agent each round. The
output includes:
1. Per-round impact and contribution vectors for every agent
2. Per-layer attention weights and held-out accuracy / perplexity
3. Optional Shapley-value baselines computed from the recorded run

Core features:

1. Mode Implementation:
- run: execute a configured experiment (and its Shapley baseline if set)
- shapley: post-hoc Shapley values for an existing run directory
- export: contributions.csv, attention.csv and summary.json
- plot: contribution bar chart and history plots
- presets: list the shipped scenario presets

2. Configuration:
- YAML config file, dotted overrides via repeatable --set key=value
- FEDSIM_OUTPUT_DIR as output directory fallback

3. Exit codes:
- 0 success, 1 configuration error, 2 runtime abort, 3 Shapley budget exceeded

Usage: python main.py --config config.yaml --mode MODE
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from fedsim_contribution_ledger.data import PRESET_DESCRIPTIONS, SCENARIO_PRESETS
from fedsim_contribution_ledger.runner import (
    RunRecord, export, make_experiment_config, run_experiment, run_shapley
)
from fedsim_contribution_ledger.utils.config import (
    BudgetError, ConfigError, ExperimentConfig, FedSimError, apply_overrides, load_config
)
from fedsim_contribution_ledger.utils.visualization import PlottingUtils
from fedsim_contribution_ledger.utils.logging import LoggingManager
logger = LoggingManager.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_BUDGET = 0, 1, 2, 3

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Federated contribution measurement simulator')
    parser.add_argument('--config', default='config.yaml', help='Path to configuration file')
    parser.add_argument('--mode', choices=['run', 'shapley', 'export', 'plot', 'presets'],
                        required=True,
                        help='run an experiment, post-process a record, or list scenario presets')
    parser.add_argument('--record', type=Path, help='Run directory (shapley, export and plot modes)')
    parser.add_argument('--shapley-mode', help="Shapley estimator: 'exact' or 'mc(M)'")
    parser.add_argument('--format', choices=['csv', 'json', 'both'], default='both',
                        help='Export format')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config key by dotted path, e.g. --set aggregation.stepsize=1.0')
    parser.add_argument('--workers', type=int, help='Worker threads for client updates and Shapley replays')
    return parser

def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    config_path = Path(args.config)
    raw = load_config(config_path) if config_path.exists() or args.config != 'config.yaml' else {}
    raw = apply_overrides(raw, args.overrides)
    if args.workers is not None:
        raw['workers'] = args.workers
    return make_experiment_config(raw)

def load_record(args: argparse.Namespace) -> RunRecord:
    if args.record is None:
        raise ConfigError(f"--mode {args.mode} needs --record <run directory>")
    record = RunRecord.load(args.record)
    LoggingManager(record.config).setup_logging()
    return record

def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        #---------------------------------
        # List presets
        #---------------------------------
        if args.mode == 'presets':
            for name in SCENARIO_PRESETS:
                print(f"{name:<18} {PRESET_DESCRIPTIONS[name]}")
            return EXIT_OK

        #---------------------------------
        # Run experiment
        #---------------------------------
        if args.mode == 'run':
            config = load_experiment(args)
            LoggingManager(config).setup_logging()
            logger.info("\n=== RUN MODE ===")
            record = run_experiment(config)
            export(record, args.format)
            print(f"Run directory: {record.run_dir}")

        #---------------------------------
        # Post-hoc Shapley baseline
        #---------------------------------
        elif args.mode == 'shapley':
            record = load_record(args)
            logger.info("\n=== SHAPLEY MODE ===")
            mode = args.shapley_mode or record.config.shapley
            if mode == 'off':
                raise ConfigError("No Shapley mode given; pass --shapley-mode exact or mc(M)")
            result = run_shapley(record, mode, record.config.shapley_seed, n_jobs=args.workers)
            for agent, (raw, normalized) in enumerate(zip(result.raw, result.normalized)):
                logger.info(f"  agent {agent}: phi={raw:.5f}, normalized={normalized:.4f}")
            export(record, 'json')

        #---------------------------------
        # Export and plot
        #---------------------------------
        elif args.mode == 'export':
            record = load_record(args)
            for path in export(record, args.format):
                print(path)

        elif args.mode == 'plot':
            record = load_record(args)
            plotter = PlottingUtils(record.run_dir / 'plots')
            plotter.plot_contributions(record)
            plotter.plot_contribution_history(record)

        return EXIT_OK

    except (ConfigError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except BudgetError as e:
        logger.error(f"Budget exceeded: {e}")
        return EXIT_BUDGET
    except (FedSimError, OSError) as e:
        logger.error(f"Run aborted: {e}", exc_info=True)
        return EXIT_ABORT

if __name__ == "__main__":
    sys.exit(main())
