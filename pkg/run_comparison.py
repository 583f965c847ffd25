#!/usr/bin/env python3
"""
Quick script to compare the passive and classical impedance controllers.
Evaluates a trained checkpoint over the position grid on the nominal and the
oversized block, then writes the result CSVs and all summary plots.
"""

import argparse
import dataclasses
import os
import sys

from experiments.plots import generate_all_plots
from experiments.runner import EvaluationRunner, summarize, write_rows
from experiments.trials import ControllerVariant, TrialGenerator
from forceflow.common import ForceFlowError
from forceflow.config import load_config, worker_count
from forceflow.containers import load_checkpoint


def main():
    parser = argparse.ArgumentParser(description='Passive vs classical impedance comparison')
    parser.add_argument('run_dir', help='Run directory holding a trained checkpoint')
    parser.add_argument('--config', type=str, help='YAML configuration file')
    parser.add_argument('--scales', type=float, nargs='+', default=[1.0, 1.5], help='Block scales to evaluate')
    args = parser.parse_args()

    print("="*60)
    print("PASSIVE vs CLASSICAL IMPEDANCE")
    print("="*60)
    print()

    try:
        config = load_config(args.config)
        result, _ = load_checkpoint(os.path.join(args.run_dir, 'checkpoint'))
    except ForceFlowError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    out_dir = os.path.join(args.run_dir, 'comparison')
    rows = []
    for scale in args.scales:
        gen = TrialGenerator(config.seeds.master, config.task, config.ranges).with_block_scale(scale)
        task = dataclasses.replace(config.task, block_scale=scale)
        runner = EvaluationRunner(config.sim, task, config.schedule, config.rollout, config.scanner,
                                  config.noise, workers=worker_count(), config_digest=config.hash())
        for variant in (ControllerVariant.PASSIVE, ControllerVariant.CLASSICAL):
            print(f"Running {variant.value} on block scale {scale}...")
            trials = gen.generate_grid(config.eval.grid_step, config.eval.n_seeds, variant)
            rows.extend(runner.run_evaluation(result.params, trials))

    output_file = os.path.join(out_dir, 'results.csv')
    write_rows(rows, output_file, config.hash())
    write_rows(summarize(rows), os.path.join(out_dir, 'summary.csv'), config.hash())
    runner.print_summary(rows)

    print("\nGenerating plots...")
    generate_all_plots(output_file, out_dir, config.hash())

    print("\n" + "="*60)
    print("COMPLETE!")
    print("="*60)
    print()
    print("Results saved to:")
    print(f"  - CSV: {output_file}")
    print(f"  - Plots: {out_dir}/*.svg")
    return 0


if __name__ == "__main__":
    sys.exit(main())
