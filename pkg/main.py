#!/usr/bin/env python3
"""
forceflow command-line entry point.

Runs the pipeline one stage at a time: record a scripted seed demonstration,
generate a randomized dataset from it, train the flow policy, roll it out
or evaluate it over a position grid, and plot force/impedance profiles.
"""

import argparse
import dataclasses
import logging
import os
import sys
import time
from typing import List, Optional

import numpy as np
import pandas as pd

from experiments.plots import demo_profile, generate_all_plots, plot_loss_curve, plot_profiles
from experiments.runner import EvaluationRunner, summarize, write_rows
from experiments.trials import Ablation, ControllerVariant, Trial, TrialGenerator
from forceflow.common import (
    EXIT_OK, EXIT_RUNTIME, ForceFlowError, InvalidArgumentError, ModelError, NormalizationMismatchError,
    derive_seed, write_csv_frame
)
from forceflow.config import RunConfig, load_config, worker_count
from forceflow.containers import (
    dataset_normalizer, load_checkpoint, load_dataset, load_demo, save_checkpoint, save_dataset, save_demo
)
from forceflow.demo_warp import RandomizationRanges, generate_dataset, randomize_scenario, split_demo
from forceflow.expert import scripted_expert_demo
from forceflow.flow_policy import ActionNormalizer, PolicyParams, TrainingSet, train

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)


def resolve_config(args) -> RunConfig:
    """Load the config file and apply command-line overrides."""
    config = load_config(args.config)
    if args.seed is not None:
        config.seeds = dataclasses.replace(config.seeds, master=args.seed)
    if args.out is not None:
        config.paths = dataclasses.replace(config.paths, out=args.out)
    if args.command == 'gen' and args.ablate is not None:
        config.warp = dataclasses.replace(config.warp, ablation=args.ablate)
    if args.command in ('rollout', 'eval'):
        if args.controller is not None:
            config.rollout = dataclasses.replace(config.rollout, controller=args.controller)
        if args.block_scale is not None:
            config.eval = dataclasses.replace(config.eval, block_scale=args.block_scale)
        if args.command == 'eval' and args.n_seeds is not None:
            config.eval = dataclasses.replace(config.eval, n_seeds=args.n_seeds)
    if args.command == 'train' and args.epochs is not None:
        config.train = dataclasses.replace(config.train, epochs=args.epochs)
    config.validate()
    return config


def out_path(config: RunConfig, *parts: str) -> str:
    return os.path.join(config.paths.out, *parts)


def require_file(path: str, what: str):
    if not os.path.exists(path):
        raise InvalidArgumentError(f"{what} not found: {path}")


def run_demo(args, config: RunConfig) -> int:
    """Record the scripted seed demonstration at the nominal scene."""
    print("\n" + "="*60)
    print("SEED DEMONSTRATION")
    print("="*60)

    task = config.task
    ranges = RandomizationRanges.collapsed(task.block_mass, task.friction)
    scenario = randomize_scenario(derive_seed(config.seeds.master, 0, 'demo'), ranges, task)
    demo = scripted_expert_demo(config.expert, scenario, config.sim, task)
    seg = split_demo(demo, config.warp.eps_force)

    path = out_path(config, 'demo')
    os.makedirs(config.paths.out, exist_ok=True)
    save_demo(path, demo, scenario, (seg.T_f, seg.T_c), config.to_dict(), config.hash())

    print(f"  Samples:       {len(demo)} at {1.0 / demo.dt:.0f} Hz")
    print(f"  Free space:    t = 0..{seg.T_f - 1} (T_f = {seg.T_f - 1})")
    print(f"  In contact:    T_c = {seg.T_c}")
    print(f"  Saved to:      {path}")
    return EXIT_OK


def run_gen(args, config: RunConfig) -> int:
    """Generate a randomized dataset from the seed demonstration."""
    print("\n" + "="*60)
    print(f"DATASET GENERATION (ablation: {config.warp.ablation})")
    print("="*60)

    demo_path = args.demo or out_path(config, 'demo')
    require_file(demo_path, "demonstration")
    demo, _ = load_demo(demo_path)

    started = time.perf_counter()
    result = generate_dataset(demo, args.n, config.ranges, config.generation_context(),
                              master_seed=config.seeds.master, workers=worker_count())
    elapsed = time.perf_counter() - started

    rows = []
    for outcome in result.outcomes:
        row = outcome.to_dict()
        row['ablation'] = config.warp.ablation
        rows.append(row)
    report = out_path(config, 'generation_report.csv')
    write_rows(rows, report, config.hash())

    print(f"\n  Scenarios:     {args.n}")
    print(f"  Successful:    {len(result.episodes)}")
    print(f"  success_rate:  {result.success_rate:.3f}")
    print(f"  Wall-clock:    {elapsed:.1f}s")

    if not result.episodes:
        raise ModelError("no scenario succeeded; nothing to save")
    normalizer = ActionNormalizer.fit(np.concatenate([ep.actions for ep in result.episodes]))
    path = out_path(config, 'dataset')
    meta = {'n_requested': args.n, 'success_rate': result.success_rate, 'ablation': config.warp.ablation}
    save_dataset(path, result.episodes, normalizer, meta, config.to_dict(), config.hash())
    print(f"  Saved to:      {path}")
    return EXIT_OK


def run_train(args, config: RunConfig) -> int:
    """Train the flow policy on a generated dataset."""
    print("\n" + "="*60)
    print("POLICY TRAINING")
    print("="*60)

    dataset_path = args.dataset or out_path(config, 'dataset')
    require_file(dataset_path, "dataset")
    episodes, normalizer, _ = load_dataset(dataset_path)
    data = TrainingSet.from_episodes(episodes, config.policy.horizon)
    if not data.normalizer.matches(normalizer):
        raise NormalizationMismatchError("dataset actions do not reproduce the stored normalization stats")

    resume = None
    if args.resume:
        require_file(args.resume, "checkpoint")
        resume, _ = load_checkpoint(args.resume)
        if not resume.params.normalizer.matches(normalizer):
            raise NormalizationMismatchError("checkpoint was trained with different normalization stats")
        print(f"  Resuming after epoch {resume.epoch}")

    print(f"  Episodes:      {len(episodes)}")
    print(f"  Samples:       {len(data)}")
    started = time.perf_counter()
    result = train(data, config.train, config.seeds.master, arch=config.policy,
                   d_range=config.schedule.d_range, resume=resume, workers=worker_count())
    elapsed = time.perf_counter() - started

    os.makedirs(config.paths.out, exist_ok=True)
    loss_csv = out_path(config, 'loss_curve.csv')
    write_csv_frame(pd.DataFrame({'epoch': np.arange(1, len(result.losses) + 1), 'loss': result.losses}),
                    loss_csv, config.hash())
    path = out_path(config, 'checkpoint')
    save_checkpoint(path, result, config.seeds.master, config.to_dict(), config.hash())

    print(f"\n  Epochs:        {result.epoch}")
    print(f"  Initial loss:  {result.losses[0]:.6f}")
    print(f"  Final loss:    {result.losses[-1]:.6f}")
    print(f"  Best loss:     {result.best_loss:.6f} (epoch {result.best_epoch})")
    print(f"  Wall-clock:    {elapsed:.1f}s")
    print(f"  Loss curve:    {loss_csv}")
    print(f"  Checkpoint:    {path}")
    return EXIT_OK


def load_policy(args, config: RunConfig) -> PolicyParams:
    """Load checkpoint params; refuse a dataset whose normalization differs."""
    checkpoint = args.checkpoint or out_path(config, 'checkpoint')
    require_file(checkpoint, "checkpoint")
    result, _ = load_checkpoint(checkpoint)
    if args.dataset:
        require_file(args.dataset, "dataset")
        if not dataset_normalizer(args.dataset).matches(result.params.normalizer):
            raise NormalizationMismatchError(
                f"normalization stats of {args.dataset} do not match checkpoint {checkpoint}")
    return result.params


def make_runner(config: RunConfig, trace_dir: Optional[str], workers: int = 1) -> EvaluationRunner:
    task = dataclasses.replace(config.task, block_scale=config.eval.block_scale)
    return EvaluationRunner(config.sim, task, config.schedule, config.rollout, config.scanner, config.noise,
                            trace_dir=trace_dir, workers=workers, config_digest=config.hash())


def run_rollout(args, config: RunConfig) -> int:
    """Single closed-loop rollout at a chosen grid offset."""
    print("\n" + "="*60)
    print("POLICY ROLLOUT")
    print("="*60)

    params = load_policy(args, config)
    gen = TrialGenerator(config.seeds.master, config.task, config.ranges).with_block_scale(config.eval.block_scale)
    seed = derive_seed(config.seeds.master, 0, 'rollout')
    trial = Trial(0, (1, 1), 0, seed, gen.scenario_for(args.obj_dx, args.ee_dx, seed),
                  ControllerVariant(config.rollout.controller), Ablation(args.ablate))
    runner = make_runner(config, out_path(config, 'rollout'))
    os.makedirs(runner.trace_dir, exist_ok=True)
    result = runner.run_trial(params, trial)

    print(f"  Controller:    {trial.variant}")
    print(f"  Success:       {result.success}")
    print(f"  Energy:        {result.energy:.4f} J")
    print(f"  Recoveries:    {result.recoveries}")
    print(f"  Trace:         {result.trace_file}")
    return EXIT_OK


def run_eval(args, config: RunConfig) -> int:
    """Evaluate over the object x ee position grid."""
    print("\n" + "="*60)
    print("POLICY EVALUATION")
    print("="*60)

    params = load_policy(args, config)
    gen = TrialGenerator(config.seeds.master, config.task, config.ranges).with_block_scale(config.eval.block_scale)
    trials = gen.generate_grid(config.eval.grid_step, config.eval.n_seeds,
                               ControllerVariant(config.rollout.controller), Ablation(args.ablate))
    eval_dir = out_path(config, 'eval')
    runner = make_runner(config, os.path.join(eval_dir, 'traces'), workers=worker_count())
    results = runner.run_evaluation(params, trials)
    runner.save_results(results, os.path.join(eval_dir, 'results.csv'))
    write_rows(summarize(results), os.path.join(eval_dir, 'summary.csv'), config.hash())
    runner.print_summary(results)
    return EXIT_OK


def run_plot(args, config: RunConfig) -> int:
    """Emit SVG figures and the CSV of the plotted samples."""
    print("\n" + "="*60)
    print("PLOTS")
    print("="*60)

    plot_dir = out_path(config, 'plots')
    if not (args.files or args.loss or args.results):
        raise InvalidArgumentError("nothing to plot: pass trace/profile CSVs, --loss or --results")
    for path in list(args.files) + [p for p in (args.demo, args.loss, args.results) if p]:
        require_file(path, "input")

    if args.files:
        demo_frame = None
        if args.demo:
            demo, _ = load_demo(args.demo)
            demo_frame = demo_profile(demo, config.schedule)
        plot_profiles(args.files, plot_dir, demo_frame, stem=args.stem, config_digest=config.hash())
    if args.loss:
        plot_loss_curve(args.loss, os.path.join(plot_dir, 'loss_curve.svg'), config.hash())
    if args.results:
        generate_all_plots(args.results, plot_dir, config.hash())
    return EXIT_OK


COMMANDS = {
    'demo': run_demo,
    'gen': run_gen,
    'train': run_train,
    'rollout': run_rollout,
    'eval': run_eval,
    'plot': run_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='forceflow',
        description='Force-informed demo generation, flow-matching policy and passive rollout',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Record the scripted seed demonstration
  python main.py demo --seed 7 --out runs/flip

  # Generate 50 scenarios, then the no-virtual-target ablation on the same seeds
  python main.py gen -n 50 --out runs/flip
  python main.py gen -n 50 --ablate no-virtual-target --out runs/flip_no_vt --demo runs/flip/demo

  # Train, resuming later from the checkpoint
  python main.py train --out runs/flip
  python main.py train --resume runs/flip/checkpoint --epochs 100 --out runs/flip

  # Evaluate over the 3x3 grid with the classical controller on an oversized block
  python main.py eval --controller classical --block-scale 1.5 --out runs/flip

  # Plot a rollout against the seed demo
  python main.py plot runs/flip/rollout/trial_000_passive.csv --demo runs/flip/demo --out runs/flip
        """
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='YAML configuration file (default: built-in defaults)')
    common.add_argument('--seed', type=int, help='Master seed (overrides seeds.master)')
    common.add_argument('--out', type=str, help='Output directory (overrides paths.out)')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    verbosity.add_argument('--quiet', '-q', action='store_true', help='Warnings and errors only')

    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('demo', parents=[common], help='Record the scripted seed demonstration')

    gen = sub.add_parser('gen', parents=[common], help='Generate a randomized dataset')
    gen.add_argument('-n', type=int, default=25, help='Number of scenarios (default: 25)')
    gen.add_argument('--demo', type=str, help='Demonstration container (default: <out>/demo)')
    gen.add_argument('--ablate', choices=['none', 'no-virtual-target', 'no-laplacian'],
                     help='Generation ablation')

    tr = sub.add_parser('train', parents=[common], help='Train the flow policy')
    tr.add_argument('--dataset', type=str, help='Dataset container (default: <out>/dataset)')
    tr.add_argument('--resume', type=str, help='Checkpoint to continue from')
    tr.add_argument('--epochs', type=int, help='Epochs to run (overrides train.epochs)')

    for name, text in (('rollout', 'Run one closed-loop rollout'), ('eval', 'Evaluate over the position grid')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--checkpoint', type=str, help='Checkpoint container (default: <out>/checkpoint)')
        p.add_argument('--dataset', type=str, help='Dataset whose normalization must match the checkpoint')
        p.add_argument('--controller', choices=['passive', 'classical'], help='Controller variant')
        p.add_argument('--ablate', choices=['none', 'no-force'], default='none', help='Observation ablation')
        p.add_argument('--block-scale', type=float, help='Block half-extent multiplier')
        if name == 'rollout':
            p.add_argument('--obj-dx', type=float, default=0.0, help='Object x offset in metres')
            p.add_argument('--ee-dx', type=float, default=0.0, help='End-effector x offset in metres')
        else:
            p.add_argument('--n-seeds', type=int, help='Seeds per grid cell (overrides eval.n_seeds)')

    pl = sub.add_parser('plot', parents=[common], help='Plot traces, loss curves or results')
    pl.add_argument('files', nargs='*', help='Rollout trace or profile CSVs')
    pl.add_argument('--demo', type=str, help='Demonstration container to overlay (dashed)')
    pl.add_argument('--loss', type=str, help='Loss curve CSV')
    pl.add_argument('--results', type=str, help='Evaluation results CSV')
    pl.add_argument('--stem', type=str, default='profile', help='File stem of the profile outputs')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except ForceFlowError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception:
        logger.exception("unexpected failure in %s", args.command)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
