"""Evaluation runner: closed-loop rollouts over a trial grid."""

import csv
import dataclasses
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from forceflow.common import InvalidArgumentError, SimulationDivergedError, provenance_header
from forceflow.compliant_rollout import ComplianceSchedule, RolloutConfig, energy_injected, rollout_policy
from forceflow.contact_sim import ContactWorld, SimConfig, TaskConfig
from forceflow.flow_policy import PolicyParams
from forceflow.pointcloud import NoiseConfig, ScannerConfig
from experiments.trials import Ablation, Trial

logger = logging.getLogger(__name__)


class TrialResult:
    """Outcome of a single evaluation rollout."""

    def __init__(self, trial: Trial, block_scale: float):
        self.trial = trial
        self.block_scale = block_scale
        self.success = False
        self.energy = math.nan
        self.recoveries = 0
        self.n_ticks = 0
        self.duration = 0.0
        self.trace_file = ''

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for CSV export."""
        t = self.trial
        return {
            'index': t.index,
            'variant': t.variant,
            'controller': t.controller.value,
            'ablation': t.ablation.value,
            'obj_cell': t.cell[0],
            'ee_cell': t.cell[1],
            'seed_index': t.seed_index,
            'mass': t.scenario.mass,
            'friction': t.scenario.friction,
            'block_scale': self.block_scale,
            'success': int(self.success),
            'energy': self.energy,
            'recoveries': self.recoveries,
            'ticks': self.n_ticks,
            'sim_time': self.duration,
            'trace_file': self.trace_file,
        }


def _run_trial_job(job: Tuple['EvaluationRunner', PolicyParams, Trial]) -> Dict[str, Any]:
    runner, params, trial = job
    return runner.run_trial(params, trial).to_dict()


class EvaluationRunner:
    """Run rollouts for a list of trials and aggregate the results."""

    def __init__(
        self,
        sim: SimConfig,
        task: TaskConfig,
        schedule: ComplianceSchedule,
        rollout: RolloutConfig,
        scanner: Optional[ScannerConfig] = None,
        noise: Optional[NoiseConfig] = None,
        trace_dir: Optional[str] = None,
        workers: int = 1,
        config_digest: str = ""
    ):
        """
        Initialize evaluation runner.

        Args:
            sim: simulator constants
            task: scene description (block_scale included)
            schedule: compliance schedule; its force_max normalizes observations
            rollout: controller and re-planning settings
            scanner: point-cloud scanner
            noise: point-cloud noise
            trace_dir: directory for per-trial trace CSVs (None to skip)
            workers: process count
            config_digest: config hash stamped on every CSV written
        """
        self.sim = sim
        self.task = task
        self.schedule = schedule
        self.rollout = rollout
        self.scanner = scanner or ScannerConfig()
        self.noise = noise or NoiseConfig()
        self.trace_dir = trace_dir
        self.workers = max(1, workers)
        self.config_digest = config_digest

    def run_trial(self, params: PolicyParams, trial: Trial) -> TrialResult:
        """Roll the policy out on one trial and score it."""
        s = trial.scenario
        world = ContactWorld.for_task(self.sim, self.task, s.obj_pose0, s.ee_pose0, s.mass, s.friction)
        config = dataclasses.replace(self.rollout, controller=trial.controller.value)
        result = TrialResult(trial, self.task.block_scale)
        try:
            trace, success = rollout_policy(params, world, self.schedule, config, self.scanner, self.noise,
                                            seed=trial.seed, zero_force=trial.ablation == Ablation.NO_FORCE)
        except SimulationDivergedError as e:
            logger.warning("trial %d diverged: %s", trial.index, e)
            return result

        result.success = success
        result.recoveries = trace.recoveries
        result.n_ticks = len(trace)
        result.duration = world.time
        try:
            result.energy = energy_injected(trace)
        except InvalidArgumentError:
            logger.debug("trial %d has no contact window", trial.index)
        if self.trace_dir is not None:
            name = f"trial_{trial.index:03d}_{trial.variant.replace('+', '_')}.csv"
            result.trace_file = os.path.join(self.trace_dir, name)
            trace.save_csv(result.trace_file, self.config_digest)
        logger.info("trial %d %s cell=%s seed=%d: %s (energy=%.4f J, recoveries=%d)",
                    trial.index, trial.variant, trial.cell, trial.seed_index,
                    "success" if success else "FAILED", result.energy, result.recoveries)
        return result

    def run_evaluation(self, params: PolicyParams, trials: List[Trial]) -> List[Dict[str, Any]]:
        """
        Run every trial and return result rows in trial order.

        Each trial carries its own seed, so the rows do not depend on the
        number of workers.
        """
        if self.trace_dir is not None:
            os.makedirs(self.trace_dir, exist_ok=True)
        print(f"Running {len(trials)} trials on {self.workers} worker(s)...")
        started = time.perf_counter()
        jobs = [(self, params, trial) for trial in trials]
        if self.workers > 1 and len(trials) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as executor:
                rows = list(executor.map(_run_trial_job, jobs))
        else:
            rows = [_run_trial_job(job) for job in jobs]
        logger.info("evaluation finished in %.1fs", time.perf_counter() - started)
        return rows

    def save_results(self, results: List[Dict[str, Any]], output_file: str):
        """Save results to CSV file."""
        write_rows(results, output_file, self.config_digest)

    def print_summary(self, results: List[Dict[str, Any]]):
        """Print per-variant and per-cell summaries."""
        print(f"\n{'='*60}")
        print("EVALUATION SUMMARY")
        print(f"{'='*60}")
        for row in summarize(results):
            energy = (f"{row['energy_mean']:.4f} +/- {row['energy_std']:.4f} J"
                      if row['successes'] else "n/a")
            print(f"\n{row['variant']} (block scale {row['block_scale']}):")
            print(f"  Success:    {row['successes']}/{row['trials']}")
            print(f"  Energy:     {energy}")
            print(f"  Recoveries: {row['recoveries_mean']:.2f} per trial")

        print(f"\nSuccesses per grid cell (rows: object offset, columns: ee offset)")
        for variant, table in cell_tables(results).items():
            print(f"  {variant}:")
            for r in range(table.shape[0]):
                print("    " + "  ".join(f"{int(v):2d}" for v in table[r]))


def write_rows(rows: List[Dict[str, Any]], output_file: str, config_digest: str = ""):
    """Write dict rows with csv.DictWriter below the provenance line."""
    if not rows:
        print("No results to save")
        return
    directory = os.path.dirname(output_file)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(output_file, 'w', newline='') as f:
        f.write(provenance_header(config_digest))
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"Results saved to {output_file}")


def summarize(results: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """
    Aggregate per (variant, block_scale).

    Energy statistics cover successful trials only.
    """
    groups: Dict[Tuple[str, float], List[Dict[str, Any]]] = {}
    for row in results:
        groups.setdefault((row['variant'], float(row['block_scale'])), []).append(row)

    summary = []
    for (variant, scale), rows in sorted(groups.items()):
        energies = np.array([float(r['energy']) for r in rows if int(r['success'])], dtype=np.float64)
        energies = energies[np.isfinite(energies)]
        summary.append({
            'variant': variant,
            'block_scale': scale,
            'trials': len(rows),
            'successes': sum(int(r['success']) for r in rows),
            'energy_mean': float(energies.mean()) if energies.size else math.nan,
            'energy_std': float(energies.std()) if energies.size else math.nan,
            'recoveries_mean': float(np.mean([int(r['recoveries']) for r in rows])),
        })
    return summary


def cell_tables(results: List[Dict[str, Any]], size: int = 3) -> Dict[str, np.ndarray]:
    """Success counts per grid cell, one size x size table per variant."""
    tables: Dict[str, np.ndarray] = {}
    for row in results:
        table = tables.setdefault(row['variant'], np.zeros((size, size), dtype=np.int64))
        table[int(row['obj_cell']), int(row['ee_cell'])] += int(row['success'])
    return dict(sorted(tables.items()))
