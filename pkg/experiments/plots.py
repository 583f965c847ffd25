"""Plotting utilities for rollout traces, loss curves and evaluation results."""

import os
from typing import Dict, List, Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from forceflow.common import InvalidArgumentError, svg_metadata, write_csv_frame
from forceflow.compliant_rollout import TRACE_COLUMNS, ComplianceSchedule, RolloutTrace, compliance_gain_schedule
from forceflow.demo_warp import Demonstration
from forceflow.sensing import normalize_force

matplotlib.rcParams['svg.hashsalt'] = 'forceflow'

PROFILE_COLUMNS = ['source', 't', 'force_x', 'force_y', 'force_z', 'd']


def load_results(csv_file: str) -> pd.DataFrame:
    """Load experiment results from CSV file."""
    return pd.read_csv(csv_file, comment='#')


def demo_profile(demo: Demonstration, sched: ComplianceSchedule) -> pd.DataFrame:
    """Force and scheduled d of a demonstration, one row per sample."""
    forces = demo.force_array()
    d = [compliance_gain_schedule(float(np.linalg.norm(normalize_force(f, sched.force_max))), sched)
         for f in forces]
    return pd.DataFrame({
        'source': 'demo', 't': demo.times(),
        'force_x': forces[:, 0], 'force_y': forces[:, 1], 'force_z': forces[:, 2], 'd': d,
    }, columns=PROFILE_COLUMNS)


def rollout_profile(trace: RolloutTrace) -> pd.DataFrame:
    df = trace.to_frame()
    out = df[['t', 'force_x', 'force_y', 'force_z', 'd']].copy()
    out.insert(0, 'source', 'rollout')
    return out[PROFILE_COLUMNS]


def load_profile(path: str) -> pd.DataFrame:
    """
    Read a rollout trace CSV or a previously emitted profile CSV.

    Raises:
        InvalidArgumentError: empty file or unrecognised columns
    """
    try:
        df = pd.read_csv(path, comment='#')
    except pd.errors.EmptyDataError:
        raise InvalidArgumentError(f"{path} is empty")
    if all(c in df.columns for c in PROFILE_COLUMNS):
        df = df[PROFILE_COLUMNS]
    elif all(c in df.columns for c in TRACE_COLUMNS):
        df = rollout_profile(RolloutTrace.from_frame(df))
    else:
        raise InvalidArgumentError(f"{path} is neither a rollout trace nor a profile CSV")
    if df.empty:
        raise InvalidArgumentError(f"{path} holds no samples")
    return df


def save_profile_csv(profile: pd.DataFrame, path: str, config_digest: str = ""):
    write_csv_frame(profile[PROFILE_COLUMNS], path, config_digest)


def _save_svg(fig, output_file: str, config_digest: str = ""):
    """Write through a temporary file so a failed save leaves nothing behind."""
    tmp = output_file + '.tmp'
    try:
        fig.savefig(tmp, format='svg', metadata=svg_metadata(config_digest))
        os.replace(tmp, output_file)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.remove(tmp)


def plot_force_impedance_profile(profile: pd.DataFrame, output_file: str, config_digest: str = ""):
    """
    Two panels sharing the time axis: applied force components and the
    compliance gain d. Demo samples are dashed, rollout samples solid.
    """
    if profile.empty:
        raise InvalidArgumentError("cannot plot an empty profile")
    os.makedirs(os.path.dirname(output_file) or '.', exist_ok=True)

    fig, (ax_f, ax_d) = plt.subplots(2, 1, figsize=(10, 7), sharex=True)
    styles = {'demo': '--', 'rollout': '-'}
    for source, group in profile.groupby('source', sort=True):
        style = styles.get(source, '-')
        ax_f.plot(group['t'], group['force_x'], style, color='tab:blue', label=f'{source} F_x', linewidth=1.5)
        ax_f.plot(group['t'], group['force_z'], style, color='tab:red', label=f'{source} F_z', linewidth=1.5)
        ax_d.plot(group['t'], group['d'], style, color='tab:green', label=f'{source} d', linewidth=1.5)

    ax_f.set_ylabel('Force [N]', fontsize=12)
    ax_f.set_title('Force', fontsize=13, fontweight='bold')
    ax_f.legend(fontsize=9)
    ax_f.grid(True, alpha=0.3)
    ax_d.set_xlabel('Time [s]', fontsize=12)
    ax_d.set_ylabel('Compliance gain d', fontsize=12)
    ax_d.set_title('Impedance', fontsize=13, fontweight='bold')
    ax_d.legend(fontsize=9)
    ax_d.grid(True, alpha=0.3)
    fig.tight_layout()
    _save_svg(fig, output_file, config_digest)
    print(f"Saved plot: {output_file}")


def plot_loss_curve(loss_csv: str, output_file: str, config_digest: str = ""):
    """Training loss per epoch (columns: epoch, loss)."""
    df = load_results(loss_csv)
    if df.empty or 'loss' not in df.columns:
        raise InvalidArgumentError(f"{loss_csv} holds no loss values")
    fig = plt.figure(figsize=(10, 6))
    plt.semilogy(df['epoch'], df['loss'], linewidth=2)
    plt.xlabel('Epoch', fontsize=12)
    plt.ylabel('Flow-matching loss', fontsize=12)
    plt.title('Training Loss', fontsize=14, fontweight='bold')
    plt.grid(True, alpha=0.3)
    plt.tight_layout()
    _save_svg(fig, output_file, config_digest)
    print(f"Saved plot: {output_file}")


def plot_success_and_energy(df: pd.DataFrame, output_dir: str = "results", config_digest: str = ""):
    """Bar chart of successes and mean injected energy per variant."""
    os.makedirs(output_dir, exist_ok=True)
    if df.empty:
        print("No results to plot")
        return
    variants = sorted(df['variant'].unique())
    successes = [int(df[df['variant'] == v]['success'].sum()) for v in variants]
    trials = [int((df['variant'] == v).sum()) for v in variants]
    energies = []
    for v in variants:
        ok = df[(df['variant'] == v) & (df['success'] == 1)]['energy'].dropna()
        energies.append(float(ok.mean()) if len(ok) else 0.0)

    fig, axes = plt.subplots(1, 2, figsize=(12, 5))
    x = np.arange(len(variants))
    axes[0].bar(x, successes, color='tab:blue')
    for i, (s, n) in enumerate(zip(successes, trials)):
        axes[0].text(i, s, f"{s}/{n}", ha='center', va='bottom', fontsize=10)
    axes[0].set_xticks(x)
    axes[0].set_xticklabels(variants)
    axes[0].set_ylabel('Successful trials')
    axes[0].set_title('Success', fontweight='bold')
    axes[0].grid(True, alpha=0.3)

    axes[1].bar(x, energies, color='tab:orange')
    axes[1].set_xticks(x)
    axes[1].set_xticklabels(variants)
    axes[1].set_ylabel('Mean injected energy [J]')
    axes[1].set_title('Energy (successful trials)', fontweight='bold')
    axes[1].grid(True, alpha=0.3)

    fig.tight_layout()
    output_file = os.path.join(output_dir, 'success_energy.svg')
    _save_svg(fig, output_file, config_digest)
    print(f"Saved plot: {output_file}")


def plot_cell_successes(df: pd.DataFrame, output_dir: str = "results", size: int = 3,
                        config_digest: str = ""):
    """One success-count heat map per variant over the evaluation grid."""
    os.makedirs(output_dir, exist_ok=True)
    variants = sorted(df['variant'].unique())
    if not variants:
        return
    fig, axes = plt.subplots(1, len(variants), figsize=(5 * len(variants), 4.5), squeeze=False)
    for ax, variant in zip(axes[0], variants):
        table = np.zeros((size, size))
        sub = df[df['variant'] == variant]
        for _, row in sub.iterrows():
            table[int(row['obj_cell']), int(row['ee_cell'])] += int(row['success'])
        per_cell = max(1, len(sub) // (size * size))
        ax.imshow(table, vmin=0, vmax=per_cell, cmap='Greens')
        for r in range(size):
            for c in range(size):
                ax.text(c, r, f"{int(table[r, c])}/{per_cell}", ha='center', va='center')
        ax.set_xticks(range(size))
        ax.set_xticklabels(['-d', '0', '+d'])
        ax.set_yticks(range(size))
        ax.set_yticklabels(['-d', '0', '+d'])
        ax.set_xlabel('ee offset')
        ax.set_ylabel('object offset')
        ax.set_title(variant, fontweight='bold')
    fig.tight_layout()
    output_file = os.path.join(output_dir, 'grid_successes.svg')
    _save_svg(fig, output_file, config_digest)
    print(f"Saved plot: {output_file}")


def generate_all_plots(csv_file: str, output_dir: str = "results", config_digest: str = ""):
    """
    Generate all summary plots from evaluation results.

    Args:
        csv_file: Path to CSV file with per-trial results
        output_dir: Directory to save plots
        config_digest: config hash stamped into each SVG
    """
    print(f"\nGenerating plots from {csv_file}...")
    df = load_results(csv_file)
    print(f"Loaded {len(df)} result rows")
    plot_success_and_energy(df, output_dir, config_digest)
    plot_cell_successes(df, output_dir, config_digest=config_digest)
    print(f"\nAll plots saved to {output_dir}/")


def plot_profiles(trace_files: List[str], output_dir: str, demo_profile_frame: Optional[pd.DataFrame] = None,
                  stem: str = 'profile', config_digest: str = "") -> Dict[str, str]:
    """
    Combine rollout traces (and optionally a demo profile) into one figure
    plus the CSV of the plotted samples.

    Returns:
        {'svg': path, 'csv': path}
    """
    frames = [load_profile(path) for path in trace_files]
    if demo_profile_frame is not None:
        frames.insert(0, demo_profile_frame)
    profile = pd.concat(frames, ignore_index=True)
    os.makedirs(output_dir, exist_ok=True)
    svg = os.path.join(output_dir, f'{stem}.svg')
    csv_path = os.path.join(output_dir, f'{stem}.csv')
    plot_force_impedance_profile(profile, svg, config_digest)
    save_profile_csv(profile, csv_path, config_digest)
    return {'svg': svg, 'csv': csv_path}


if __name__ == "__main__":
    import sys

    if len(sys.argv) < 2:
        print("Usage: python -m experiments.plots <results.csv> [output_dir]")
        sys.exit(1)

    generate_all_plots(sys.argv[1], sys.argv[2] if len(sys.argv) > 2 else "results")
