import math
import os

import numpy as np
import pandas as pd
import pytest

from experiments.plots import (
    PROFILE_COLUMNS, demo_profile, load_profile, plot_force_impedance_profile, plot_profiles,
    rollout_profile, save_profile_csv
)
from experiments.runner import EvaluationRunner, cell_tables, summarize, write_rows
from experiments.trials import Ablation, ControllerVariant, TrialGenerator
from forceflow.common import EXIT_OK, InvalidArgumentError, provenance
from forceflow.compliant_rollout import ComplianceSchedule, ReplaySource, RolloutConfig, RolloutTrace
from forceflow.contact_sim import SimConfig, TaskConfig
from forceflow.demo_warp import RandomizationRanges
from main import main


def test_grid_shape_and_cells():
    trials = TrialGenerator(seed=0).generate_grid(0.04, n_seeds=2)
    assert len(trials) == 18
    assert [t.index for t in trials] == list(range(18))
    assert sorted({t.cell for t in trials}) == [(i, j) for i in range(3) for j in range(3)]
    nominal = TaskConfig().nominal_obj_x
    xs = sorted({round(t.scenario.obj_pose0.p[0] - nominal, 9) for t in trials})
    assert xs == [-0.04, 0.0, 0.04]


def test_grid_seeds_shared_across_variants():
    gen = TrialGenerator(seed=3)
    passive = gen.generate_grid(0.04, 1)
    classical = gen.generate_grid(0.04, 1, ControllerVariant.CLASSICAL, Ablation.NO_FORCE)
    assert [t.seed for t in passive] == [t.seed for t in classical]
    assert [t.scenario.mass for t in passive] == [t.scenario.mass for t in classical]
    assert classical[0].variant == 'classical+no-force'
    assert passive[0].variant == 'passive'
    assert len({t.seed for t in passive}) == 9


def test_grid_validation():
    with pytest.raises(InvalidArgumentError):
        TrialGenerator().generate_grid(-0.01, 1)
    with pytest.raises(InvalidArgumentError):
        TrialGenerator().generate_grid(0.04, 0)


def test_scenario_draws_respect_ranges():
    gen = TrialGenerator(ranges=RandomizationRanges.collapsed(0.4, 0.5))
    s = gen.scenario_for(0.02, -0.02, seed=9)
    assert (s.mass, s.friction) == (0.4, 0.5)
    task = TaskConfig()
    assert s.obj_pose0.p[0] == pytest.approx(task.nominal_obj_x + 0.02)
    assert s.ee_pose0.p[0] == pytest.approx(task.nominal_ee_x - 0.02)


def test_block_scale_grid():
    gen = TrialGenerator().with_block_scale(1.5)
    assert gen.task.block_scale == 1.5
    trial = gen.generate_grid(0.0, 1)[0]
    assert trial.scenario.obj_pose0.p[2] == pytest.approx(1.5 * TaskConfig().block_half_height)


def _row(variant, success, energy, obj_cell=1, ee_cell=1, recoveries=0, scale=1.0):
    return {'variant': variant, 'block_scale': scale, 'success': success, 'energy': energy,
            'obj_cell': obj_cell, 'ee_cell': ee_cell, 'recoveries': recoveries}


def test_summarize_counts_energy_of_successes_only():
    rows = [
        _row('passive', 1, 0.5), _row('passive', 1, 0.7), _row('passive', 0, 9.0, recoveries=4),
        _row('classical', 0, math.nan),
    ]
    summary = {r['variant']: r for r in summarize(rows)}
    assert summary['passive']['trials'] == 3
    assert summary['passive']['successes'] == 2
    assert summary['passive']['energy_mean'] == pytest.approx(0.6)
    assert summary['passive']['energy_std'] == pytest.approx(0.1)
    assert summary['passive']['recoveries_mean'] == pytest.approx(4 / 3)
    assert math.isnan(summary['classical']['energy_mean'])


def test_cell_tables():
    rows = [_row('passive', 1, 0.1, 0, 2), _row('passive', 1, 0.1, 0, 2), _row('passive', 0, 0.1, 1, 1)]
    table = cell_tables(rows)['passive']
    assert table[0, 2] == 2 and table.sum() == 2


def test_write_rows(tmp_path):
    path = str(tmp_path / 'nested' / 'rows.csv')
    write_rows([_row('passive', 1, 0.25)], path)
    with open(path) as f:
        assert f.readline().startswith('# version=')
    df = pd.read_csv(path, comment='#')
    assert list(df.columns) == ['variant', 'block_scale', 'success', 'energy', 'obj_cell', 'ee_cell', 'recoveries']
    assert df.loc[0, 'energy'] == 0.25


def _hover_source(task: TaskConfig) -> ReplaySource:
    """Chunks that keep the ee parked at its start pose."""
    pose = [task.nominal_ee_x, 0.0, task.nominal_ee_z, 1.0, 0.0, 0.0, 0.0]
    return ReplaySource(np.tile(pose + pose + [4.0], (20, 1)))


def test_runner_scores_a_trial_without_contact(tmp_path):
    task = TaskConfig()
    runner = EvaluationRunner(SimConfig(), task, ComplianceSchedule(), RolloutConfig(max_time=0.2),
                              trace_dir=str(tmp_path))
    trial = TrialGenerator().generate_grid(0.04, 1)[4]
    result = runner.run_trial(_hover_source(task), trial)
    row = result.to_dict()
    assert row['success'] == 0
    assert math.isnan(row['energy'])
    assert row['ticks'] == 20
    assert (row['obj_cell'], row['ee_cell']) == (1, 1)
    assert os.path.basename(row['trace_file']) == 'trial_004_passive.csv'
    assert len(RolloutTrace.load_csv(row['trace_file'])) == 20


def test_runner_rows_follow_trial_order(tmp_path):
    task = TaskConfig()
    runner = EvaluationRunner(SimConfig(), task, ComplianceSchedule(), RolloutConfig(max_time=0.05))
    trials = TrialGenerator().generate_grid(0.04, 1)[:3]
    rows = runner.run_evaluation(_hover_source(task), trials)
    assert [r['index'] for r in rows] == [0, 1, 2]
    assert all(r['trace_file'] == '' for r in rows)


def _profile(n=5, source='rollout'):
    t = 0.01 * np.arange(1, n + 1)
    return pd.DataFrame({'source': source, 't': t, 'force_x': np.sin(t), 'force_y': 0.0,
                         'force_z': -np.cos(t), 'd': np.linspace(4.0, 0.2, n)}, columns=PROFILE_COLUMNS)


def test_profile_csv_round_trip(tmp_path):
    first = str(tmp_path / 'a.csv')
    second = str(tmp_path / 'b.csv')
    save_profile_csv(_profile(), first)
    save_profile_csv(load_profile(first), second)
    assert open(first).read() == open(second).read()


def test_trace_converts_to_profile(tmp_path):
    trace = RolloutTrace()
    for i in range(4):
        trace.append(0.01 * (i + 1), np.zeros(3), np.zeros(3), np.array([1.0, 0.0, -2.0]),
                     np.array([1.0, 0.0, 0.0]), 0.2, 0.0, True, 0.0)
    path = str(tmp_path / 'trace.csv')
    trace.save_csv(path)
    profile = load_profile(path)
    assert list(profile.columns) == PROFILE_COLUMNS
    assert (profile['source'] == 'rollout').all()
    np.testing.assert_allclose(profile['force_z'], -2.0)
    assert rollout_profile(trace).shape == (4, 6)


def test_demo_profile_schedules_gain(seed_demo):
    sched = ComplianceSchedule()
    profile = demo_profile(seed_demo, sched)
    assert len(profile) == len(seed_demo)
    assert profile['d'].iloc[0] == sched.d_up
    assert profile['d'].min() < sched.d_up


def test_empty_trace_writes_no_figure(tmp_path):
    empty = tmp_path / 'empty.csv'
    empty.write_text('')
    header_only = tmp_path / 'header.csv'
    header_only.write_text(','.join(PROFILE_COLUMNS) + '\n')
    out = tmp_path / 'plots'
    for path in (empty, header_only):
        with pytest.raises(InvalidArgumentError):
            plot_profiles([str(path)], str(out))
    assert not out.exists() or not any(out.iterdir())
    with pytest.raises(InvalidArgumentError):
        plot_force_impedance_profile(_profile().iloc[0:0], str(out / 'x.svg'))
    assert not (out / 'x.svg').exists()


def test_unrecognised_csv_rejected(tmp_path):
    path = tmp_path / 'other.csv'
    path.write_text('a,b\n1,2\n')
    with pytest.raises(InvalidArgumentError):
        load_profile(str(path))


def test_profile_svg_has_two_panels_and_is_reproducible(tmp_path):
    profile = pd.concat([_profile(source='demo'), _profile()], ignore_index=True)
    a, b = str(tmp_path / 'a.svg'), str(tmp_path / 'b.svg')
    plot_force_impedance_profile(profile, a)
    plot_force_impedance_profile(profile, b)
    text = open(a).read()
    assert text.startswith('<?xml')
    assert 'Force' in text and 'Impedance' in text
    assert text == open(b).read()


def test_plot_profiles_writes_svg_and_csv(tmp_path):
    src = str(tmp_path / 'rollout.csv')
    save_profile_csv(_profile(), src)
    paths = plot_profiles([src], str(tmp_path / 'plots'), _profile(source='demo'), stem='flip')
    assert os.path.basename(paths['svg']) == 'flip.svg'
    df = pd.read_csv(paths['csv'], comment='#')
    assert sorted(df['source'].unique()) == ['demo', 'rollout']
    assert len(df) == 10


def test_artifacts_carry_provenance(tmp_path):
    digest = 'abc123'
    stamp = '# ' + provenance(digest) + '\n'
    assert stamp.startswith('# version=v') and stamp.endswith('config_hash=abc123\n')

    rows = str(tmp_path / 'rows.csv')
    write_rows([_row('passive', 1, 0.25)], rows, digest)
    profile_csv = str(tmp_path / 'profile.csv')
    save_profile_csv(_profile(), profile_csv, digest)
    trace = RolloutTrace()
    trace.append(0.01, np.zeros(3), np.zeros(3), np.zeros(3), np.array([1.0, 0.0, 0.0]), 0.2, 0.0, False, 0.0)
    trace_csv = str(tmp_path / 'trace.csv')
    trace.save_csv(trace_csv, digest)
    for path in (rows, profile_csv, trace_csv):
        with open(path) as f:
            assert f.readline() == stamp

    assert len(RolloutTrace.load_csv(trace_csv)) == 1
    assert len(load_profile(profile_csv)) == len(_profile())

    svg = str(tmp_path / 'p.svg')
    plot_force_impedance_profile(_profile(), svg, digest)
    assert provenance(digest) in open(svg).read()


@pytest.fixture(scope='module')
def trained_run(tmp_path_factory):
    """Seed demo, 200 generated scenarios and a policy trained with the shipped defaults."""
    out = str(tmp_path_factory.mktemp('comparison') / 'run')
    base = ['--out', out, '-q']
    assert main(['demo'] + base) == EXIT_OK
    assert main(['gen', '-n', '200'] + base) == EXIT_OK
    assert main(['train'] + base) == EXIT_OK
    return base


def _eval_summary(base, *args):
    assert main(['eval', '--n-seeds', '3'] + list(args) + base) == EXIT_OK
    out = base[1]
    summary = pd.read_csv(os.path.join(out, 'eval', 'summary.csv'), comment='#')
    assert int(summary['trials'].sum()) == 27
    return summary.iloc[0]


@pytest.mark.slow
def test_force_observation_improves_success(trained_run):
    full = _eval_summary(trained_run)
    blind = _eval_summary(trained_run, '--ablate', 'no-force')
    assert full['variant'] == 'passive' and blind['variant'] == 'passive+no-force'
    assert full['successes'] > blind['successes']


@pytest.mark.slow
def test_passive_beats_classical_on_oversized_block(trained_run):
    passive = _eval_summary(trained_run, '--block-scale', '1.5')
    classical = _eval_summary(trained_run, '--block-scale', '1.5', '--controller', 'classical')
    assert passive['successes'] >= classical['successes']
    if classical['successes'] > 0:
        assert passive['energy_mean'] <= classical['energy_mean']
