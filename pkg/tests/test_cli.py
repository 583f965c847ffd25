import os
import re

import pandas as pd
import pytest
import yaml

from forceflow.common import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION
from main import main

SMALL_CONFIG = {
    'policy': {'horizon': 4, 'n_points': 16, 'point_widths': [8, 16], 'feature_dim': 8, 'mlp_hidden': 8,
               'time_dim': 8, 'down_dims': [8, 16], 'kernel_size': 3, 'n_groups': 4},
    'train': {'batch_size': 8, 'steps_per_epoch': 2},
    'rollout': {'max_time': 1.0},
    'eval': {'n_seeds': 1},
}


def _tree(root):
    files = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            path = os.path.join(dirpath, name)
            files[os.path.relpath(path, root)] = open(path, 'rb').read()
    return files


def _first_line(path):
    with open(path) as f:
        return f.readline()


def _field(text, pattern):
    match = re.search(pattern, text)
    assert match, pattern
    return int(match.group(1))


def test_demo_reports_consistent_split(tmp_path, capsys):
    out = str(tmp_path / 'run')
    assert main(['demo', '--out', out, '--seed', '0', '-q']) == EXIT_OK
    text = capsys.readouterr().out
    samples = _field(text, r'Samples:\s+(\d+)')
    t_f = _field(text, r'T_f = (\d+)')
    t_c = _field(text, r'T_c = (\d+)')
    assert t_f + t_c + 1 == samples
    assert os.path.isdir(os.path.join(out, 'demo'))


def test_demo_rerun_is_byte_identical(tmp_path):
    out = str(tmp_path / 'run')
    assert main(['demo', '--out', out, '-q']) == EXIT_OK
    first = _tree(out)
    assert main(['demo', '--out', out, '-q']) == EXIT_OK
    assert _tree(out) == first


def test_gen_without_demo_is_a_usage_error(tmp_path, capsys):
    assert main(['gen', '-n', '2', '--out', str(tmp_path), '-q']) == EXIT_VALIDATION
    assert 'demonstration not found' in capsys.readouterr().err


def test_plot_needs_inputs(tmp_path):
    assert main(['plot', '--out', str(tmp_path), '-q']) == EXIT_VALIDATION
    assert main(['plot', str(tmp_path / 'absent.csv'), '--out', str(tmp_path), '-q']) == EXIT_VALIDATION


def test_plot_of_empty_trace_writes_nothing(tmp_path):
    trace = tmp_path / 'trace.csv'
    trace.write_text('')
    assert main(['plot', str(trace), '--out', str(tmp_path), '-q']) == EXIT_VALIDATION
    plots = tmp_path / 'plots'
    assert not plots.exists() or not list(plots.glob('*.svg'))


def test_bad_config_is_a_usage_error(tmp_path):
    assert main(['demo', '--config', str(tmp_path / 'missing.yaml'), '-q']) == EXIT_VALIDATION
    bad = tmp_path / 'bad.yaml'
    bad.write_text(yaml.safe_dump({'train': {'epochs': 0}}))
    assert main(['demo', '--config', str(bad), '--out', str(tmp_path), '-q']) == EXIT_VALIDATION


def test_missing_checkpoint_is_a_usage_error(tmp_path):
    assert main(['rollout', '--out', str(tmp_path), '-q']) == EXIT_VALIDATION


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / 'small.yaml'
    path.write_text(yaml.safe_dump(SMALL_CONFIG))
    return str(path)


@pytest.mark.slow
def test_pipeline_end_to_end(tmp_path, small_config):
    out = str(tmp_path / 'run')
    base = ['--config', small_config, '--out', out, '-q']
    assert main(['demo'] + base) == EXIT_OK
    assert main(['gen', '-n', '4'] + base) == EXIT_OK
    report = pd.read_csv(os.path.join(out, 'generation_report.csv'), comment='#')
    assert len(report) == 4
    assert main(['train', '--epochs', '2'] + base) == EXIT_OK
    losses = pd.read_csv(os.path.join(out, 'loss_curve.csv'), comment='#')
    assert list(losses['epoch']) == [1, 2]
    assert main(['train', '--epochs', '1', '--resume', os.path.join(out, 'checkpoint')] + base) == EXIT_OK
    assert len(pd.read_csv(os.path.join(out, 'loss_curve.csv'), comment='#')) == 3
    assert main(['rollout', '--dataset', os.path.join(out, 'dataset')] + base) == EXIT_OK
    trace = os.path.join(out, 'rollout', 'trial_000_passive.csv')
    assert os.path.exists(trace)
    assert main(['plot', trace, '--demo', os.path.join(out, 'demo'),
                 '--loss', os.path.join(out, 'loss_curve.csv')] + base) == EXIT_OK
    plots = os.listdir(os.path.join(out, 'plots'))
    assert 'profile.svg' in plots and 'profile.csv' in plots and 'loss_curve.svg' in plots
    for path in (os.path.join(out, 'generation_report.csv'), os.path.join(out, 'loss_curve.csv'), trace,
                 os.path.join(out, 'plots', 'profile.csv')):
        assert _first_line(path).startswith('# version=v')
        assert ' config_hash=' in _first_line(path)
    assert 'config_hash=' in open(os.path.join(out, 'plots', 'loss_curve.svg')).read()


@pytest.mark.slow
def test_classical_eval_on_oversized_block(tmp_path, small_config):
    out = str(tmp_path / 'run')
    base = ['--config', small_config, '--out', out, '-q']
    assert main(['demo'] + base) == EXIT_OK
    assert main(['gen', '-n', '4'] + base) == EXIT_OK
    assert main(['train', '--epochs', '1'] + base) == EXIT_OK
    assert main(['eval', '--controller', 'classical', '--block-scale', '1.5'] + base) == EXIT_OK
    results = pd.read_csv(os.path.join(out, 'eval', 'results.csv'), comment='#')
    assert len(results) == 9
    assert (results['variant'] == 'classical').all()
    assert (results['block_scale'] == 1.5).all()
    summary = pd.read_csv(os.path.join(out, 'eval', 'summary.csv'), comment='#')
    assert list(summary['trials']) == [9]
    for name in ('results.csv', 'summary.csv'):
        assert _first_line(os.path.join(out, 'eval', name)).startswith('# version=v')


@pytest.mark.slow
def test_gen_train_eval_rerun_is_byte_identical(tmp_path, small_config):
    out = str(tmp_path / 'run')
    base = ['--config', small_config, '--out', out, '-q']
    assert main(['demo'] + base) == EXIT_OK
    stages = [['gen', '-n', '4'], ['train', '--epochs', '1'], ['eval']]
    for stage in stages:
        assert main(stage + base) == EXIT_OK
    first = _tree(out)
    assert 'eval/results.csv' in first and 'loss_curve.csv' in first
    for stage in stages:
        assert main(stage + base) == EXIT_OK
    assert _tree(out) == first


@pytest.mark.slow
def test_gen_without_laplacian_editing(tmp_path, small_config):
    out = str(tmp_path / 'run')
    base = ['--config', small_config, '--out', out, '-q']
    assert main(['demo'] + base) == EXIT_OK
    code = main(['gen', '-n', '3', '--ablate', 'no-laplacian'] + base)
    report = pd.read_csv(os.path.join(out, 'generation_report.csv'), comment='#')
    assert len(report) == 3
    assert (report['ablation'] == 'no-laplacian').all()
    assert code == (EXIT_OK if report['success'].any() else EXIT_RUNTIME)
