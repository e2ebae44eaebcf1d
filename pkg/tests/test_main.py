import json
from pathlib import Path

import pytest
import yaml

from fedsim_contribution_ledger.data import SCENARIO_PRESETS
from fedsim_contribution_ledger.runner import make_experiment_config, make_run_id
from main import EXIT_BUDGET, EXIT_CONFIG, EXIT_OK, main

@pytest.fixture
def config_file(tiny_raw, tmp_path):
    def factory(**overrides) -> Path:
        path = tmp_path / 'config.yaml'
        with open(path, 'w') as f:
            yaml.safe_dump(tiny_raw(**overrides), f)
        return path
    return factory

def run_dir_for(raw) -> Path:
    config = make_experiment_config(raw)
    return Path(config.output_dir) / make_run_id(config)

def test_presets_lists_every_scenario(capsys):
    assert main(['--mode', 'presets']) == EXIT_OK
    out = capsys.readouterr().out
    for name in SCENARIO_PRESETS:
        assert name in out

def test_run_writes_record_and_exports(config_file, tiny_raw):
    assert main(['--config', str(config_file()), '--mode', 'run']) == EXIT_OK
    run_dir = run_dir_for(tiny_raw())
    for name in ('config.yaml', 'rounds.jsonl', 'contributions.csv', 'attention.csv', 'summary.json'):
        assert (run_dir / name).exists()
    assert any((run_dir.parent / 'logs').glob('debug_*.log'))

def test_overrides_reach_the_run(config_file, tiny_raw):
    args = ['--config', str(config_file()), '--mode', 'run', '--set', 'rounds=2', '--format', 'csv']
    assert main(args) == EXIT_OK
    run_dir = run_dir_for(tiny_raw(rounds=2))
    assert len((run_dir / 'rounds.jsonl').read_text().strip().splitlines()) == 2
    assert not (run_dir / 'summary.json').exists()

@pytest.mark.parametrize('override', ['rounds=0', 'gamma=1.5', 'selection.num_agents=4', 'shapley=mc(x)'])
def test_invalid_configuration_exits_with_config_code(config_file, override):
    assert main(['--config', str(config_file()), '--mode', 'run', '--set', override]) == EXIT_CONFIG

def test_missing_config_file(tmp_path):
    assert main(['--config', str(tmp_path / 'absent.yaml'), '--mode', 'run']) == EXIT_CONFIG

def test_exact_shapley_over_budget(config_file):
    path = config_file(rounds=1, shapley='exact', scenario={'num_agents': 13, 'samples_per_agent': 6})
    assert main(['--config', str(path), '--mode', 'run']) == EXIT_BUDGET

def test_post_processing_modes(config_file, tiny_raw):
    assert main(['--config', str(config_file()), '--mode', 'run', '--format', 'csv']) == EXIT_OK
    run_dir = run_dir_for(tiny_raw())

    assert main(['--mode', 'shapley', '--record', str(run_dir), '--shapley-mode', 'exact']) == EXIT_OK
    assert (run_dir / 'shapley_exact.json').exists()

    assert main(['--mode', 'export', '--record', str(run_dir), '--format', 'json']) == EXIT_OK
    assert 'exact' in json.loads((run_dir / 'summary.json').read_text())['shapley']

    assert main(['--mode', 'plot', '--record', str(run_dir)]) == EXIT_OK
    assert (run_dir / 'plots' / 'contributions.png').exists()
    assert (run_dir / 'plots' / 'contribution_history.png').exists()

def test_shapley_mode_needs_an_estimator(config_file, tiny_raw):
    assert main(['--config', str(config_file()), '--mode', 'run']) == EXIT_OK
    assert main(['--mode', 'shapley', '--record', str(run_dir_for(tiny_raw()))]) == EXIT_CONFIG

@pytest.mark.parametrize('mode', ['shapley', 'export', 'plot'])
def test_record_modes_need_a_record(mode):
    assert main(['--mode', mode]) == EXIT_CONFIG
