import copy
from typing import Callable, Dict

import numpy as np
import pytest

from fedsim_contribution_ledger.params import ParamSet
from fedsim_contribution_ledger.runner import RunRecord, make_experiment_config, run_experiment
from fedsim_contribution_ledger.utils.config import ExperimentConfig

TINY_RAW = {
    'scenario': {
        'name': 'tiny', 'task': 'classification', 'num_agents': 3,
        'samples_per_agent': 40, 'eval_samples': 90, 'num_features': 4, 'num_classes': 3,
    },
    'model': {'kind': 'classifier', 'input_dim': 4, 'hidden_dims': [5], 'output_dim': 3},
    'trainer': {'batch_size': 16, 'learning_rate': 0.1},
    'rounds': 3,
    'master_seed': 7,
}

def _merge(base: Dict, overrides: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged

@pytest.fixture
def tiny_raw(tmp_path) -> Callable[..., Dict]:
    """Factory for a small 3-agent classification config dict."""
    def factory(**overrides) -> Dict:
        raw = _merge(TINY_RAW, {'output_dir': str(tmp_path / 'out')})
        return _merge(raw, overrides)
    return factory

@pytest.fixture
def tiny_config(tiny_raw) -> Callable[..., ExperimentConfig]:
    def factory(**overrides) -> ExperimentConfig:
        return make_experiment_config(tiny_raw(**overrides))
    return factory

@pytest.fixture
def tiny_record(tiny_config) -> RunRecord:
    return run_experiment(tiny_config())

@pytest.fixture
def make_params() -> Callable[..., ParamSet]:
    """ParamSet from keyword layers: make_params(w=[[1, 2]], b=[0])."""
    def factory(**layers) -> ParamSet:
        return ParamSet([(k, np.asarray(v, dtype=np.float64)) for k, v in layers.items()])
    return factory

@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
