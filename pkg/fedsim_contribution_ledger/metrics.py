# metrics.py
"""
Evaluation metrics for the held-out set.

- accuracy: argmax hit rate, ties broken towards the lowest class index
- perplexity: 2 ** (mean cross-entropy in bits) with a 1e-12 probability floor
- empirical_oracle: per-context empirical next-token distribution (the H(p) bound)
- evaluate / utility: model-level wrappers used by the runner and by Shapley replay
"""
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np
import pandas as pd

from fedsim_contribution_ledger.models import Batch, predict_distribution
from fedsim_contribution_ledger.params import ParamSet
from fedsim_contribution_ledger.utils.config import DomainError, ModelSpec, NumericError

# Caps perplexity at roughly 2**40
PROBABILITY_FLOOR = 1e-12

@dataclass(frozen=True)
class EvalReport:
    metric: str
    value: float
    sample_count: int
    round_idx: int

    def to_dict(self) -> Dict:
        return asdict(self)

def _check_inputs(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets)
    if predictions.ndim != 2 or len(predictions) == 0:
        raise DomainError(f"Expected a non-empty probability matrix, got shape {predictions.shape}")
    if len(predictions) != len(targets):
        raise DomainError(f"{len(predictions)} prediction rows but {len(targets)} targets")
    return predictions

def accuracy(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the target."""
    predictions = _check_inputs(predictions, targets)
    return float(np.mean(np.argmax(predictions, axis=1) == np.asarray(targets)))

def perplexity(predictions: np.ndarray, targets: np.ndarray) -> float:
    """2 ** (-(1/N) * sum_n log2 m(target_n))."""
    predictions = _check_inputs(predictions, targets)
    targets = np.asarray(targets, dtype=np.int64)
    picked = predictions[np.arange(len(targets)), targets]
    if not np.all(np.isfinite(picked)):
        raise NumericError("Predicted probabilities contain non-finite values")
    floored = np.maximum(picked, PROBABILITY_FLOOR)
    if np.any(floored <= 0):
        raise NumericError("Zero probability after flooring")
    return float(2.0 ** (-np.mean(np.log2(floored))))

def empirical_oracle(inputs: np.ndarray, targets: np.ndarray, num_outputs: int) -> np.ndarray:
    """Each row gets the empirical target distribution of its own context."""
    contexts = np.asarray(inputs).reshape(len(inputs), -1)
    frame = pd.DataFrame({'context': [' '.join(map(str, row)) for row in contexts],
                          'target': np.asarray(targets, dtype=np.int64)})
    counts = frame.groupby(['context', 'target']).size().unstack(fill_value=0)
    counts = counts.reindex(columns=range(num_outputs), fill_value=0)
    distributions = counts.div(counts.sum(axis=1), axis=0)
    return distributions.loc[frame['context']].to_numpy(dtype=np.float64)

#--------------------------------------------
# Model-level wrappers
#--------------------------------------------
def metric_name(spec: ModelSpec) -> str:
    return 'accuracy' if spec.kind == 'classifier' else 'perplexity'

def evaluate(spec: ModelSpec, params: ParamSet, eval_set: Batch, round_idx: int) -> EvalReport:
    """Accuracy (classifier) or perplexity (next-token) on the held-out set."""
    predictions = predict_distribution(spec, params, eval_set.inputs)
    if spec.kind == 'classifier':
        value = accuracy(predictions, eval_set.targets)
    else:
        value = perplexity(predictions, eval_set.targets)
    return EvalReport(metric_name(spec), value, len(eval_set), round_idx)

def utility(spec: ModelSpec, params: ParamSet, eval_set: Batch) -> float:
    """Higher-is-better scalar: accuracy, or negative log2-perplexity."""
    report = evaluate(spec, params, eval_set, 0)
    if report.metric == 'accuracy':
        return report.value
    return -float(np.log2(report.value))
