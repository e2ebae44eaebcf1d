# contribution/shapley.py
"""
Shapley-value baseline for agent contributions.

1. CharacteristicFn:
- memoized, thread-safe wrapper around a coalition utility Delta_Q
- counts distinct evaluations (the cost of the Shapley path)

2. Estimators:
- shapley_exact: canonical |Q|!(n-|Q|-1)!/n! weighting over all subsets (n <= cap)
- shapley_mc: permutation sampling; one permutation serves all agents per iteration

3. make_federated_characteristic:
- Delta_Q = held-out utility of the model obtained by replaying every round
  while aggregating only Q's updates (attention renormalized over Q)
"""
import threading
from itertools import combinations
from math import factorial
from typing import Callable, Dict, FrozenSet, Iterable, Mapping, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from fedsim_contribution_ledger.aggregation import attention_aggregate, fedavg_aggregate
from fedsim_contribution_ledger.metrics import utility
from fedsim_contribution_ledger.models import Batch
from fedsim_contribution_ledger.params import ParamSet, axpy_combine
from fedsim_contribution_ledger.trace import RunTrace
from fedsim_contribution_ledger.utils.config import (
    AggregationConfig, BudgetError, DomainError, ModelSpec, StructuralError
)
from fedsim_contribution_ledger.utils.logging import LoggingManager
logger = LoggingManager.getLogger(__name__)

EXACT_AGENT_CAP = 12

class CharacteristicFn:
    """Coalition utility Delta_Q with a memo cache and an evaluation counter."""

    def __init__(self, evaluator: Callable[[FrozenSet[int]], float]):
        self._evaluator = evaluator
        self._cache: Dict[FrozenSet[int], float] = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    def __call__(self, coalition: Iterable[int]) -> float:
        key = frozenset(int(a) for a in coalition)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = float(self._evaluator(key))
        with self._lock:
            if key not in self._cache:
                self._cache[key] = value
                self.evaluations += 1
            return self._cache[key]

    def prefetch(self, coalitions: Sequence[FrozenSet[int]], n_jobs: int = 1) -> None:
        """Evaluate many coalitions, in parallel threads when n_jobs > 1."""
        pending = [c for c in coalitions if c not in self._cache]
        if n_jobs > 1 and len(pending) > 1:
            Parallel(n_jobs=n_jobs, prefer='threads')(delayed(self)(c) for c in pending)
        else:
            for coalition in pending:
                self(coalition)

#--------------------------------------------
# Estimators
#--------------------------------------------
def shapley_exact(chi: CharacteristicFn,
                  agents: Sequence[int],
                  max_agents: int = EXACT_AGENT_CAP,
                  n_jobs: int = 1) -> Dict[int, float]:
    """phi_i = sum_{Q subset S-i} |Q|!(n-|Q|-1)!/n! * (Delta_{Q+i} - Delta_Q)."""
    agents = sorted(int(a) for a in agents)
    n = len(agents)
    if n > max_agents:
        raise BudgetError(f"Exact Shapley over {n} agents exceeds the cap of {max_agents} "
                          f"(2^{n} evaluations); use shapley_mc instead")
    if n == 0:
        return {}

    subsets = [frozenset(c) for size in range(n + 1) for c in combinations(agents, size)]
    chi.prefetch(subsets, n_jobs=n_jobs)

    weights = [factorial(s) * factorial(n - s - 1) / factorial(n) for s in range(n)]
    values = {}
    for i in agents:
        others = [a for a in agents if a != i]
        total = 0.0
        for size in range(n):
            for coalition in combinations(others, size):
                q = frozenset(coalition)
                total += weights[size] * (chi(q | {i}) - chi(q))
        values[i] = total
    return values

def shapley_mc(chi: CharacteristicFn,
               agents: Sequence[int],
               iterations: int,
               stream: np.random.Generator) -> Dict[int, float]:
    """Permutation-sampling estimate of the Shapley values."""
    if iterations < 1:
        raise DomainError(f"Monte Carlo Shapley needs at least one iteration, got {iterations}")
    agents = sorted(int(a) for a in agents)
    totals = {a: 0.0 for a in agents}
    for _ in range(iterations):
        permutation = stream.permutation(agents)
        coalition: FrozenSet[int] = frozenset()
        previous = chi(coalition)
        for agent in permutation:
            coalition = coalition | {int(agent)}
            current = chi(coalition)
            totals[int(agent)] += current - previous
            previous = current
    return {a: totals[a] / iterations for a in agents}

#--------------------------------------------
# Federated characteristic function
#--------------------------------------------
def replay_subset(trace: RunTrace,
                  coalition: FrozenSet[int],
                  cfg: AggregationConfig,
                  aggregator: str = 'attention',
                  shard_sizes: Optional[Mapping[int, int]] = None) -> ParamSet:
    """Replay the run, aggregating only the coalition's recorded updates.

    While every selected agent belongs to the coalition the recorded server
    trajectory is reused as-is; afterwards each member's update
    (w_t^k - w_t) is applied to the replayed model.
    """
    params = trace.initial_params
    on_record = True
    for round_trace in trace.rounds:
        members = [k for k in round_trace.selected if k in coalition]
        if on_record and len(members) == len(round_trace.selected):
            params = round_trace.server_after
            continue
        on_record = False
        if not members:
            continue

        clients = {
            k: axpy_combine(params, [(1.0, round_trace.clients[k]), (-1.0, round_trace.server_before)])
            for k in members
        }
        if aggregator == 'fedavg':
            weights = {k: shard_sizes[k] for k in members} if shard_sizes else None
            params = fedavg_aggregate(clients, weights)
        else:
            if round_trace.attention is None:
                raise StructuralError(f"Round {round_trace.round_idx} has no recorded attention")
            noise = ({k: round_trace.dp_noise[k] for k in members}
                     if round_trace.dp_noise is not None else None)
            params = attention_aggregate(params, clients, round_trace.attention.restrict(members),
                                         cfg, noise=noise)
    return params

def make_federated_characteristic(trace: RunTrace,
                                  eval_set: Batch,
                                  spec: ModelSpec,
                                  cfg: AggregationConfig,
                                  aggregator: str = 'attention',
                                  shard_sizes: Optional[Mapping[int, int]] = None) -> CharacteristicFn:
    """Delta_Q from subset replay; Delta_empty is the initial model's utility."""
    if trace is None or not trace.rounds:
        raise StructuralError("Cannot build a characteristic function from an empty trace")

    def evaluate_coalition(coalition: FrozenSet[int]) -> float:
        params = replay_subset(trace, coalition, cfg, aggregator, shard_sizes)
        return utility(spec, params, eval_set)

    return CharacteristicFn(evaluate_coalition)
