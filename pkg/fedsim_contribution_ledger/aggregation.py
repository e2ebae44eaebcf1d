# aggregation.py
"""
Server-side round logic.

1. Selection:
- select_agents: m = max(ceil(C*K), 1) agents, uniformly without replacement

2. Attention aggregation:
- compute_attention: alpha_k^l = softmax over agents of ||w^l - w_k^l||_p
- draw_dp_noise: per-agent N(0, sigma^2) perturbations
- attention_aggregate: w_{t+1} = w_t - eps * sum_k alpha_k^l (w_t - w_k + beta * noise_k)

3. Baseline:
- fedavg_aggregate: unweighted (or shard-size weighted) mean of client params
"""
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import softmax

from fedsim_contribution_ledger.params import (
    ParamSet, axpy_combine, check_congruent, gaussian_like, scale_layers,
    stacked_norm_diff, zeros_like
)
from fedsim_contribution_ledger.utils.config import (
    AggregationConfig, DomainError, SelectionPolicy, StructuralError
)
from fedsim_contribution_ledger.utils.logging import LoggingManager
logger = LoggingManager.getLogger(__name__)

class AttentionMatrix:
    """Per-agent, per-layer attention weights; each layer column sums to 1.

    distances optionally keeps the raw ||w^l - w_k^l||_p scores (and the norm
    order they were taken with) so the ledger can reuse them.
    """

    def __init__(self, agents: Sequence[int], layer_ids: Sequence[str], values: np.ndarray,
                 distances: Optional[np.ndarray] = None, norm_order: Optional[float] = None):
        values = np.array(values, dtype=np.float64)
        if values.shape != (len(agents), len(layer_ids)):
            raise StructuralError(f"Attention shape {values.shape} != ({len(agents)}, {len(layer_ids)})")
        if len(set(agents)) != len(agents):
            raise StructuralError(f"Duplicate agents in attention matrix: {agents}")
        if distances is not None:
            distances = np.array(distances, dtype=np.float64)
            if distances.shape != values.shape or norm_order is None:
                raise StructuralError("Attention distances need the values' shape and a norm order")
            distances.setflags(write=False)
        values.setflags(write=False)
        self.agents: Tuple[int, ...] = tuple(int(a) for a in agents)
        self.layer_ids: Tuple[str, ...] = tuple(layer_ids)
        self.values = values
        self.distances = distances
        self.norm_order = norm_order

    @classmethod
    def uniform(cls, agents: Sequence[int], layer_ids: Sequence[str]) -> 'AttentionMatrix':
        m = len(agents)
        return cls(agents, layer_ids, np.full((m, len(layer_ids)), 1.0 / m))

    def for_agent(self, agent: int) -> np.ndarray:
        return self.values[self.agents.index(agent)]

    def rows(self, agents: Sequence[int]) -> np.ndarray:
        return self.values[[self.agents.index(a) for a in agents]]

    def column_sums(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def restrict(self, agents: Sequence[int]) -> 'AttentionMatrix':
        """Attention over a subset of agents, renormalized per layer."""
        keep = [a for a in self.agents if a in set(agents)]
        if not keep:
            raise StructuralError("Cannot restrict attention to an empty agent set")
        if len(keep) == len(self.agents):
            return self
        index = [self.agents.index(a) for a in keep]
        rows = self.values[index]
        distances = self.distances[index] if self.distances is not None else None
        return AttentionMatrix(keep, self.layer_ids, rows / rows.sum(axis=0, keepdims=True),
                               distances, self.norm_order)

    def to_frame(self) -> pd.DataFrame:
        """Long format: agent_id, layer_id, alpha."""
        return pd.DataFrame([
            {'agent_id': agent, 'layer_id': layer_id, 'alpha': float(self.values[i, j])}
            for i, agent in enumerate(self.agents)
            for j, layer_id in enumerate(self.layer_ids)
        ])

    def to_dict(self) -> Dict:
        data = {'agents': list(self.agents), 'layer_ids': list(self.layer_ids),
                'values': self.values.tolist()}
        if self.distances is not None:
            data.update(distances=self.distances.tolist(), norm_order=self.norm_order)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> 'AttentionMatrix':
        distances = data.get('distances')
        return cls(data['agents'], data['layer_ids'], np.asarray(data['values']),
                   None if distances is None else np.asarray(distances), data.get('norm_order'))

#--------------------------------------------
# Selection
#--------------------------------------------
def select_agents(policy: SelectionPolicy, round_idx: int, stream: np.random.Generator) -> Tuple[int, ...]:
    """Random set S_t of m distinct agent ids, sorted."""
    m = policy.num_selected
    selected = stream.choice(policy.num_agents, size=m, replace=False)
    logger.debug(f"Round {round_idx}: selected {m}/{policy.num_agents} agents")
    return tuple(sorted(int(a) for a in selected))

#--------------------------------------------
# Attention aggregation
#--------------------------------------------
def _check_clients(server: ParamSet, clients: Mapping[int, ParamSet]) -> None:
    if not clients:
        raise StructuralError("Aggregation needs at least one client")
    for agent, params in clients.items():
        check_congruent(server, params, f"agent {agent}")

def compute_attention(server: ParamSet,
                      clients: Mapping[int, ParamSet],
                      p: float = 2.0,
                      negate_scores: bool = False) -> AttentionMatrix:
    """alpha_k^l = softmax_k(s_k^l) with s_k^l = ||w^l - w_k^l||_p.

    negate_scores feeds -s to the softmax (closer clients weigh more).
    """
    _check_clients(server, clients)
    agents = sorted(clients)
    distances = stacked_norm_diff(server, [clients[k] for k in agents], p)
    scores = -distances if negate_scores else distances
    return AttentionMatrix(agents, server.layer_ids, softmax(scores, axis=0), distances, p)

def draw_dp_noise(template: ParamSet,
                  sigma: float,
                  streams: Mapping[int, np.random.Generator]) -> Dict[int, ParamSet]:
    """One N(0, sigma^2) perturbation per agent, each from its own stream."""
    return {k: gaussian_like(template, sigma, streams[k]) for k in sorted(streams)}

def attention_deltas(server: ParamSet,
                     clients: Mapping[int, ParamSet],
                     dp_weight: float,
                     noise: Optional[Mapping[int, ParamSet]] = None) -> Dict[int, ParamSet]:
    """w_t - w_t^k (+ beta * noise_k) for every client."""
    deltas = {}
    for k in sorted(clients):
        terms = [(-1.0, clients[k])]
        if dp_weight > 0 and noise is not None:
            terms.append((dp_weight, noise[k]))
        deltas[k] = axpy_combine(server, terms)
    return deltas

def attention_aggregate(server: ParamSet,
                        clients: Mapping[int, ParamSet],
                        attn: AttentionMatrix,
                        cfg: AggregationConfig,
                        streams: Optional[Mapping[int, np.random.Generator]] = None,
                        noise: Optional[Mapping[int, ParamSet]] = None) -> ParamSet:
    """Attention-weighted server update.

    Noise is either passed in pre-drawn or drawn here from the per-agent
    streams; with dp_weight == 0 the noise term is skipped entirely.
    """
    _check_clients(server, clients)
    if set(attn.agents) != set(clients):
        raise StructuralError(f"Attention covers {sorted(attn.agents)} but clients are {sorted(clients)}")
    if attn.layer_ids != server.layer_ids:
        raise StructuralError("Attention layers do not match server layers")

    if cfg.dp_weight > 0 and noise is None:
        if streams is None:
            raise DomainError("dp_weight > 0 needs per-agent noise streams or pre-drawn noise")
        noise = draw_dp_noise(server, cfg.dp_sigma, {k: streams[k] for k in clients})

    deltas = attention_deltas(server, clients, cfg.dp_weight, noise)
    terms = [(-cfg.stepsize, scale_layers(deltas[k], attn.for_agent(k))) for k in sorted(deltas)]
    return axpy_combine(server, terms)

#--------------------------------------------
# Baseline
#--------------------------------------------
def fedavg_aggregate(clients: Mapping[int, ParamSet],
                     weights: Optional[Mapping[int, float]] = None) -> ParamSet:
    """Elementwise mean of client params (optionally weighted, e.g. by shard size)."""
    if not clients:
        raise StructuralError("FedAvg needs at least one client")
    agents = sorted(clients)
    first = clients[agents[0]]
    for k in agents[1:]:
        check_congruent(first, clients[k], f"agent {k}")

    if weights is None:
        coefficients = {k: 1.0 / len(agents) for k in agents}
    else:
        total = float(sum(weights[k] for k in agents))
        if total <= 0:
            raise DomainError(f"FedAvg weights must sum to a positive value, got {total}")
        coefficients = {k: weights[k] / total for k in agents}

    if len(agents) == 1:
        return first
    return axpy_combine(zeros_like(first), [(coefficients[k], clients[k]) for k in agents])
