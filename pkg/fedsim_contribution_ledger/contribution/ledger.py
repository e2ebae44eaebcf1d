# contribution/ledger.py
"""
FedCM impact recurrence and contribution normalization.

1. ImpactLedger:
- imp_0^k = 0 for every agent
- one entry per round: cumulative impact, selection flags, raw per-layer terms
- unselected agents carry their previous impact over bit-for-bit

2. round_impact:
- term_k^l = eps * alpha_k^l * [ln(||w_t^l - w_t^{k,l}|| + 1) / ln(||w_{t+1}^l - w_t^l|| + 1 + delta)
                               + beta * nu_k^l],  nu_k^l ~ N(0, sigma^2)
- per-agent round term = parameter-count weighted mean over layers
- imp_t^k = round term + gamma * imp_{t-1}^k

3. contributions:
- con_t = softmax(MinMaxScaler(imp_t)); uniform when all impacts are equal
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax
from sklearn.preprocessing import MinMaxScaler

from fedsim_contribution_ledger.aggregation import AttentionMatrix
from fedsim_contribution_ledger.params import (
    ParamSet, check_congruent, layer_norm_diff, stacked_norm_diff
)
from fedsim_contribution_ledger.utils.config import (
    AggregationConfig, DomainError, NumericError, StructuralError
)
from fedsim_contribution_ledger.utils.logging import LoggingManager
logger = LoggingManager.getLogger(__name__)

# Denominator guard for rounds where the server does not move
DENOMINATOR_GUARD = 1e-12

@dataclass(frozen=True)
class LedgerEntry:
    """Ledger state after one round."""
    round_idx: int
    impact: np.ndarray
    selected: Tuple[int, ...]
    layer_terms: Dict[int, np.ndarray] = field(default_factory=dict)
    measured: bool = True

@dataclass(frozen=True)
class ContributionVector:
    """con_t^k for every agent; sums to 1."""
    round_idx: int
    values: np.ndarray

    def ranking(self) -> List[int]:
        """Agent ids from lowest to highest contribution."""
        return [int(a) for a in np.argsort(self.values, kind='stable')]

class ImpactLedger:
    """Cumulative per-agent impact, written once per round."""

    def __init__(self, num_agents: int):
        if num_agents < 1:
            raise DomainError(f"Ledger needs at least one agent, got {num_agents}")
        self.num_agents = num_agents
        self.entries: List[LedgerEntry] = []

    @property
    def current(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(self.num_agents)
        return self.entries[-1].impact

    @property
    def last_round(self) -> int:
        return self.entries[-1].round_idx if self.entries else 0

    def entry(self, round_idx: int) -> LedgerEntry:
        for entry in self.entries:
            if entry.round_idx == round_idx:
                return entry
        raise StructuralError(f"Ledger has no entry for round {round_idx}")

    def impact_at(self, round_idx: int) -> np.ndarray:
        if round_idx == 0:
            return np.zeros(self.num_agents)
        return self.entry(round_idx).impact

    def append(self, entry: LedgerEntry) -> 'ImpactLedger':
        if entry.round_idx <= self.last_round:
            raise StructuralError(f"Ledger rounds must increase: {entry.round_idx} after {self.last_round}")
        if entry.impact.shape != (self.num_agents,):
            raise StructuralError(f"Impact vector shape {entry.impact.shape} != ({self.num_agents},)")
        impact = entry.impact.copy()
        impact.setflags(write=False)
        self.entries.append(LedgerEntry(entry.round_idx, impact, entry.selected,
                                        entry.layer_terms, entry.measured))
        return self

    def carry_over(self, round_idx: int, selected: Sequence[int]) -> 'ImpactLedger':
        """Record a round without measurement (off-cadence rounds)."""
        return self.append(LedgerEntry(round_idx, self.current.copy(), tuple(selected), {}, False))

#--------------------------------------------
# Impact recurrence
#--------------------------------------------
def draw_impact_noise(num_layers: int, sigma: float,
                      streams: Mapping[int, np.random.Generator]) -> Dict[int, np.ndarray]:
    """nu_k^l ~ N(0, sigma^2), one scalar per agent and layer."""
    return {k: sigma * streams[k].standard_normal(num_layers) for k in sorted(streams)}

def round_impact_noise(num_agents: int, num_layers: int, sigma: float,
                       stream: np.random.Generator, selected: Sequence[int]) -> Dict[int, np.ndarray]:
    """Impact noise for one round from a single stream.

    A full (num_agents, num_layers) block is drawn every round, so agent k's
    row does not depend on who else was selected.
    """
    block = sigma * stream.standard_normal((num_agents, num_layers))
    return {int(k): block[k] for k in selected}

def shared_impact_noise(dp_noise: Mapping[int, ParamSet]) -> Dict[int, np.ndarray]:
    """Reuse the aggregation draws: nu_k^l is the first element of layer l's noise."""
    return {k: np.array([noise[layer_id].ravel()[0] for layer_id in noise])
            for k, noise in dp_noise.items()}

def _client_distances(server_before: ParamSet,
                      clients: Mapping[int, ParamSet],
                      attn: AttentionMatrix,
                      selected: Tuple[int, ...],
                      p: float) -> np.ndarray:
    """||w_t^l - w_t^{k,l}||_p per selected agent; reused from attention when it has them."""
    if attn.distances is not None and attn.norm_order == p and attn.agents == selected:
        return attn.distances
    return stacked_norm_diff(server_before, [clients[k] for k in selected], p)

def round_impact(server_before: ParamSet,
                 server_after: ParamSet,
                 clients: Mapping[int, ParamSet],
                 attn: AttentionMatrix,
                 cfg: AggregationConfig,
                 gamma: float,
                 ledger: ImpactLedger,
                 selected: Sequence[int],
                 round_idx: int,
                 streams: Optional[Mapping[int, np.random.Generator]] = None,
                 noise: Optional[Mapping[int, np.ndarray]] = None) -> ImpactLedger:
    """Append round round_idx to the ledger using the FedCM recurrence."""
    if not 0.0 < gamma < 1.0:
        raise DomainError(f"Forgetting coefficient gamma must lie in (0, 1), got {gamma}")
    selected = tuple(sorted(int(k) for k in selected))
    if set(attn.agents) != set(selected) or set(clients) != set(selected):
        raise StructuralError(f"Attention {attn.agents} / clients {sorted(clients)} "
                              f"do not cover selected agents {selected}")
    check_congruent(server_before, server_after, 'round_impact server snapshots')

    # ln(||w_{t+1}^l - w_t^l||_p + 1 + delta)
    server_move = layer_norm_diff(server_after, server_before, cfg.norm_order)
    denominator = np.log1p(server_move + DENOMINATOR_GUARD)
    ratio = np.log1p(_client_distances(server_before, clients, attn, selected, cfg.norm_order)) / denominator

    if cfg.dp_weight > 0:
        if noise is None:
            if streams is None:
                raise DomainError("dp_weight > 0 needs impact noise streams or pre-drawn noise")
            noise = draw_impact_noise(len(server_before), cfg.dp_sigma, {k: streams[k] for k in selected})
        ratio = ratio + cfg.dp_weight * np.vstack([noise[k] for k in selected])

    terms = cfg.stepsize * attn.rows(selected) * ratio
    bad = ~np.isfinite(terms)
    if np.any(bad):
        row, layer = np.argwhere(bad)[0]
        raise NumericError(f"Non-finite impact term for agent {selected[row]}, "
                           f"layer '{server_before.layer_ids[layer]}'")

    layer_weights = server_before.layer_sizes / server_before.num_params
    previous = ledger.current
    impact = previous.copy()
    index = list(selected)
    impact[index] = terms @ layer_weights + gamma * previous[index]

    logger.debug(f"Round {round_idx} impact: {np.round(impact, 4).tolist()}")
    layer_terms = dict(zip(selected, terms))
    return ledger.append(LedgerEntry(round_idx, impact, selected, layer_terms, True))

#--------------------------------------------
# Normalization
#--------------------------------------------
def normalize_scores(scores: np.ndarray) -> np.ndarray:
    """softmax(MinMaxScaler(scores)); uniform when all scores are equal."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise DomainError(f"Expected a non-empty score vector, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise NumericError("Cannot normalize non-finite scores")
    if scores.size < 2 or np.ptp(scores) == 0:
        return np.full(scores.size, 1.0 / scores.size)
    scaled = MinMaxScaler().fit_transform(scores.reshape(-1, 1)).ravel()
    return softmax(scaled)

def contributions(ledger: ImpactLedger, round_idx: int) -> ContributionVector:
    """con_t = Softmax(MinMaxScaler(imp_t))."""
    return ContributionVector(round_idx, normalize_scores(ledger.impact_at(round_idx)))
