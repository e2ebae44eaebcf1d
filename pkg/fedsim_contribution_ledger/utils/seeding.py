# fedsim_contribution_ledger/utils/seeding.py
"""
Seed derivation for reproducible, schedule-independent simulations.

Every stochastic site draws from stream(master_seed, site, round, agent).
Site labels are hashed with sha256, so the mapping does not depend on
PYTHONHASHSEED or on the order in which streams are requested.
"""
import hashlib
from typing import Dict, Iterable

import numpy as np

# Site labels
DATA = 'data'
GRAMMAR = 'grammar'
CORRUPT = 'corrupt'
INIT = 'init'
SELECT = 'select'
TRAIN = 'train'
DP = 'dp'
IMPACT_DP = 'impact-dp'
SHAPLEY = 'shapley'

def _site_key(site: str) -> int:
    return int.from_bytes(hashlib.sha256(site.encode('utf-8')).digest()[:8], 'little')

def derive_stream(master_seed: int, site: str, round_idx: int = 0, agent: int = -1) -> np.random.Generator:
    """Deterministic generator for one (seed, site, round, agent) tuple.

    agent = -1 marks server-side sites that are not tied to an agent.
    """
    if master_seed < 0 or round_idx < 0 or agent < -1:
        raise ValueError(f"Seed components must be non-negative: "
                         f"seed={master_seed}, round={round_idx}, agent={agent}")
    entropy = [master_seed, _site_key(site), round_idx, agent + 1]
    return np.random.default_rng(np.random.SeedSequence(entropy))

def agent_streams(master_seed: int, site: str, round_idx: int,
                  agents: Iterable[int]) -> Dict[int, np.random.Generator]:
    """One derived stream per agent for a round."""
    return {k: derive_stream(master_seed, site, round_idx, k) for k in agents}
